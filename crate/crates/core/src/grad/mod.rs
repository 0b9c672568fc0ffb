//! Dense tensors with define-by-run reverse-mode differentiation.
//!
//! Only the operations the adaptation losses and the toy depth network need
//! are provided. Non-smooth points use fixed subgradients: `sign(0) = 0`,
//! `hinge'(0) = 0`, and the median routes its gradient to the selected order
//! statistic(s), ties going to the lowest flat index.

mod tape;
mod tensor;

pub use tape::{BinaryKind, Gradients, ReduceKind, Tape, Var};
pub(crate) use tape::stable_order;
pub use tensor::Tensor;

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec())
    }

    #[test]
    fn ew_add_and_scalar_broadcast() {
        let mut t = Tape::new();
        let a = t.constant(v(&[1.0, 2.0]));
        let b = t.constant(v(&[3.0, 4.0]));
        let c = t.add(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[4.0, 6.0]);

        let x = t.constant(v(&[1.0, 2.0, 3.0]));
        let zero = t.constant(Tensor::scalar(0.0));
        let y = t.mul(x, zero).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn square_gradient() {
        let mut t = Tape::new();
        let x = t.leaf(v(&[3.0]), true);
        let y = t.mul(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn ew_errors() {
        let mut t = Tape::new();
        let a = t.constant(v(&[1.0, 2.0]));
        let b = t.constant(v(&[1.0, 2.0, 3.0]));
        match t.add(a, b) {
            Err(Error::ShapeMismatch { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2]);
                assert_eq!(rhs, vec![3]);
            }
            other => panic!("unexpected {other:?}"),
        }
        let z = t.constant(v(&[1.0, 0.0]));
        assert!(matches!(
            t.div(a, z),
            Err(Error::DivisionByZero { index: 1, .. })
        ));
    }

    #[test]
    fn broadcast_gradient_sums() {
        let mut t = Tape::new();
        let x = t.leaf(v(&[1.0, 2.0, 3.0]), true);
        let s = t.leaf(Tensor::scalar(2.0), true);
        let y = t.mul(x, s).unwrap();
        let l = t.sum(y).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(s).unwrap().data(), &[6.0]);
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn matmul_examples() {
        let mut t = Tape::new();
        let eye = t.constant(Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let col = t.constant(Tensor::new(vec![2, 1], vec![2.0, 3.0]).unwrap());
        let p = t.matmul(eye, col).unwrap();
        assert_eq!(t.value(p).data(), &[2.0, 3.0]);
        let a = t.constant(Tensor::new(vec![1, 1], vec![2.0]).unwrap());
        let b = t.constant(Tensor::new(vec![1, 1], vec![3.0]).unwrap());
        let p = t.matmul(a, b).unwrap();
        assert_eq!(t.value(p).data(), &[6.0]);
        assert!(matches!(t.matmul(eye, a), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn reduce_examples() {
        let mut t = Tape::new();
        let x = t.leaf(v(&[1.0, 2.0, 3.0, 6.0]), true);
        let m = t.mean(x).unwrap();
        assert_eq!(t.value(m).item(), 3.0);
        let e = t.constant(v(&[]));
        let s = t.sum(e).unwrap();
        assert_eq!(t.value(s).item(), 0.0);
        assert!(matches!(t.mean(e), Err(Error::EmptyInput { .. })));
        assert!(matches!(
            t.reduce(x, ReduceKind::Sum, Some(1)),
            Err(Error::AxisOutOfRange { .. })
        ));
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.25; 4]);
    }

    #[test]
    fn reduce_along_axis() {
        let mut t = Tape::new();
        let x = t.leaf(
            Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap(),
            true,
        );
        let rows = t.reduce(x, ReduceKind::Mean, Some(1)).unwrap();
        assert_eq!(t.value(rows).data(), &[2.0, 5.0]);
        let cols = t.reduce(x, ReduceKind::Sum, Some(0)).unwrap();
        assert_eq!(t.value(cols).data(), &[5.0, 7.0, 9.0]);
        let l = t.sum(rows).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0 / 3.0; 6]);
    }

    #[test]
    fn abs_and_hinge_subgradients() {
        let mut t = Tape::new();
        let x = t.leaf(v(&[-2.0, 3.0, 0.0]), true);
        let a = t.abs(x);
        assert_eq!(t.value(a).data(), &[2.0, 3.0, 0.0]);
        let l = t.sum(a).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[-1.0, 1.0, 0.0]);

        let mut t = Tape::new();
        let x = t.leaf(v(&[-0.1, 0.4, 0.0]), true);
        let h = t.hinge(x);
        assert_eq!(t.value(h).data(), &[0.0, 0.4, 0.0]);
        let l = t.sum(h).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn median_examples() {
        let mut t = Tape::new();
        let x = t.leaf(v(&[1.0, 3.0, 2.0]), true);
        let m = t.median(x).unwrap();
        assert_eq!(t.value(m).item(), 2.0);

        let mut t = Tape::new();
        let x = t.leaf(v(&[1.0, 2.0, 3.0, 4.0]), true);
        let m = t.median(x).unwrap();
        assert_eq!(t.value(m).item(), 2.5);
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.5, 0.5, 0.0]);

        let mut t = Tape::new();
        let x = t.leaf(v(&[5.0]), true);
        let m = t.median(x).unwrap();
        assert_eq!(t.value(m).item(), 5.0);
        let g = t.backward(m).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);

        let mut t = Tape::new();
        let e2 = t.constant(Tensor::from_vec(vec![]));
        assert!(matches!(t.median(e2), Err(Error::EmptyInput { .. })));
        assert!(matches!(t.mad(e2), Err(Error::EmptyInput { .. })));
    }

    #[test]
    fn median_ties_go_to_lowest_index() {
        let mut t = Tape::new();
        let x = t.leaf(v(&[2.0, 1.0, 2.0, 2.0, 9.0]), true);
        let m = t.median(x).unwrap();
        let g = t.backward(m).unwrap();
        // sorted: 1(i1) 2(i0) 2(i2) 2(i3) 9(i4) -> middle is index 2
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn mad_examples() {
        for (data, want) in [
            (vec![1.0, 2.0, 3.0, 4.0, 5.0], 1.0),
            (vec![4.0, 4.0, 4.0], 0.0),
            (vec![0.0, 10.0], 5.0),
        ] {
            let mut t = Tape::new();
            let x = t.constant(Tensor::from_vec(data));
            let m = t.mad(x).unwrap();
            assert_eq!(t.value(m).item(), want);
        }
    }

    #[test]
    fn stop_gradient_examples() {
        let mut t = Tape::new();
        let x = t.leaf(v(&[1.0, 2.0]), true);
        let s = t.stop_gradient(x);
        assert_eq!(t.value(s).data(), &[1.0, 2.0]);

        let mut t = Tape::new();
        let x = t.leaf(v(&[3.0]), true);
        let s = t.stop_gradient(x);
        let y = t.mul(s, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[3.0]);

        let mut t = Tape::new();
        let x = t.leaf(v(&[3.0]), true);
        let s = t.stop_gradient(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0]);
        assert!(g.get(s).is_none());
    }

    #[test]
    fn gather_examples() {
        let mut t = Tape::new();
        let x = t.leaf(v(&[10.0, 20.0, 30.0]), true);
        let y = t.gather(x, &[2, 0]).unwrap();
        assert_eq!(t.value(y).data(), &[30.0, 10.0]);
        let d = t.gather(x, &[1, 1]).unwrap();
        let e = t.gather(x, &[]).unwrap();
        assert_eq!(t.value(e).numel(), 0);
        assert!(matches!(
            t.gather(x, &[3]),
            Err(Error::IndexOutOfBounds { index: 3, .. })
        ));
        let l = t.sum(d).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 2.0, 0.0]);
    }

    #[test]
    fn backward_contracts() {
        let mut t = Tape::new();
        let x = t.leaf(v(&[1.0, 2.0, 3.0]), true);
        let l = t.sum(x).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(matches!(t.backward(l), Err(Error::TapeConsumed)));

        let mut t = Tape::new();
        let x = t.leaf(v(&[1.0, 2.0]), true);
        assert!(matches!(t.backward(x), Err(Error::NonScalarLoss(_))));
    }

    /// Random composite exercising the fused network ops.
    fn network_like(t: &mut Tape, x: Var, w: Var, gamma: Var, beta: Var, row: Var) -> Var {
        let h = t.matmul(x, w).unwrap();
        let h = t.add_row(h, row).unwrap();
        let h = t.layer_norm(h, gamma, beta, 1e-5).unwrap();
        let a = t.softmax_rows(h).unwrap();
        let b = t.narrow_cols(a, 1, 2).unwrap();
        let c = t.gelu(h);
        let c = t.narrow_cols(c, 0, 2).unwrap();
        let d = t.mul(b, c).unwrap();
        let tr = t.transpose(d).unwrap();
        let sp = t.softplus(tr);
        let r = t.reshape(sp, vec![6]).unwrap();
        t.sum(r).unwrap()
    }

    #[test]
    fn fused_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut gen = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
                .unwrap()
        };
        let inputs = [
            gen(&[3, 4]),
            gen(&[4, 3]),
            gen(&[3]),
            gen(&[3]),
            gen(&[3]),
        ];
        let eval = |vals: &[Tensor]| {
            let mut t = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| t.leaf(v.clone(), true)).collect();
            let l = network_like(&mut t, vars[0], vars[1], vars[2], vars[3], vars[4]);
            (t, vars, l)
        };
        let (mut t, vars, l) = eval(&inputs);
        let g = t.backward(l).unwrap();
        let h = 1e-5;
        for (k, var) in vars.iter().enumerate() {
            let analytic = g.get(*var).unwrap();
            for i in 0..inputs[k].numel() {
                let mut plus = inputs.to_vec();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.to_vec();
                minus[k].data_mut()[i] -= h;
                let (tp, _, lp) = eval(&plus);
                let (tm, _, lm) = eval(&minus);
                let fd = (tp.value(lp).item() - tm.value(lm).item()) / (2.0 * h);
                let a = analytic.data()[i];
                let err = (a - fd).abs() / fd.abs().max(a.abs()).max(1e-6);
                assert!(err < 1e-5, "input {k}[{i}]: analytic {a} fd {fd}");
            }
        }
    }

    #[test]
    fn backward_is_bit_deterministic() {
        let build = || {
            let mut t = Tape::new();
            let x = t.leaf(v(&[0.3, -1.2, 2.5, 0.7, 1.1]), true);
            let m = t.mad(x).unwrap();
            let md = t.median(x).unwrap();
            let c = t.sub(x, md).unwrap();
            let q = t.div(c, m).unwrap();
            let a = t.abs(q);
            let l = t.mean(a).unwrap();
            let g = t.backward(l).unwrap();
            g.get(x).unwrap().clone()
        };
        let a = build();
        let b = build();
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}
