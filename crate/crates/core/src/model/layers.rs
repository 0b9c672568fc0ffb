use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::params::{Bound, ParamId, ParamKind, ParamStore};
use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};

pub(crate) fn normal_tensor(rng: &mut impl Rng, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let dist = Normal::new(0.0, std).expect("finite std");
    Tensor::new(shape.to_vec(), (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Dense layer `x·W + b` with a low-rank adapter: `x·(W + (α/r)·U·V) + b`.
///
/// `W` and `b` are base weights; only `U` (d_in×r) and `V` (r×d_out) are
/// adapter parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraLinear {
    pub base_weight: ParamId,
    pub base_bias: ParamId,
    pub lora_u: ParamId,
    pub lora_v: ParamId,
    pub d_in: usize,
    pub d_out: usize,
    pub rank: usize,
    pub lora_alpha: f64,
}

impl LoraLinear {
    /// Base weights drawn with std `1/sqrt(d_in)`; adapter factors start at zero.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: ParamKind,
        d_in: usize,
        d_out: usize,
        rank: usize,
        lora_alpha: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        check_rank(name, d_in, d_out, rank)?;
        let w = normal_tensor(rng, &[d_in, d_out], 1.0 / (d_in as f64).sqrt());
        Ok(Self {
            base_weight: store.add(format!("{name}.weight"), kind, w),
            base_bias: store.add(format!("{name}.bias"), kind, Tensor::zeros(&[d_out])),
            lora_u: store.add(
                format!("{name}.lora_u"),
                ParamKind::Lora,
                Tensor::zeros(&[d_in, rank]),
            ),
            lora_v: store.add(
                format!("{name}.lora_v"),
                ParamKind::Lora,
                Tensor::zeros(&[rank, d_out]),
            ),
            d_in,
            d_out,
            rank,
            lora_alpha,
        })
    }

    pub fn scaling(&self) -> f64 {
        self.lora_alpha / self.rank as f64
    }

    /// Adapter parameter count `r·(d_in + d_out)`.
    pub fn adapter_params(&self) -> usize {
        self.rank * (self.d_in + self.d_out)
    }

    /// Replaces the adapter with fresh factors: `U ~ N(0, u_std²)`, `V = 0`.
    pub fn reset_adapter(
        &mut self,
        store: &mut ParamStore,
        rank: usize,
        lora_alpha: f64,
        u_std: f64,
        rng: &mut impl Rng,
    ) -> Result<()> {
        check_rank("lora", self.d_in, self.d_out, rank)?;
        store.set(self.lora_u, normal_tensor(rng, &[self.d_in, rank], u_std));
        store.set(self.lora_v, Tensor::zeros(&[rank, self.d_out]));
        self.rank = rank;
        self.lora_alpha = lora_alpha;
        Ok(())
    }

    /// Effective weight `W + (α/r)·U·V` on the tape.
    pub fn effective_weight(&self, tape: &mut Tape, bound: &Bound) -> Result<Var> {
        let uv = tape.matmul(bound.var(self.lora_u), bound.var(self.lora_v))?;
        let delta = tape.scale(uv, self.scaling());
        tape.add(bound.var(self.base_weight), delta)
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let cols = tape.value(x).shape().get(1).copied();
        if cols != Some(self.d_in) {
            return Err(Error::ShapeMismatch {
                op: "lora_forward",
                lhs: tape.value(x).shape().to_vec(),
                rhs: vec![self.d_in, self.d_out],
            });
        }
        let w = self.effective_weight(tape, bound)?;
        let y = tape.matmul(x, w)?;
        tape.add_row(y, bound.var(self.base_bias))
    }
}

fn check_rank(name: &str, d_in: usize, d_out: usize, rank: usize) -> Result<()> {
    if rank == 0 || rank > d_in.min(d_out) / 2 {
        return Err(Error::InvalidArgument(format!(
            "{name}: LoRA rank {rank} must be in 1..={} for a {d_in}x{d_out} layer",
            d_in.min(d_out) / 2
        )));
    }
    Ok(())
}

/// Applies a LoRA layer to `x[n×d_in]`.
pub fn lora_forward(tape: &mut Tape, layer: &LoraLinear, bound: &Bound, x: Var) -> Result<Var> {
    layer.forward(tape, bound, x)
}

/// Plain dense layer (decoder head).
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: ParamKind,
        d_in: usize,
        d_out: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let w = normal_tensor(rng, &[d_in, d_out], 1.0 / (d_in as f64).sqrt());
        Self {
            weight: store.add(format!("{name}.weight"), kind, w),
            bias: store.add(format!("{name}.bias"), kind, Tensor::zeros(&[d_out])),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.matmul(x, bound.var(self.weight))?;
        tape.add_row(y, bound.var(self.bias))
    }
}

/// Layer-norm affine parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, kind: ParamKind, dim: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), kind, Tensor::full(&[dim], 1.0)),
            beta: store.add(format!("{name}.beta"), kind, Tensor::zeros(&[dim])),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &Bound, x: Var) -> Result<Var> {
        tape.layer_norm(x, bound.var(self.gamma), bound.var(self.beta), 1e-5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TuneScope;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_layer() -> (ParamStore, LoraLinear) {
        let mut store = ParamStore::new();
        let base_weight = store.add("w", ParamKind::EncoderBase, Tensor::zeros(&[1, 1]));
        let base_bias = store.add("b", ParamKind::EncoderBase, Tensor::zeros(&[1]));
        let lora_u = store.add(
            "u",
            ParamKind::Lora,
            Tensor::new(vec![1, 1], vec![2.0]).unwrap(),
        );
        let lora_v = store.add(
            "v",
            ParamKind::Lora,
            Tensor::new(vec![1, 1], vec![3.0]).unwrap(),
        );
        // The rank bound is bypassed here to reproduce the 1x1 worked example.
        let layer = LoraLinear {
            base_weight,
            base_bias,
            lora_u,
            lora_v,
            d_in: 1,
            d_out: 1,
            rank: 8,
            lora_alpha: 16.0,
        };
        (store, layer)
    }

    #[test]
    fn scalar_worked_example() {
        let (store, layer) = scalar_layer();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, TuneScope::Lora);
        let x = tape.constant(Tensor::new(vec![1, 1], vec![1.0]).unwrap());
        let y = lora_forward(&mut tape, &layer, &bound, x).unwrap();
        assert_eq!(tape.value(y).data(), &[12.0]);

        let l = tape.sum(y).unwrap();
        let g = tape.backward(l).unwrap();
        // dy/dU = x * s * V = 6, dy/dV = x * s * U = 4
        assert_eq!(g.get(bound.var(layer.lora_u)).unwrap().data(), &[6.0]);
        assert_eq!(g.get(bound.var(layer.lora_v)).unwrap().data(), &[4.0]);
        assert!(g.get(bound.var(layer.base_weight)).is_none());
        assert!(g.get(bound.var(layer.base_bias)).is_none());
    }

    #[test]
    fn zero_v_equals_base_layer_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let mut layer =
            LoraLinear::new(&mut store, "l", ParamKind::EncoderBase, 16, 8, 2, 16.0, &mut rng)
                .unwrap();
        store.set(layer.base_bias, normal_tensor(&mut rng, &[8], 0.5));
        layer
            .reset_adapter(&mut store, 4, 16.0, 0.02, &mut rng)
            .unwrap();
        let x = normal_tensor(&mut rng, &[5, 16], 1.0);

        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, TuneScope::Lora);
        let xv = tape.constant(x.clone());
        let y = layer.forward(&mut tape, &bound, xv).unwrap();

        let mut t2 = Tape::new();
        let xv = t2.constant(x);
        let w = t2.constant(store.get(layer.base_weight).clone());
        let b = t2.constant(store.get(layer.base_bias).clone());
        let y2 = t2.matmul(xv, w).unwrap();
        let y2 = t2.add_row(y2, b).unwrap();
        assert_eq!(tape.value(y), t2.value(y2));
    }

    #[test]
    fn rank_bound_enforced() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        assert!(
            LoraLinear::new(&mut store, "l", ParamKind::EncoderBase, 8, 8, 5, 16.0, &mut rng)
                .is_err()
        );
        assert!(
            LoraLinear::new(&mut store, "l", ParamKind::EncoderBase, 8, 8, 0, 16.0, &mut rng)
                .is_err()
        );
    }

    #[test]
    fn extent_mismatch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let layer =
            LoraLinear::new(&mut store, "l", ParamKind::EncoderBase, 8, 8, 2, 16.0, &mut rng)
                .unwrap();
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape, TuneScope::Lora);
        let x = tape.constant(Tensor::zeros(&[2, 7]));
        assert!(matches!(
            layer.forward(&mut tape, &bound, x),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
