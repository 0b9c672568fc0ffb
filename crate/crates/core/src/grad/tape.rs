use std::cmp::Ordering;

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Broadcast {
    None,
    Lhs,
    Rhs,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary {
        kind: BinaryKind,
        lhs: Var,
        rhs: Var,
        broadcast: Broadcast,
    },
    Affine {
        input: Var,
        scale: f64,
    },
    MatMul {
        lhs: Var,
        rhs: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        input: Var,
        rows: usize,
        cols: usize,
    },
    Reduce {
        input: Var,
        kind: ReduceKind,
        axis: Option<usize>,
    },
    Abs(Var),
    Hinge(Var),
    Gelu(Var),
    Softplus(Var),
    /// Selected order statistics with their gradient weights.
    Median {
        input: Var,
        picks: Vec<(usize, f64)>,
    },
    Gather {
        input: Var,
        indices: Vec<usize>,
    },
    AddRow {
        input: Var,
        row: Var,
        cols: usize,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows {
        input: Var,
        cols: usize,
    },
    NarrowCols {
        input: Var,
        cols: usize,
        start: usize,
        len: usize,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Define-by-run record of tensor operations for one backward pass.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it.
/// A tape supports exactly one call to [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every `requires_grad` leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for a leaf, `None` for leaves that do not require grad.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }

    /// Number of leaves carrying a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044_715 * x * x * x);
    let t = u.tanh();
    let y = 0.5 * x * (1.0 + t);
    let du = C * (1.0 + 3.0 * 0.044_715 * x * x);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Order of `values` ascending, ties broken by lowest flat index.
pub(crate) fn stable_order(values: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| {
        values[i]
            .partial_cmp(&values[j])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    });
    order
}

/// Median order statistics of `values`: (index, weight) pairs.
fn median_picks(values: &[f64]) -> Vec<(usize, f64)> {
    let order = stable_order(values);
    let n = order.len();
    if n % 2 == 1 {
        vec![(order[n / 2], 1.0)]
    } else {
        vec![(order[n / 2 - 1], 0.5), (order[n / 2], 0.5)]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers an input value.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Same values, detached from every backward path.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let value = self.value(a).clone();
        self.push(value, Op::Leaf, false)
    }

    /// Element-wise arithmetic; one operand may be a single-element tensor.
    pub fn ew_op(&mut self, a: Var, b: Var, kind: BinaryKind) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let broadcast = if va.shape() == vb.shape() {
            Broadcast::None
        } else if vb.is_scalar() {
            Broadcast::Rhs
        } else if va.is_scalar() {
            Broadcast::Lhs
        } else {
            return Err(shape_err("ew_op", va, vb));
        };
        let shape = match broadcast {
            Broadcast::Lhs => vb.shape().to_vec(),
            _ => va.shape().to_vec(),
        };
        let n = shape.iter().product::<usize>();
        let (da, db) = (va.data(), vb.data());
        let at = |i: usize| if broadcast == Broadcast::Lhs { da[0] } else { da[i] };
        let bt = |i: usize| if broadcast == Broadcast::Rhs { db[0] } else { db[i] };
        if kind == BinaryKind::Div {
            if let Some(index) = db.iter().position(|&v| v == 0.0) {
                return Err(Error::DivisionByZero { op: "div", index });
            }
        }
        let data: Vec<f64> = (0..n)
            .map(|i| match kind {
                BinaryKind::Add => at(i) + bt(i),
                BinaryKind::Sub => at(i) - bt(i),
                BinaryKind::Mul => at(i) * bt(i),
                BinaryKind::Div => at(i) / bt(i),
            })
            .collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, data)?,
            Op::Binary {
                kind,
                lhs: a,
                rhs: b,
                broadcast,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_op(a, b, BinaryKind::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_op(a, b, BinaryKind::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_op(a, b, BinaryKind::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.ew_op(a, b, BinaryKind::Div)
    }

    /// `scale * a + shift` with constant coefficients.
    pub fn affine(&mut self, a: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(a).map(|v| scale * v + shift);
        let rg = self.rg(&[a]);
        self.push(value, Op::Affine { input: a, scale }, rg)
    }

    pub fn scale(&mut self, a: Var, scale: f64) -> Var {
        self.affine(a, scale, 0.0)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let (m, k) = va.dims2("matmul")?;
        let (k2, n) = vb.dims2("matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", va, vb));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, va.data(), false, vb.data(), false, &mut out, 0.0);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::MatMul {
                lhs: a,
                rhs: b,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (rows, cols) = va.dims2("transpose")?;
        let d = va.data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = d[r * cols + c];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![cols, rows], out)?,
            Op::Transpose {
                input: a,
                rows,
                cols,
            },
            rg,
        ))
    }

    /// Sum or mean, over everything (`axis = None`) or one axis.
    pub fn reduce(&mut self, a: Var, kind: ReduceKind, axis: Option<usize>) -> Result<Var> {
        let va = self.value(a);
        let value = match axis {
            None => {
                if kind == ReduceKind::Mean && va.numel() == 0 {
                    return Err(Error::EmptyInput { op: "mean" });
                }
                let s: f64 = va.data().iter().sum();
                match kind {
                    ReduceKind::Sum => Tensor::scalar(s),
                    ReduceKind::Mean => Tensor::scalar(s / va.numel() as f64),
                }
            }
            Some(ax) => {
                let (outer, len, inner) = axis_split(va.shape(), ax, "reduce")?;
                if kind == ReduceKind::Mean && len == 0 {
                    return Err(Error::EmptyInput { op: "mean" });
                }
                let d = va.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += d[base + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    for v in &mut out {
                        *v /= len as f64;
                    }
                }
                let mut shape = va.shape().to_vec();
                shape.remove(ax);
                Tensor::new(shape, out)?
            }
        };
        let rg = self.rg(&[a]);
        Ok(self.push(
            value,
            Op::Reduce {
                input: a,
                kind,
                axis,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, ReduceKind::Sum, None)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.reduce(a, ReduceKind::Mean, None)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let rg = self.rg(&[a]);
        self.push(value, Op::Abs(a), rg)
    }

    /// `max(0, a)`; also serves as ReLU.
    pub fn hinge(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| v.max(0.0));
        let rg = self.rg(&[a]);
        self.push(value, Op::Hinge(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|v| gelu_parts(v).0);
        let rg = self.rg(&[a]);
        self.push(value, Op::Gelu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        let rg = self.rg(&[a]);
        self.push(value, Op::Softplus(a), rg)
    }

    /// Median of a flattened tensor; the gradient is routed to the selected
    /// order statistic(s), ties resolved towards the lowest index.
    pub fn median(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        if va.numel() == 0 {
            return Err(Error::EmptyInput { op: "median" });
        }
        let picks = median_picks(va.data());
        let d = va.data();
        let m: f64 = picks.iter().map(|&(i, w)| w * d[i]).sum();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(m), Op::Median { input: a, picks }, rg))
    }

    /// Median absolute deviation `median(|a - median(a)|)`.
    pub fn mad(&mut self, a: Var) -> Result<Var> {
        let med = self.median(a)?;
        let centered = self.sub(a, med)?;
        let dev = self.abs(centered);
        self.median(dev)
    }

    /// Values at flat `indices`, as a 1-d tensor.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let va = self.value(a);
        let len = va.numel();
        if let Some(&index) = indices.iter().find(|&&i| i >= len) {
            return Err(Error::IndexOutOfBounds {
                op: "gather",
                index,
                len,
            });
        }
        let d = va.data();
        let out: Vec<f64> = indices.iter().map(|&i| d[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::from_vec(out),
            Op::Gather {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Adds a length-`d` row to every row of `a[n×d]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (va, vr) = (self.value(a), self.value(row));
        let (n, d) = va.dims2("add_row")?;
        if vr.numel() != d {
            return Err(shape_err("add_row", va, vr));
        }
        let (da, dr) = (va.data(), vr.data());
        let mut out = da.to_vec();
        for r in 0..n {
            for c in 0..d {
                out[r * d + c] += dr[c];
            }
        }
        let rg = self.rg(&[a, row]);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::AddRow {
                input: a,
                row,
                cols: d,
            },
            rg,
        ))
    }

    /// Row-wise layer normalisation with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (va, vg, vb) = (self.value(a), self.value(gamma), self.value(beta));
        let (n, d) = va.dims2("layer_norm")?;
        if vg.numel() != d || vb.numel() != d {
            return Err(shape_err("layer_norm", va, vg));
        }
        let (x, g, b) = (va.data(), vg.data(), vb.data());
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mu) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * g[c] + b[c];
            }
        }
        let rg = self.rg(&[a, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::LayerNorm {
                input: a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let va = self.value(a);
        let (n, d) = va.dims2("softmax_rows")?;
        let x = va.data();
        let mut out = vec![0.0; n * d];
        for r in 0..n {
            let row = &x[r * d..(r + 1) * d];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for c in 0..d {
                let e = (row[c] - mx).exp();
                out[r * d + c] = e;
                z += e;
            }
            for c in 0..d {
                out[r * d + c] /= z;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::SoftmaxRows { input: a, cols: d },
            rg,
        ))
    }

    /// Columns `start..start+len` of a 2-d tensor.
    pub fn narrow_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let va = self.value(a);
        let (n, d) = va.dims2("narrow_cols")?;
        if start + len > d {
            return Err(Error::IndexOutOfBounds {
                op: "narrow_cols",
                index: start + len,
                len: d,
            });
        }
        let x = va.data();
        let mut out = Vec::with_capacity(n * len);
        for r in 0..n {
            out.extend_from_slice(&x[r * d + start..r * d + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            Tensor::new(vec![n, len], out)?,
            Op::NarrowCols {
                input: a,
                cols: d,
                start,
                len,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(value, Op::Reshape(a), rg))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            self.backprop_node(id, &g, &mut grads);
        }

        let out = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| {
                if node.requires_grad && matches!(node.op, Op::Leaf) {
                    let data = g.unwrap_or_else(|| vec![0.0; node.value.numel()]);
                    Some(Tensor::new(node.value.shape().to_vec(), data).expect("grad shape"))
                } else {
                    None
                }
            })
            .collect();
        Ok(Gradients { grads: out })
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.data();
        let needs = |v: Var| nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.numel()]);
            f(slot);
        };

        match &nodes[id].op {
            Op::Leaf => {}
            Op::Binary {
                kind,
                lhs,
                rhs,
                broadcast,
            } => {
                let (a, b) = (val(*lhs), val(*rhs));
                let at = |i: usize| if *broadcast == Broadcast::Lhs { a[0] } else { a[i] };
                let bt = |i: usize| if *broadcast == Broadcast::Rhs { b[0] } else { b[i] };
                let da = |i: usize| match kind {
                    BinaryKind::Add | BinaryKind::Sub => g[i],
                    BinaryKind::Mul => g[i] * bt(i),
                    BinaryKind::Div => g[i] / bt(i),
                };
                let db = |i: usize| match kind {
                    BinaryKind::Add => g[i],
                    BinaryKind::Sub => -g[i],
                    BinaryKind::Mul => g[i] * at(i),
                    BinaryKind::Div => -g[i] * at(i) / (bt(i) * bt(i)),
                };
                let lhs_reduced = *broadcast == Broadcast::Lhs;
                let rhs_reduced = *broadcast == Broadcast::Rhs;
                acc(*lhs, &|s| {
                    if lhs_reduced {
                        s[0] += (0..g.len()).map(da).sum::<f64>();
                    } else {
                        for (i, v) in s.iter_mut().enumerate() {
                            *v += da(i);
                        }
                    }
                });
                acc(*rhs, &|s| {
                    if rhs_reduced {
                        s[0] += (0..g.len()).map(db).sum::<f64>();
                    } else {
                        for (i, v) in s.iter_mut().enumerate() {
                            *v += db(i);
                        }
                    }
                });
            }
            Op::Affine { input, scale } => acc(*input, &|s| {
                for (v, gi) in s.iter_mut().zip(g) {
                    *v += scale * gi;
                }
            }),
            Op::MatMul { lhs, rhs, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*lhs) {
                    let b = val(*rhs);
                    acc(*lhs, &|s| gemm(m, n, k, g, false, b, true, s, 1.0));
                }
                if needs(*rhs) {
                    let a = val(*lhs);
                    acc(*rhs, &|s| gemm(k, m, n, a, true, g, false, s, 1.0));
                }
            }
            Op::Transpose { input, rows, cols } => acc(*input, &|s| {
                for r in 0..*rows {
                    for c in 0..*cols {
                        s[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            Op::Reduce { input, kind, axis } => {
                let shape = nodes[input.0].value.shape();
                match axis {
                    None => {
                        let n = nodes[input.0].value.numel();
                        let w = match kind {
                            ReduceKind::Sum => g[0],
                            ReduceKind::Mean => g[0] / n as f64,
                        };
                        acc(*input, &|s| s.iter_mut().for_each(|v| *v += w));
                    }
                    Some(ax) => {
                        let (outer, len, inner) = axis_split(shape, *ax, "reduce").expect("axis");
                        let f = match kind {
                            ReduceKind::Sum => 1.0,
                            ReduceKind::Mean => 1.0 / len as f64,
                        };
                        acc(*input, &|s| {
                            for o in 0..outer {
                                for l in 0..len {
                                    let base = (o * len + l) * inner;
                                    for i in 0..inner {
                                        s[base + i] += f * g[o * inner + i];
                                    }
                                }
                            }
                        });
                    }
                }
            }
            Op::Abs(input) => {
                let x = val(*input);
                acc(*input, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * sign(x[i]);
                    }
                });
            }
            Op::Hinge(input) => {
                let x = val(*input);
                acc(*input, &|s| {
                    for i in 0..s.len() {
                        if x[i] > 0.0 {
                            s[i] += g[i];
                        }
                    }
                });
            }
            Op::Gelu(input) => {
                let x = val(*input);
                acc(*input, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_parts(x[i]).1;
                    }
                });
            }
            Op::Softplus(input) => {
                let x = val(*input);
                acc(*input, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * sigmoid(x[i]);
                    }
                });
            }
            Op::Median { input, picks } => acc(*input, &|s| {
                for &(i, w) in picks {
                    s[i] += w * g[0];
                }
            }),
            Op::Gather { input, indices } => acc(*input, &|s| {
                for (k, &i) in indices.iter().enumerate() {
                    s[i] += g[k];
                }
            }),
            Op::AddRow { input, row, cols } => {
                acc(*input, &|s| {
                    for (v, gi) in s.iter_mut().zip(g) {
                        *v += gi;
                    }
                });
                acc(*row, &|s| {
                    for (i, gi) in g.iter().enumerate() {
                        s[i % cols] += gi;
                    }
                });
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gam = val(*gamma);
                let d = gam.len();
                let n = inv_std.len();
                acc(*gamma, &|s| {
                    for i in 0..n * d {
                        s[i % d] += g[i] * xhat[i];
                    }
                });
                acc(*beta, &|s| {
                    for i in 0..n * d {
                        s[i % d] += g[i];
                    }
                });
                acc(*input, &|s| {
                    for r in 0..n {
                        let rs = r * d;
                        let mut sum_gh = 0.0;
                        let mut sum_ghx = 0.0;
                        for c in 0..d {
                            let gh = g[rs + c] * gam[c];
                            sum_gh += gh;
                            sum_ghx += gh * xhat[rs + c];
                        }
                        let inv_d = 1.0 / d as f64;
                        for c in 0..d {
                            let gh = g[rs + c] * gam[c];
                            s[rs + c] += inv_std[r]
                                * (gh - inv_d * sum_gh - xhat[rs + c] * inv_d * sum_ghx);
                        }
                    }
                });
            }
            Op::SoftmaxRows { input, cols } => {
                let y = nodes[id].value.data();
                let d = *cols;
                acc(*input, &|s| {
                    for r in 0..y.len() / d {
                        let rs = r * d;
                        let dot: f64 = (0..d).map(|c| g[rs + c] * y[rs + c]).sum();
                        for c in 0..d {
                            s[rs + c] += y[rs + c] * (g[rs + c] - dot);
                        }
                    }
                });
            }
            Op::NarrowCols {
                input,
                cols,
                start,
                len,
            } => acc(*input, &|s| {
                for r in 0..g.len() / len {
                    for c in 0..*len {
                        s[r * cols + start + c] += g[r * len + c];
                    }
                }
            }),
            Op::Reshape(input) => acc(*input, &|s| {
                for (v, gi) in s.iter_mut().zip(g) {
                    *v += gi;
                }
            }),
        }
    }
}

fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}
