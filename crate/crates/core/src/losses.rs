//! Self-training, weak ordinal and adapter-regularization losses.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::grad::{Tape, Tensor, Var};
use crate::model::{Bound, LoraLinear};
use crate::normalize::{normalize_phi, stats_of, ContextHierarchy};

/// Ordinal relation between two pixels of a disparity map: `l = 1` asks for
/// `d[p_plus] > d[p_minus]` (p_plus nearer), `l = -1` the opposite, `l = 0`
/// for equal depth.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WeakLabel {
    pub p_plus: usize,
    pub p_minus: usize,
    pub l: i8,
}

impl WeakLabel {
    pub fn new(p_plus: usize, p_minus: usize, l: i8) -> Result<Self> {
        let label = Self { p_plus, p_minus, l };
        label.validate()?;
        Ok(label)
    }

    fn validate(&self) -> Result<()> {
        if !(-1..=1).contains(&self.l) {
            return Err(Error::InvalidArgument(format!("ordinal label must be -1, 0 or 1, got {}", self.l)));
        }
        if self.l != 0 && self.p_plus == self.p_minus {
            return Err(Error::InvalidArgument(format!(
                "ordered pair uses pixel {} twice",
                self.p_plus
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda_st: f64,
    pub lambda_w: f64,
    pub lambda_r: f64,
    pub margin_delta: f64,
    pub reg_alpha: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_st: 1.0,
            lambda_w: 0.001,
            lambda_r: 1.0,
            margin_delta: 0.05,
            reg_alpha: 16.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_st, self.lambda_w, self.lambda_r, self.margin_delta, self.reg_alpha];
        if all.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Config(format!("loss weights must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Mean over valid pixels of the context-averaged absolute difference between
/// the normalized teacher and student maps.
///
/// The teacher is always detached. Each context's statistics are computed
/// once; with `detach_student_stats` the student's median and MAD are treated
/// as constants.
pub fn self_training_loss(
    tape: &mut Tape,
    student: Var,
    teacher: Var,
    hierarchy: &ContextHierarchy,
    epsilon: f64,
    detach_student_stats: bool,
) -> Result<Var> {
    let dims = [hierarchy.height, hierarchy.width];
    for v in [student, teacher] {
        if tape.value(v).shape() != dims {
            return Err(Error::ShapeMismatch {
                op: "self_training_loss",
                lhs: tape.value(v).shape().to_vec(),
                rhs: dims.to_vec(),
            });
        }
    }
    let n_valid = hierarchy.valid_pixels();
    if n_valid == 0 {
        return Err(Error::EmptyInput {
            op: "self_training_loss",
        });
    }
    let teacher = tape.stop_gradient(teacher);
    let mut total: Option<Var> = None;
    for ctx in &hierarchy.contexts {
        let s_vals = tape.gather(student, &ctx.indices)?;
        let t_vals = tape.gather(teacher, &ctx.indices)?;
        let s_stats = if detach_student_stats {
            let detached = tape.stop_gradient(s_vals);
            stats_of(tape, detached, epsilon)?
        } else {
            stats_of(tape, s_vals, epsilon)?
        };
        let t_stats = stats_of(tape, t_vals, epsilon)?;
        let phi_s = normalize_phi(tape, s_vals, &s_stats)?;
        let phi_t = normalize_phi(tape, t_vals, &t_stats)?;
        let diff = tape.sub(phi_t, phi_s)?;
        let diff = tape.abs(diff);
        let weights: Vec<f64> = ctx
            .indices
            .iter()
            .map(|&p| 1.0 / hierarchy.per_pixel[p].len() as f64)
            .collect();
        let weights = tape.constant(Tensor::from_vec(weights));
        let weighted = tape.mul(diff, weights)?;
        let part = tape.sum(weighted)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }
    let total = total.expect("hierarchy has a global context");
    Ok(tape.scale(total, 1.0 / n_valid as f64))
}

/// `max(0, −l·Δd + δ)` for ordered pairs and `|Δd|` for equal pairs, with
/// `Δd = d_plus − d_minus`.
pub fn pairwise_rank_loss(tape: &mut Tape, d_plus: Var, d_minus: Var, l: i8, margin_delta: f64) -> Result<Var> {
    check_margin(margin_delta)?;
    let diff = tape.sub(d_plus, d_minus)?;
    match l {
        0 => Ok(tape.abs(diff)),
        1 | -1 => {
            let arg = tape.affine(diff, -f64::from(l), margin_delta);
            Ok(tape.hinge(arg))
        }
        other => Err(Error::InvalidArgument(format!("ordinal label must be -1, 0 or 1, got {other}"))),
    }
}

/// Mean of [`pairwise_rank_loss`] over `labels`; zero when there are none.
pub fn weak_loss(tape: &mut Tape, pred: Var, labels: &[WeakLabel], margin_delta: f64) -> Result<Var> {
    check_margin(margin_delta)?;
    if labels.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let len = tape.value(pred).numel();
    for label in labels {
        label.validate()?;
        for idx in [label.p_plus, label.p_minus] {
            if idx >= len {
                return Err(Error::IndexOutOfBounds {
                    op: "weak_loss",
                    index: idx,
                    len,
                });
            }
        }
    }
    let mut total: Option<Var> = None;
    for l in [-1i8, 0, 1] {
        let group: Vec<&WeakLabel> = labels.iter().filter(|w| w.l == l).collect();
        if group.is_empty() {
            continue;
        }
        let plus: Vec<usize> = group.iter().map(|w| w.p_plus).collect();
        let minus: Vec<usize> = group.iter().map(|w| w.p_minus).collect();
        let dp = tape.gather(pred, &plus)?;
        let dm = tape.gather(pred, &minus)?;
        let per_pair = pairwise_rank_loss(tape, dp, dm, l, margin_delta)?;
        let part = tape.sum(per_pair)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, part)?,
            None => part,
        });
    }
    let total = total.expect("non-empty labels");
    Ok(tape.scale(total, 1.0 / labels.len() as f64))
}

/// `Σ_k ‖(reg_alpha / r_k)·U_k·V_k‖²_F` over the given adapter layers.
pub fn lora_reg_loss(tape: &mut Tape, layers: &[&LoraLinear], bound: &Bound, reg_alpha: f64) -> Result<Var> {
    let mut total = tape.constant(Tensor::scalar(0.0));
    for layer in layers {
        let uv = tape.matmul(bound.var(layer.lora_u), bound.var(layer.lora_v))?;
        let delta = tape.scale(uv, reg_alpha / layer.rank as f64);
        let sq = tape.mul(delta, delta)?;
        let part = tape.sum(sq)?;
        total = tape.add(total, part)?;
    }
    Ok(total)
}

/// `λ_st·l_st + λ_w·l_weak + λ_r·l_reg`.
pub fn total_loss(tape: &mut Tape, l_st: Var, l_weak: Var, l_reg: Var, w: &LossWeights) -> Result<Var> {
    let a = tape.scale(l_st, w.lambda_st);
    let b = tape.scale(l_weak, w.lambda_w);
    let c = tape.scale(l_reg, w.lambda_r);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

fn check_margin(margin_delta: f64) -> Result<()> {
    if !(margin_delta.is_finite() && margin_delta >= 0.0) {
        return Err(Error::InvalidArgument(format!("margin must be >= 0, got {margin_delta}")));
    }
    Ok(())
}

/// Writes labels as a `WEAK1 H W` header followed by `p_plus p_minus l` lines.
pub fn write_weak_labels(w: &mut impl Write, height: usize, width: usize, labels: &[WeakLabel]) -> Result<()> {
    writeln!(w, "WEAK1 {height} {width}")?;
    for l in labels {
        writeln!(w, "{} {} {}", l.p_plus, l.p_minus, l.l)?;
    }
    Ok(())
}

/// Parses a `WEAK1` file, checking indices against the declared size.
pub fn read_weak_labels(r: &mut impl BufRead) -> Result<(usize, usize, Vec<WeakLabel>)> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Format("empty weak-label file".into()))??;
    let fields: Vec<&str> = header.split_whitespace().collect();
    let (h, w) = match fields.as_slice() {
        ["WEAK1", h, w] => (parse_field(h)?, parse_field(w)?),
        _ => return Err(Error::Format(format!("bad weak-label header `{header}`"))),
    };
    let mut labels = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let [a, b, l] = parts.as_slice() else {
            return Err(Error::Format(format!("line {}: expected 3 fields", n + 2)));
        };
        let l: i8 = l
            .parse()
            .map_err(|_| Error::Format(format!("line {}: bad label `{l}`", n + 2)))?;
        let label = WeakLabel::new(parse_field(a)?, parse_field(b)?, l)
            .map_err(|e| Error::Format(format!("line {}: {e}", n + 2)))?;
        if label.p_plus >= h * w || label.p_minus >= h * w {
            return Err(Error::Format(format!("line {}: pixel index outside {h}x{w}", n + 2)));
        }
        labels.push(label);
    }
    Ok((h, w, labels))
}

fn parse_field(s: &str) -> Result<usize> {
    s.parse().map_err(|_| Error::Format(format!("bad integer `{s}`")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ParamKind, ParamStore, TuneScope};
    use crate::normalize::{build_global_context, build_sa_hdn_contexts, Instance, InstanceMasks, Mask};

    fn map(tape: &mut Tape, v: Vec<f64>, rg: bool) -> Var {
        tape.leaf(Tensor::new(vec![2, 2], v).unwrap(), rg)
    }

    #[test]
    fn self_training_examples() {
        let hier = build_global_context(2, 2, &Mask::all_valid(2, 2)).unwrap();
        let mut tape = Tape::new();
        let t = map(&mut tape, vec![1.0, 2.0, 3.0, 4.0], false);
        let s = map(&mut tape, vec![1.0, 2.0, 3.0, 5.0], true);
        let loss = self_training_loss(&mut tape, s, t, &hier, 0.0, false).unwrap();
        assert_eq!(tape.value(loss).item(), 0.25);

        let same = self_training_loss(&mut tape, t, t, &hier, 1e-6, false).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
    }

    #[test]
    fn full_cover_matches_global() {
        let masks = InstanceMasks {
            height: 2,
            width: 2,
            instances: vec![Instance {
                id: 1,
                pixels: vec![0, 1, 2, 3],
            }],
        };
        let valid = Mask::all_valid(2, 2);
        let global = build_global_context(2, 2, &valid).unwrap();
        let full = build_sa_hdn_contexts(&masks, &valid, 1).unwrap();
        let mut tape = Tape::new();
        let t = map(&mut tape, vec![0.3, 1.2, 2.0, 0.1], false);
        let s = map(&mut tape, vec![0.5, 0.9, 2.5, 0.4], true);
        let a = self_training_loss(&mut tape, s, t, &global, 1e-6, false).unwrap();
        let b = self_training_loss(&mut tape, s, t, &full, 1e-6, false).unwrap();
        assert_eq!(tape.value(a).item(), tape.value(b).item());
    }

    #[test]
    fn teacher_never_receives_gradient() {
        let hier = build_global_context(2, 2, &Mask::all_valid(2, 2)).unwrap();
        for detach in [false, true] {
            let mut tape = Tape::new();
            let t = map(&mut tape, vec![1.0, 2.0, 3.0, 4.0], true);
            let s = map(&mut tape, vec![1.0, 2.5, 3.0, 5.0], true);
            let loss = self_training_loss(&mut tape, s, t, &hier, 1e-6, detach).unwrap();
            let g = tape.backward(loss).unwrap();
            assert!(g.get(t).unwrap().data().iter().all(|v| *v == 0.0));
            assert!(g.get(s).unwrap().max_abs() > 0.0);
        }
    }

    #[test]
    fn pairwise_truth_table() {
        let cases = [(0.5, 1, 0.1, 0.0), (0.0, 1, 0.1, 0.1), (0.3, 0, 0.1, 0.3), (-0.2, 1, 0.1, 0.3)];
        for (dd, l, delta, want) in cases {
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::scalar(1.0 + dd));
            let m = tape.constant(Tensor::scalar(1.0));
            let v = pairwise_rank_loss(&mut tape, p, m, l, delta).unwrap();
            assert!((tape.value(v).item() - want).abs() < 1e-12, "{dd} {l}");
        }
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::scalar(0.0));
        assert!(pairwise_rank_loss(&mut tape, p, p, 2, 0.1).is_err());
    }

    #[test]
    fn weak_loss_examples() {
        let mut tape = Tape::new();
        let pred = map(&mut tape, vec![1.5, 1.0, 1.3, 1.0], true);
        let empty = weak_loss(&mut tape, pred, &[], 0.1).unwrap();
        assert_eq!(tape.value(empty).item(), 0.0);

        // pair losses 0 (Δd = 0.5, l = 1) and 0.3 (equal pair, Δd = 0.3)
        let labels = [WeakLabel::new(0, 1, 1).unwrap(), WeakLabel::new(2, 3, 0).unwrap()];
        let v = weak_loss(&mut tape, pred, &labels, 0.1).unwrap();
        assert!((tape.value(v).item() - 0.15).abs() < 1e-12);

        let bad = [WeakLabel {
            p_plus: 9,
            p_minus: 0,
            l: 1,
        }];
        assert!(matches!(
            weak_loss(&mut tape, pred, &bad, 0.1),
            Err(Error::IndexOutOfBounds { .. })
        ));
    }

    #[test]
    fn satisfied_labels_give_zero_gradient() {
        let mut tape = Tape::new();
        let pred = map(&mut tape, vec![2.0, 1.0, 0.5, 3.0], true);
        let labels = [WeakLabel::new(0, 1, 1).unwrap(), WeakLabel::new(2, 3, -1).unwrap()];
        let v = weak_loss(&mut tape, pred, &labels, 0.05).unwrap();
        assert_eq!(tape.value(v).item(), 0.0);
        let g = tape.backward(v).unwrap();
        assert!(g.get(pred).unwrap().data().iter().all(|x| *x == 0.0));
    }

    fn scalar_lora(u: f64, v: f64) -> (ParamStore, LoraLinear) {
        let mut store = ParamStore::new();
        let layer = LoraLinear {
            base_weight: store.add("w", ParamKind::EncoderBase, Tensor::zeros(&[1, 1])),
            base_bias: store.add("b", ParamKind::EncoderBase, Tensor::zeros(&[1])),
            lora_u: store.add("u", ParamKind::Lora, Tensor::new(vec![1, 1], vec![u]).unwrap()),
            lora_v: store.add("v", ParamKind::Lora, Tensor::new(vec![1, 1], vec![v]).unwrap()),
            d_in: 1,
            d_out: 1,
            rank: 8,
            lora_alpha: 16.0,
        };
        (store, layer)
    }

    #[test]
    fn reg_examples() {
        let reg = |u: f64, v: f64| {
            let (store, layer) = scalar_lora(u, v);
            let mut tape = Tape::new();
            let bound = store.bind(&mut tape, TuneScope::Lora);
            let r = lora_reg_loss(&mut tape, &[&layer], &bound, 16.0).unwrap();
            tape.value(r).item()
        };
        assert_eq!(reg(2.0, 3.0), 144.0);
        assert_eq!(reg(2.0, 0.0), 0.0);
        assert_eq!(reg(6.0, 3.0), 9.0 * 144.0);
    }

    #[test]
    fn total_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(0.25));
        let b = tape.constant(Tensor::scalar(0.15));
        let c = tape.constant(Tensor::scalar(144.0));
        let w = LossWeights {
            lambda_st: 1.0,
            lambda_w: 0.001,
            lambda_r: 1.0,
            ..LossWeights::default()
        };
        let t = total_loss(&mut tape, a, b, c, &w).unwrap();
        let got = tape.value(t).item();
        assert!((got - 144.25015).abs() < 1e-12, "{got}");
        let zero = LossWeights {
            lambda_st: 0.0,
            lambda_w: 0.0,
            lambda_r: 0.0,
            ..w
        };
        let t = total_loss(&mut tape, a, b, c, &zero).unwrap();
        assert_eq!(tape.value(t).item(), 0.0);
    }

    #[test]
    fn weak_file_round_trip_and_errors() {
        let labels = vec![WeakLabel::new(0, 5, -1).unwrap(), WeakLabel::new(3, 3, 0).unwrap()];
        let mut buf = Vec::new();
        write_weak_labels(&mut buf, 2, 3, &labels).unwrap();
        assert!(buf.starts_with(b"WEAK1 2 3\n"));
        let (h, w, back) = read_weak_labels(&mut buf.as_slice()).unwrap();
        assert_eq!((h, w, back), (2, 3, labels));
        assert!(read_weak_labels(&mut b"WEAK1 2 2\n0 4 1\n".as_slice()).is_err());
        assert!(read_weak_labels(&mut b"WEAK1 2 2\n0 1 3\n".as_slice()).is_err());
        assert!(read_weak_labels(&mut b"WEAK2 2 2\n".as_slice()).is_err());
    }
}
