use super::context::Context;
use crate::error::{Error, Result};
use crate::grad::{Tape, Var};

pub const DEFAULT_EPSILON: f64 = 1e-6;

/// Robust location and scale of one context, as tape scalars.
#[derive(Clone, Copy, Debug)]
pub struct NormStats {
    /// Median.
    pub t: Var,
    /// Median absolute deviation.
    pub s: Var,
    pub epsilon: f64,
}

/// Median and MAD of `depth` gathered at the context's pixels.
pub fn robust_stats(tape: &mut Tape, depth: Var, context: &Context, epsilon: f64) -> Result<NormStats> {
    let values = tape.gather(depth, &context.indices)?;
    stats_of(tape, values, epsilon)
}

/// Median and MAD of an already gathered vector.
pub fn stats_of(tape: &mut Tape, values: Var, epsilon: f64) -> Result<NormStats> {
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidArgument(format!("epsilon must be >= 0, got {epsilon}")));
    }
    let t = tape.median(values)?;
    let centered = tape.sub(values, t)?;
    let dev = tape.abs(centered);
    let s = tape.median(dev)?;
    Ok(NormStats { t, s, epsilon })
}

/// `(d - t) / (s + ε)`; `d` may be a scalar or a vector of context values.
pub fn normalize_phi(tape: &mut Tape, d: Var, stats: &NormStats) -> Result<Var> {
    let centered = tape.sub(d, stats.t)?;
    let denom = tape.affine(stats.s, 1.0, stats.epsilon);
    tape.div(centered, denom)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grad::Tensor;
    use crate::normalize::ContextKind;

    fn all(n: usize) -> Context {
        Context {
            kind: ContextKind::Global,
            indices: (0..n).collect(),
        }
    }

    fn stats_values(values: Vec<f64>) -> (f64, f64) {
        let mut tape = Tape::new();
        let n = values.len();
        let d = tape.constant(Tensor::from_vec(values));
        let s = robust_stats(&mut tape, d, &all(n), 0.0).unwrap();
        (tape.value(s.t).item(), tape.value(s.s).item())
    }

    #[test]
    fn stats_examples() {
        assert_eq!(stats_values(vec![1.0, 2.0, 3.0, 4.0, 5.0]), (3.0, 1.0));
        assert_eq!(stats_values(vec![4.0, 4.0, 4.0]), (4.0, 0.0));
        let affine: Vec<f64> = (1..=5).map(|v| 2.0 * v as f64 + 7.0).collect();
        assert_eq!(stats_values(affine), (13.0, 2.0));
    }

    #[test]
    fn phi_examples() {
        let mut tape = Tape::new();
        let t = tape.constant(Tensor::scalar(3.0));
        let s = tape.constant(Tensor::scalar(1.0));
        let stats = NormStats { t, s, epsilon: 0.0 };
        let d = tape.constant(Tensor::scalar(5.0));
        let phi = normalize_phi(&mut tape, d, &stats).unwrap();
        assert_eq!(tape.value(phi).item(), 2.0);
        let at_t = normalize_phi(&mut tape, t, &NormStats { t, s, epsilon: 1e-6 }).unwrap();
        assert_eq!(tape.value(at_t).item(), 0.0);

        let t2 = tape.constant(Tensor::scalar(13.0));
        let s2 = tape.constant(Tensor::scalar(2.0));
        let d2 = tape.constant(Tensor::scalar(17.0));
        let phi2 = normalize_phi(&mut tape, d2, &NormStats { t: t2, s: s2, epsilon: 0.0 }).unwrap();
        assert_eq!(tape.value(phi2).item(), 2.0);
    }

    #[test]
    fn degenerate_context_relies_on_epsilon() {
        let mut tape = Tape::new();
        let d = tape.constant(Tensor::from_vec(vec![4.0, 4.0, 4.0]));
        let stats = robust_stats(&mut tape, d, &all(3), 1e-6).unwrap();
        let phi = normalize_phi(&mut tape, d, &stats).unwrap();
        assert_eq!(tape.value(phi).data(), &[0.0, 0.0, 0.0]);
    }
}
