use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::losses::WeakLabel;
use crate::normalize::Mask;

pub const DEFAULT_EQUAL_RATIO: f64 = 1.02;
const ANCHOR_RETRIES: usize = 20;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PairSampling {
    /// Anchors per image; each yields two labels.
    pub k_iters: usize,
    /// Depths within a factor of this ratio count as equal.
    pub equal_ratio: f64,
    /// Emit `l = 0` pairs from the equality band when an anchor has no
    /// strictly farther or nearer partner.
    pub allow_equal: bool,
}

impl Default for PairSampling {
    fn default() -> Self {
        Self {
            k_iters: 5,
            equal_ratio: DEFAULT_EQUAL_RATIO,
            allow_equal: false,
        }
    }
}

/// Structured pair sampling around random anchors.
///
/// For an anchor `p` a farther pixel `p⁺` (depth > d_p·ratio) and a nearer
/// pixel `p⁻` (depth < d_p/ratio) are drawn, giving the labels `(p⁺, p)` and
/// `(p, p⁻)`. Labels use the disparity convention: the first pixel of both
/// pairs is the farther one, so both carry `l = -1`.
pub fn sample_ordinal_pairs(depth: &Tensor, valid: &Mask, cfg: &PairSampling, seed: u64) -> Result<Vec<WeakLabel>> {
    if cfg.k_iters == 0 || !(cfg.equal_ratio >= 1.0) {
        return Err(Error::InvalidArgument(format!("bad pair sampling config {cfg:?}")));
    }
    if valid.data.len() != depth.numel() {
        return Err(Error::ShapeMismatch {
            op: "sample_ordinal_pairs",
            lhs: depth.shape().to_vec(),
            rhs: vec![valid.height, valid.width],
        });
    }
    let d = depth.data();
    let pixels: Vec<usize> = valid.indices().into_iter().filter(|&i| d[i].is_finite() && d[i] > 0.0).collect();
    if pixels.is_empty() {
        return Err(Error::EmptyInput {
            op: "sample_ordinal_pairs",
        });
    }
    let ratio = cfg.equal_ratio;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut labels = Vec::with_capacity(2 * cfg.k_iters);
    for _ in 0..cfg.k_iters {
        let mut emitted = false;
        for _ in 0..ANCHOR_RETRIES {
            let p = *pixels.choose(&mut rng).expect("non-empty");
            let dp = d[p];
            let farther: Vec<usize> = pixels.iter().copied().filter(|&q| d[q] > dp * ratio).collect();
            let nearer: Vec<usize> = pixels.iter().copied().filter(|&q| d[q] < dp / ratio).collect();
            let band: Vec<usize> = if cfg.allow_equal && (farther.is_empty() || nearer.is_empty()) {
                pixels
                    .iter()
                    .copied()
                    .filter(|&q| q != p && d[q] <= dp * ratio && d[q] >= dp / ratio)
                    .collect()
            } else {
                Vec::new()
            };
            let first = match farther.choose(&mut rng) {
                Some(&q) => WeakLabel { p_plus: q, p_minus: p, l: -1 },
                None => match band.choose(&mut rng) {
                    Some(&q) => WeakLabel { p_plus: q, p_minus: p, l: 0 },
                    None => continue,
                },
            };
            let second = match nearer.choose(&mut rng) {
                Some(&q) => WeakLabel { p_plus: p, p_minus: q, l: -1 },
                None => match band.choose(&mut rng) {
                    Some(&q) => WeakLabel { p_plus: p, p_minus: q, l: 0 },
                    None => continue,
                },
            };
            labels.push(first);
            labels.push(second);
            emitted = true;
            break;
        }
        if !emitted {
            return Err(Error::InvalidArgument(format!(
                "no anchor with both farther and nearer partners after {ANCHOR_RETRIES} tries"
            )));
        }
    }
    Ok(labels)
}

/// Whether `label` agrees with ground-truth `depth` under `equal_ratio`.
pub fn label_consistent(depth: &Tensor, label: &WeakLabel, equal_ratio: f64) -> bool {
    let (a, b) = (depth.data()[label.p_plus], depth.data()[label.p_minus]);
    match label.l {
        // disparity convention: l = 1 means p_plus is nearer
        1 => a * equal_ratio < b,
        -1 => a > b * equal_ratio,
        0 => a <= b * equal_ratio && a >= b / equal_ratio,
        _ => false,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(n: usize) -> Tensor {
        Tensor::new(vec![n, n], (0..n * n).map(|i| 1.0 + 0.1 * i as f64).collect()).unwrap()
    }

    #[test]
    fn five_iterations_give_ten_consistent_labels() {
        let d = ramp(8);
        let valid = Mask::all_valid(8, 8);
        for seed in 0..20 {
            let labels = sample_ordinal_pairs(&d, &valid, &PairSampling::default(), seed).unwrap();
            assert_eq!(labels.len(), 10);
            for chain in labels.chunks(2) {
                assert_eq!(chain[0].p_minus, chain[1].p_plus);
                let (far, mid, near) = (chain[0].p_plus, chain[0].p_minus, chain[1].p_minus);
                assert!(d.data()[far] > d.data()[mid] && d.data()[mid] > d.data()[near]);
            }
            assert!(labels.iter().all(|l| label_consistent(&d, l, DEFAULT_EQUAL_RATIO)));
        }
    }

    #[test]
    fn two_level_band_yields_equal_labels() {
        let d = Tensor::new(vec![2, 2], vec![1.0, 1.01, 1.0, 1.01]).unwrap();
        let valid = Mask::all_valid(2, 2);
        let cfg = PairSampling {
            k_iters: 3,
            equal_ratio: 1.02,
            allow_equal: true,
        };
        let labels = sample_ordinal_pairs(&d, &valid, &cfg, 4).unwrap();
        assert_eq!(labels.len(), 6);
        assert!(labels.iter().all(|l| l.l == 0 && label_consistent(&d, l, 1.02)));

        let strict = PairSampling {
            allow_equal: false,
            ..cfg
        };
        assert!(sample_ordinal_pairs(&d, &valid, &strict, 4).is_err());
    }

    #[test]
    fn deterministic_per_seed() {
        let d = ramp(6);
        let valid = Mask::all_valid(6, 6);
        let cfg = PairSampling::default();
        assert_eq!(
            sample_ordinal_pairs(&d, &valid, &cfg, 9).unwrap(),
            sample_ordinal_pairs(&d, &valid, &cfg, 9).unwrap()
        );
    }
}
