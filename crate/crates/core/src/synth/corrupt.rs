use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grad::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CorruptionKind {
    GaussianNoise,
    MotionBlur,
    Brightness,
    Contrast,
    Fog,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 6] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::MotionBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Fog,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Fog => "fog",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown corruption `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        if !(1..=5).contains(&severity) {
            return Err(Error::InvalidArgument(format!("severity must be 1..=5, got {severity}")));
        }
        Ok(Self { kind, severity })
    }
}

pub fn noise_sigma(severity: u8) -> f64 {
    0.04 * f64::from(severity)
}

pub fn blur_length(severity: u8) -> usize {
    2 * usize::from(severity) + 1
}

pub fn brightness_shift(severity: u8) -> f64 {
    0.08 * f64::from(severity)
}

pub fn contrast_gain(severity: u8) -> f64 {
    (1.0 - 0.15 * f64::from(severity)).max(0.25)
}

pub fn fog_weight(severity: u8) -> f64 {
    0.12 * f64::from(severity)
}

pub fn pixelate_block(severity: u8) -> usize {
    1 << severity.div_ceil(2)
}

/// Applies `spec` to `rgb[H×W×3]`. Fog needs the depth map to scale its
/// density; the other kinds ignore it.
pub fn corrupt(rgb: &Tensor, depth: Option<&Tensor>, spec: CorruptionSpec, seed: u64) -> Result<Tensor> {
    let (h, w) = dims3(rgb)?;
    CorruptionSpec::new(spec.kind, spec.severity)?;
    let s = spec.severity;
    let out = match spec.kind {
        CorruptionKind::GaussianNoise => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dist = Normal::new(0.0, noise_sigma(s)).expect("finite sigma");
            let data = rgb.data().iter().map(|v| v + dist.sample(&mut rng)).collect();
            Tensor::new(rgb.shape().to_vec(), data)?
        }
        CorruptionKind::MotionBlur => motion_blur(rgb, h, w, blur_length(s)),
        CorruptionKind::Brightness => rgb.map(|v| v + brightness_shift(s)),
        CorruptionKind::Contrast => adjust_contrast(rgb, contrast_gain(s)),
        CorruptionKind::Fog => {
            let depth = depth.ok_or_else(|| Error::InvalidArgument("fog needs a depth map".into()))?;
            if depth.shape() != [h, w] {
                return Err(Error::ShapeMismatch {
                    op: "fog",
                    lhs: depth.shape().to_vec(),
                    rhs: vec![h, w],
                });
            }
            fog(rgb, depth, fog_weight(s))
        }
        CorruptionKind::Pixelate => pixelate(rgb, h, w, pixelate_block(s)),
    };
    Ok(out.map(|v| v.clamp(0.0, 1.0)))
}

fn dims3(rgb: &Tensor) -> Result<(usize, usize)> {
    match rgb.shape() {
        [h, w, 3] => Ok((*h, *w)),
        other => Err(Error::ShapeMismatch {
            op: "corrupt",
            lhs: other.to_vec(),
            rhs: vec![0, 0, 3],
        }),
    }
}

/// `(x − mean)·gain + mean` with the mean taken over the whole image.
pub fn adjust_contrast(rgb: &Tensor, gain: f64) -> Tensor {
    let mean = rgb.data().iter().sum::<f64>() / rgb.numel().max(1) as f64;
    rgb.map(|v| (v - mean) * gain + mean)
}

/// Horizontal box blur with edge clamping.
fn motion_blur(rgb: &Tensor, h: usize, w: usize, len: usize) -> Tensor {
    let half = (len / 2) as isize;
    let src = rgb.data();
    let mut out = vec![0.0; src.len()];
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for k in -half..=half {
                    let cc = (c as isize + k).clamp(0, w as isize - 1) as usize;
                    acc += src[(r * w + cc) * 3 + ch];
                }
                out[(r * w + c) * 3 + ch] = acc / len as f64;
            }
        }
    }
    Tensor::new(rgb.shape().to_vec(), out).expect("same shape")
}

/// Blend toward white with weight `strength · normalized depth`.
fn fog(rgb: &Tensor, depth: &Tensor, strength: f64) -> Tensor {
    let d = depth.data();
    let (lo, hi) = d
        .iter()
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(*v), b.max(*v)));
    let span = (hi - lo).max(1e-12);
    let mut out = rgb.data().to_vec();
    for (i, px) in out.chunks_exact_mut(3).enumerate() {
        let nd = if d[i].is_finite() { (d[i] - lo) / span } else { 1.0 };
        let wgt = strength * nd;
        for v in px {
            *v = *v * (1.0 - wgt) + wgt;
        }
    }
    Tensor::new(rgb.shape().to_vec(), out).expect("same shape")
}

/// Replaces each `block×block` tile (clipped at the border) by its mean.
fn pixelate(rgb: &Tensor, h: usize, w: usize, block: usize) -> Tensor {
    let src = rgb.data();
    let mut out = vec![0.0; src.len()];
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
            let count = ((ey - by) * (ex - bx)) as f64;
            for ch in 0..3 {
                let mut acc = 0.0;
                for r in by..ey {
                    for c in bx..ex {
                        acc += src[(r * w + c) * 3 + ch];
                    }
                }
                for r in by..ey {
                    for c in bx..ex {
                        out[(r * w + c) * 3 + ch] = acc / count;
                    }
                }
            }
        }
    }
    Tensor::new(rgb.shape().to_vec(), out).expect("same shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn gray(v: f64) -> Tensor {
        Tensor::full(&[8, 8, 3], v)
    }

    fn mean(t: &Tensor) -> f64 {
        t.data().iter().sum::<f64>() / t.numel() as f64
    }

    #[test]
    fn severity_tables() {
        assert_eq!(pixelate_block(1), 2);
        assert_eq!(pixelate_block(2), 2);
        assert_eq!(pixelate_block(3), 4);
        assert_eq!(pixelate_block(5), 8);
        assert_eq!(blur_length(5), 11);
        assert_eq!(contrast_gain(5), 0.25);
        assert!((contrast_gain(2) - 0.7).abs() < 1e-12);
        assert!(CorruptionSpec::new(CorruptionKind::Fog, 0).is_err());
        assert!(CorruptionSpec::new(CorruptionKind::Fog, 6).is_err());
        assert!(CorruptionKind::parse("snow").is_err());
        for k in CorruptionKind::ALL {
            assert_eq!(CorruptionKind::parse(k.name()).unwrap(), k);
        }
    }

    #[test]
    fn brightness_shifts_mean() {
        for s in 1..=5u8 {
            let spec = CorruptionSpec::new(CorruptionKind::Brightness, s).unwrap();
            let out = corrupt(&gray(0.3), None, spec, 0).unwrap();
            let want = (0.3 + 0.08 * f64::from(s)).min(1.0);
            assert!((mean(&out) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn unit_gain_contrast_is_identity() {
        let img = Tensor::new(vec![1, 2, 3], vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6]).unwrap();
        let out = adjust_contrast(&img, 1.0);
        assert!(out.max_abs_diff(&img) < 1e-15);
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let depth = Tensor::new(vec![8, 8], (0..64).map(|i| 1.0 + i as f64).collect()).unwrap();
        let img = Tensor::new(vec![8, 8, 3], (0..192).map(|i| (i % 7) as f64 / 6.0).collect()).unwrap();
        for kind in CorruptionKind::ALL {
            let out = corrupt(&img, Some(&depth), CorruptionSpec::new(kind, 5).unwrap(), 3).unwrap();
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)), "{kind:?}");
        }
        let spec = CorruptionSpec::new(CorruptionKind::Fog, 3).unwrap();
        assert!(corrupt(&img, None, spec, 0).is_err());
    }

    #[test]
    fn pixelate_and_blur_preserve_constant_images() {
        let img = gray(0.42);
        for kind in [CorruptionKind::Pixelate, CorruptionKind::MotionBlur] {
            let out = corrupt(&img, None, CorruptionSpec::new(kind, 5).unwrap(), 0).unwrap();
            assert!(out.max_abs_diff(&img) < 1e-12);
        }
    }

    #[test]
    fn fog_whitens_far_pixels_more() {
        let depth = Tensor::new(vec![1, 2], vec![1.0, 5.0]).unwrap();
        let img = Tensor::full(&[1, 2, 3], 0.2);
        let out = corrupt(&img, Some(&depth), CorruptionSpec::new(CorruptionKind::Fog, 5).unwrap(), 0).unwrap();
        assert_eq!(out.data()[0], 0.2);
        assert!((out.data()[3] - (0.2 * 0.4 + 0.6)).abs() < 1e-12);
    }
}
