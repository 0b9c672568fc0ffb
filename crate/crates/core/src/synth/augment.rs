use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::losses::WeakLabel;
use crate::normalize::{Instance, InstanceMasks, Mask};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Rect {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

impl Rect {
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            top: 0,
            left: 0,
            height,
            width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Strength {
    Weak,
    Strong,
}

/// Crop then optional horizontal flip; shared by both views of a sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub crop: Rect,
    pub hflip: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AugmentSpec {
    pub geometry: Geometry,
    pub strength: Strength,
    pub seed: u64,
}

/// Pixel correspondence between a source frame and an augmented view.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GeomMap {
    pub src_height: usize,
    pub src_width: usize,
    pub geometry: Geometry,
}

impl GeomMap {
    pub fn view_dims(&self) -> (usize, usize) {
        (self.geometry.crop.height, self.geometry.crop.width)
    }

    /// Source flat index of a view pixel.
    pub fn to_source(&self, view_index: usize) -> usize {
        let Rect {
            top,
            left,
            width,
            ..
        } = self.geometry.crop;
        let (r, mut c) = (view_index / width, view_index % width);
        if self.geometry.hflip {
            c = width - 1 - c;
        }
        (top + r) * self.src_width + left + c
    }

    /// View flat index of a source pixel, if it survives the crop.
    pub fn to_view(&self, source_index: usize) -> Option<usize> {
        let Rect {
            top,
            left,
            height,
            width,
        } = self.geometry.crop;
        let (r, c) = (source_index / self.src_width, source_index % self.src_width);
        if r < top || r >= top + height || c < left || c >= left + width {
            return None;
        }
        let mut vc = c - left;
        if self.geometry.hflip {
            vc = width - 1 - vc;
        }
        Some((r - top) * width + vc)
    }

    /// Resamples a `[H×W×C]` or `[H×W]` source tensor into the view frame.
    pub fn apply(&self, src: &Tensor) -> Result<Tensor> {
        let (h, w) = (src.shape().first().copied(), src.shape().get(1).copied());
        if (h, w) != (Some(self.src_height), Some(self.src_width)) {
            return Err(Error::ShapeMismatch {
                op: "geom_map",
                lhs: src.shape().to_vec(),
                rhs: vec![self.src_height, self.src_width],
            });
        }
        let ch: usize = src.shape()[2..].iter().product();
        let (vh, vw) = self.view_dims();
        let mut out = Vec::with_capacity(vh * vw * ch);
        for v in 0..vh * vw {
            let s = self.to_source(v);
            out.extend_from_slice(&src.data()[s * ch..(s + 1) * ch]);
        }
        let mut shape = vec![vh, vw];
        shape.extend_from_slice(&src.shape()[2..]);
        Tensor::new(shape, out)
    }

    /// Validity mask in the view frame.
    pub fn map_mask(&self, mask: &Mask) -> Mask {
        let (vh, vw) = self.view_dims();
        let data = (0..vh * vw).map(|v| mask.data[self.to_source(v)]).collect();
        Mask {
            height: vh,
            width: vw,
            data,
        }
    }

    /// Instance masks in the view frame; pixels outside the crop are dropped.
    pub fn map_instances(&self, masks: &InstanceMasks) -> InstanceMasks {
        let (vh, vw) = self.view_dims();
        let instances = masks
            .instances
            .iter()
            .map(|inst| {
                let mut pixels: Vec<usize> = inst.pixels.iter().filter_map(|&p| self.to_view(p)).collect();
                pixels.sort_unstable();
                Instance { id: inst.id, pixels }
            })
            .filter(|inst| !inst.pixels.is_empty())
            .collect();
        InstanceMasks {
            height: vh,
            width: vw,
            instances,
        }
    }

    /// Source-frame labels expressed in the view frame; pairs touching a
    /// cropped-out pixel are dropped.
    pub fn map_labels(&self, labels: &[WeakLabel]) -> Vec<WeakLabel> {
        labels
            .iter()
            .filter_map(|l| {
                Some(WeakLabel {
                    p_plus: self.to_view(l.p_plus)?,
                    p_minus: self.to_view(l.p_minus)?,
                    l: l.l,
                })
            })
            .collect()
    }
}

/// Geometric transform first, then photometric jitter.
///
/// Weak: brightness and contrast jitter of ±5%. Strong: ±20% jitter, additive
/// noise with σ = 0.05 and a channel shuffle with probability 0.2.
pub fn augment(rgb: &Tensor, spec: &AugmentSpec) -> Result<(Tensor, GeomMap)> {
    let (h, w) = match rgb.shape() {
        [h, w, 3] => (*h, *w),
        other => {
            return Err(Error::ShapeMismatch {
                op: "augment",
                lhs: other.to_vec(),
                rhs: vec![0, 0, 3],
            })
        }
    };
    let crop = spec.geometry.crop;
    if crop.height == 0 || crop.width == 0 || crop.top + crop.height > h || crop.left + crop.width > w {
        return Err(Error::InvalidArgument(format!("crop {crop:?} outside {h}x{w}")));
    }
    let map = GeomMap {
        src_height: h,
        src_width: w,
        geometry: spec.geometry,
    };
    let view = map.apply(rgb)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let amount = match spec.strength {
        Strength::Weak => 0.05,
        Strength::Strong => 0.2,
    };
    let brightness: f64 = rng.random_range(-amount..=amount);
    let contrast: f64 = 1.0 + rng.random_range(-amount..=amount);
    let mean = view.data().iter().sum::<f64>() / view.numel() as f64;
    let mut data: Vec<f64> = view
        .data()
        .iter()
        .map(|v| (v - mean) * contrast + mean + brightness)
        .collect();
    if spec.strength == Strength::Strong {
        let noise = Normal::new(0.0, 0.05).expect("finite sigma");
        for v in &mut data {
            *v += noise.sample(&mut rng);
        }
        if rng.random_bool(0.2) {
            let mut perm = [0usize, 1, 2];
            perm.shuffle(&mut rng);
            for px in data.chunks_exact_mut(3) {
                let orig = [px[0], px[1], px[2]];
                for (dst, &src) in px.iter_mut().zip(&perm) {
                    *dst = orig[src];
                }
            }
        }
    }
    for v in &mut data {
        *v = v.clamp(0.0, 1.0);
    }
    Ok((Tensor::new(view.shape().to_vec(), data)?, map))
}
