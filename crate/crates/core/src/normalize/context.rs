use crate::error::{Error, Result};
use crate::grad::{stable_order, Tensor};

/// Validity mask over an `H×W` map.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    pub data: Vec<bool>,
}

impl Mask {
    pub fn all_valid(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            data: vec![true; height * width],
        }
    }

    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "mask",
                lhs: vec![data.len()],
                rhs: vec![height, width],
            });
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Finite, strictly positive entries of a depth map.
    pub fn from_depth(depth: &Tensor) -> Result<Self> {
        let (h, w) = depth.dims2("mask_from_depth")?;
        let data = depth.data().iter().map(|d| d.is_finite() && *d > 0.0).collect();
        Self::new(h, w, data)
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.data.len()).filter(|&i| self.data[i]).collect()
    }
}

/// One instance: id (> 0) and its flat pixel indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub id: u16,
    pub pixels: Vec<usize>,
}

/// Instance masks for one image. Masks are expected to be disjoint.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceMasks {
    pub height: usize,
    pub width: usize,
    pub instances: Vec<Instance>,
}

impl InstanceMasks {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            instances: Vec::new(),
        }
    }

    /// From a label map where 0 is background and `k > 0` is instance `k`.
    pub fn from_label_map(height: usize, width: usize, labels: &[u16]) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch {
                op: "label_map",
                lhs: vec![labels.len()],
                rhs: vec![height, width],
            });
        }
        let mut ids: Vec<u16> = labels.iter().copied().filter(|&l| l > 0).collect();
        ids.sort_unstable();
        ids.dedup();
        let instances = ids
            .into_iter()
            .map(|id| Instance {
                id,
                pixels: (0..labels.len()).filter(|&i| labels[i] == id).collect(),
            })
            .collect();
        Ok(Self {
            height,
            width,
            instances,
        })
    }

    /// Label map; fails on overlapping masks.
    pub fn to_label_map(&self) -> Result<Vec<u16>> {
        let mut labels = vec![0u16; self.height * self.width];
        for inst in &self.instances {
            for &p in &inst.pixels {
                let slot = labels.get_mut(p).ok_or(Error::IndexOutOfBounds {
                    op: "instance_mask",
                    index: p,
                    len: self.height * self.width,
                })?;
                if *slot != 0 {
                    return Err(Error::OverlappingMasks {
                        a: *slot,
                        b: inst.id,
                        pixel: p,
                    });
                }
                *slot = inst.id;
            }
        }
        Ok(labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ContextKind {
    Global,
    Grid,
    Bin,
    Instance,
}

/// A set of pixels sharing normalization statistics. Indices are sorted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Context {
    pub kind: ContextKind,
    pub indices: Vec<usize>,
}

/// Contexts for every pixel of an `H×W` map.
///
/// `per_pixel[p]` lists indices into `contexts`; the first entry is always the
/// global context. Invalid pixels have an empty list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContextHierarchy {
    pub height: usize,
    pub width: usize,
    pub contexts: Vec<Context>,
    pub per_pixel: Vec<Vec<usize>>,
}

impl ContextHierarchy {
    fn with_global(valid: &Mask, op: &'static str) -> Result<Self> {
        let indices = valid.indices();
        if indices.is_empty() {
            return Err(Error::EmptyInput { op });
        }
        let mut per_pixel = vec![Vec::new(); valid.data.len()];
        for &i in &indices {
            per_pixel[i].push(0);
        }
        Ok(Self {
            height: valid.height,
            width: valid.width,
            contexts: vec![Context {
                kind: ContextKind::Global,
                indices,
            }],
            per_pixel,
        })
    }

    fn push(&mut self, context: Context) {
        let id = self.contexts.len();
        for &i in &context.indices {
            self.per_pixel[i].push(id);
        }
        self.contexts.push(context);
    }

    /// Number of pixels with at least one context.
    pub fn valid_pixels(&self) -> usize {
        self.per_pixel.iter().filter(|c| !c.is_empty()).count()
    }
}

/// Which flavour of hierarchical contexts the HDN baseline uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HdnScheme {
    /// Equal-quantile depth bins.
    Bins,
    /// `n×n` spatial grid cells.
    Grid,
}

pub const DEFAULT_HDN_LEVELS: [usize; 3] = [1, 2, 4];

pub fn build_global_context(height: usize, width: usize, valid: &Mask) -> Result<ContextHierarchy> {
    check_mask(height, width, valid)?;
    ContextHierarchy::with_global(valid, "build_global_context")
}

/// Depth-quantile hierarchy: at level `n` the valid pixels, ordered by depth
/// (ties by index), are cut into `n` groups of near-equal size.
pub fn build_hdn_contexts(
    depth: &Tensor,
    valid: &Mask,
    levels: &[usize],
) -> Result<ContextHierarchy> {
    build_hdn_contexts_with(depth, valid, levels, HdnScheme::Bins)
}

pub fn build_hdn_contexts_with(
    depth: &Tensor,
    valid: &Mask,
    levels: &[usize],
    scheme: HdnScheme,
) -> Result<ContextHierarchy> {
    let (h, w) = depth.dims2("build_hdn_contexts")?;
    if depth.numel() == 0 {
        return Err(Error::EmptyInput {
            op: "build_hdn_contexts",
        });
    }
    check_mask(h, w, valid)?;
    if levels.first() != Some(&1) || levels.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "HDN levels must start with 1 and be positive, got {levels:?}"
        )));
    }
    let mut hier = ContextHierarchy::with_global(valid, "build_hdn_contexts")?;
    let pixels = hier.contexts[0].indices.clone();
    let order: Vec<usize> = {
        let vals: Vec<f64> = pixels.iter().map(|&i| depth.data()[i]).collect();
        stable_order(&vals).into_iter().map(|k| pixels[k]).collect()
    };
    for &n in &levels[1..] {
        let mut groups = vec![Vec::new(); n * if scheme == HdnScheme::Grid { n } else { 1 }];
        match scheme {
            HdnScheme::Bins => {
                for (rank, &p) in order.iter().enumerate() {
                    groups[rank * n / order.len()].push(p);
                }
            }
            HdnScheme::Grid => {
                for &p in &pixels {
                    let (y, x) = (p / w, p % w);
                    groups[(y * n / h) * n + x * n / w].push(p);
                }
            }
        }
        let kind = match scheme {
            HdnScheme::Bins => ContextKind::Bin,
            HdnScheme::Grid => ContextKind::Grid,
        };
        for mut indices in groups.into_iter().filter(|g| !g.is_empty()) {
            indices.sort_unstable();
            hier.push(Context { kind, indices });
        }
    }
    Ok(hier)
}

/// Global context plus one context per sufficiently large instance.
pub fn build_sa_hdn_contexts(
    masks: &InstanceMasks,
    valid: &Mask,
    min_size: usize,
) -> Result<ContextHierarchy> {
    check_mask(masks.height, masks.width, valid)?;
    masks.to_label_map()?;
    let mut hier = ContextHierarchy::with_global(valid, "build_sa_hdn_contexts")?;
    for inst in &masks.instances {
        let mut indices: Vec<usize> = inst.pixels.iter().copied().filter(|&p| valid.data[p]).collect();
        if indices.is_empty() || indices.len() < min_size {
            continue;
        }
        indices.sort_unstable();
        hier.push(Context {
            kind: ContextKind::Instance,
            indices,
        });
    }
    Ok(hier)
}

fn check_mask(height: usize, width: usize, valid: &Mask) -> Result<()> {
    if (valid.height, valid.width) != (height, width) || valid.data.len() != height * width {
        return Err(Error::ShapeMismatch {
            op: "context",
            lhs: vec![valid.height, valid.width],
            rhs: vec![height, width],
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn global_examples() {
        let h = build_global_context(2, 2, &Mask::all_valid(2, 2)).unwrap();
        assert_eq!(h.contexts.len(), 1);
        assert_eq!(h.contexts[0].indices, vec![0, 1, 2, 3]);
        assert!(h.per_pixel.iter().all(|c| c == &vec![0]));

        let m = Mask::new(2, 2, vec![true, false, true, true]).unwrap();
        let h2 = build_global_context(2, 2, &m).unwrap();
        assert_eq!(h2.contexts[0].indices.len(), 3);
        assert!(h2.per_pixel[1].is_empty());
        assert_eq!(h2, build_global_context(2, 2, &m).unwrap());

        let none = Mask::new(1, 2, vec![false, false]).unwrap();
        assert!(matches!(
            build_global_context(1, 2, &none),
            Err(Error::EmptyInput { .. })
        ));
    }

    #[test]
    fn hdn_examples() {
        let d = Tensor::new(vec![2, 2], vec![3.0, 1.0, 4.0, 2.0]).unwrap();
        let valid = Mask::all_valid(2, 2);
        assert_eq!(
            build_hdn_contexts(&d, &valid, &[1]).unwrap(),
            build_global_context(2, 2, &valid).unwrap()
        );
        let h = build_hdn_contexts(&d, &valid, &[1, 2]).unwrap();
        // depths 1,2 live at pixels 1,3; depths 3,4 at pixels 0,2
        assert_eq!(h.contexts[1].indices, vec![1, 3]);
        assert_eq!(h.contexts[2].indices, vec![0, 2]);
        assert!(h.per_pixel.iter().all(|c| c.len() == 2 && c[0] == 0));
        assert!(build_hdn_contexts(&d, &valid, &[2, 4]).is_err());
    }

    #[test]
    fn hdn_levels_partition_valid_pixels() {
        let d = Tensor::new(vec![4, 5], (0..20).map(|i| ((i * 7) % 11) as f64).collect()).unwrap();
        let mut valid = Mask::all_valid(4, 5);
        valid.data[3] = false;
        for scheme in [HdnScheme::Bins, HdnScheme::Grid] {
            let h = build_hdn_contexts_with(&d, &valid, &DEFAULT_HDN_LEVELS, scheme).unwrap();
            for (p, ctxs) in h.per_pixel.iter().enumerate() {
                assert_eq!(ctxs.len(), if p == 3 { 0 } else { 3 });
            }
        }
    }

    #[test]
    fn sa_hdn_examples() {
        let valid = Mask::all_valid(8, 8);
        let full = InstanceMasks {
            height: 8,
            width: 8,
            instances: vec![Instance {
                id: 1,
                pixels: (0..64).collect(),
            }],
        };
        let h = build_sa_hdn_contexts(&full, &valid, 16).unwrap();
        assert_eq!(h.contexts[0].indices, h.contexts[1].indices);
        assert!(h.per_pixel.iter().all(|c| c == &vec![0, 1]));

        let none = build_sa_hdn_contexts(&InstanceMasks::empty(8, 8), &valid, 16).unwrap();
        assert_eq!(none, build_global_context(8, 8, &valid).unwrap());

        let small = InstanceMasks {
            height: 8,
            width: 8,
            instances: vec![
                Instance {
                    id: 1,
                    pixels: (0..10).collect(),
                },
                Instance {
                    id: 2,
                    pixels: (20..30).collect(),
                },
            ],
        };
        assert_eq!(build_sa_hdn_contexts(&small, &valid, 16).unwrap(), none);
    }

    #[test]
    fn overlapping_masks_name_both_ids() {
        let masks = InstanceMasks {
            height: 2,
            width: 2,
            instances: vec![
                Instance {
                    id: 3,
                    pixels: vec![0, 1],
                },
                Instance {
                    id: 7,
                    pixels: vec![1, 2],
                },
            ],
        };
        let err = build_sa_hdn_contexts(&masks, &Mask::all_valid(2, 2), 1).unwrap_err();
        assert!(matches!(
            err,
            Error::OverlappingMasks {
                a: 3,
                b: 7,
                pixel: 1
            }
        ));
    }

    #[test]
    fn label_map_round_trip() {
        let labels = vec![0, 2, 2, 0, 5, 5];
        let m = InstanceMasks::from_label_map(2, 3, &labels).unwrap();
        assert_eq!(m.instances.len(), 2);
        assert_eq!(m.to_label_map().unwrap(), labels);
    }
}
