//! Procedural scenes, corruptions, paired augmentations and ordinal-pair
//! sampling.

mod augment;
mod corrupt;
mod dump;
mod pairs;
mod scene;

pub use augment::{augment, AugmentSpec, GeomMap, Geometry, Rect, Strength};
pub use corrupt::{
    adjust_contrast, blur_length, brightness_shift, contrast_gain, corrupt, fog_weight, noise_sigma,
    pixelate_block, CorruptionKind, CorruptionSpec,
};
pub use dump::{read_scene_dir, write_scene_dir, DEPTH_FILE, MASKS_FILE, RGB_FILE, WEAK_FILE};
pub use pairs::{label_consistent, sample_ordinal_pairs, PairSampling, DEFAULT_EQUAL_RATIO};
pub use scene::{generate_scene, Scene};
