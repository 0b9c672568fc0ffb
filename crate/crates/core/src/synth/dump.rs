use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use super::scene::Scene;
use crate::error::{Error, Result};
use crate::imageio::{read_pfm, read_pgm, read_ppm, write_pfm, write_pgm16, write_ppm};
use crate::losses::{read_weak_labels, write_weak_labels, WeakLabel};
use crate::normalize::{InstanceMasks, Mask};

pub const RGB_FILE: &str = "rgb.ppm";
pub const DEPTH_FILE: &str = "depth.pfm";
pub const MASKS_FILE: &str = "masks.pgm";
pub const WEAK_FILE: &str = "weak.txt";

/// Writes one scene directory with the fixed file names above.
pub fn write_scene_dir(dir: &Path, scene: &Scene, labels: &[WeakLabel]) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let (h, w) = (scene.height(), scene.width());
    let write = |name: &str, f: &dyn Fn(&mut BufWriter<File>) -> Result<()>| -> Result<()> {
        let mut out = BufWriter::new(File::create(dir.join(name))?);
        f(&mut out)?;
        out.flush()?;
        Ok(())
    };
    write(RGB_FILE, &|o| write_ppm(o, &scene.rgb))?;
    write(DEPTH_FILE, &|o| write_pfm(o, &scene.depth))?;
    write(MASKS_FILE, &|o| write_pgm16(o, h, w, &scene.masks.to_label_map()?))?;
    write(WEAK_FILE, &|o| write_weak_labels(o, h, w, labels))?;
    Ok(())
}

/// Reads a scene directory. Pixels with non-positive or non-finite depth are
/// marked invalid; a missing weak-label file yields no labels.
pub fn read_scene_dir(dir: &Path) -> Result<(Scene, Vec<WeakLabel>)> {
    let open = |name: &str| -> Result<BufReader<File>> { Ok(BufReader::new(File::open(dir.join(name))?)) };
    let rgb = read_ppm(&mut open(RGB_FILE)?)?;
    let depth = read_pfm(&mut open(DEPTH_FILE)?)?;
    let (h, w) = (depth.shape()[0], depth.shape()[1]);
    if rgb.shape() != [h, w, 3] {
        return Err(Error::Format(format!(
            "{}: rgb {:?} does not match depth {h}x{w}",
            dir.display(),
            rgb.shape()
        )));
    }
    let masks = if dir.join(MASKS_FILE).exists() {
        let (mh, mw, labels) = read_pgm(&mut open(MASKS_FILE)?)?;
        if (mh, mw) != (h, w) {
            return Err(Error::Format(format!("{}: mask size mismatch", dir.display())));
        }
        InstanceMasks::from_label_map(h, w, &labels)?
    } else {
        InstanceMasks::empty(h, w)
    };
    let labels = if dir.join(WEAK_FILE).exists() {
        let (lh, lw, labels) = read_weak_labels(&mut open(WEAK_FILE)?)?;
        if (lh, lw) != (h, w) {
            return Err(Error::Format(format!("{}: weak-label size mismatch", dir.display())));
        }
        labels
    } else {
        Vec::new()
    };
    let valid = Mask::from_depth(&depth)?;
    Ok((
        Scene {
            rgb,
            depth,
            masks,
            valid,
        },
        labels,
    ))
}
