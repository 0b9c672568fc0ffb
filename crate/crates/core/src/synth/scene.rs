use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grad::Tensor;
use crate::normalize::{InstanceMasks, Mask};

/// One rendered view with ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    /// `[H×W×3]` in `[0, 1]`.
    pub rgb: Tensor,
    /// `[H×W]` camera-space depth, positive on valid pixels.
    pub depth: Tensor,
    pub masks: InstanceMasks,
    pub valid: Mask,
}

impl Scene {
    pub fn height(&self) -> usize {
        self.depth.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.depth.shape()[1]
    }
}

#[derive(Clone, Copy, Debug)]
enum Shape {
    Box { lo: [f64; 3], hi: [f64; 3] },
    Sphere { center: [f64; 3], radius: f64 },
}

#[derive(Clone, Copy, Debug)]
struct Object {
    shape: Shape,
    albedo: [f64; 3],
}

impl Object {
    /// Nearest positive hit along `o + t·dir` (origin at the camera), with the
    /// surface normal.
    fn hit(&self, dir: [f64; 3]) -> Option<(f64, [f64; 3])> {
        match self.shape {
            Shape::Box { lo, hi } => {
                let (mut t0, mut t1) = (f64::NEG_INFINITY, f64::INFINITY);
                let mut axis = 0;
                for a in 0..3 {
                    if dir[a].abs() < 1e-12 {
                        if 0.0 < lo[a] || 0.0 > hi[a] {
                            return None;
                        }
                        continue;
                    }
                    let (mut ta, mut tb) = (lo[a] / dir[a], hi[a] / dir[a]);
                    if ta > tb {
                        std::mem::swap(&mut ta, &mut tb);
                    }
                    if ta > t0 {
                        t0 = ta;
                        axis = a;
                    }
                    t1 = t1.min(tb);
                }
                if t0 > t1 || t0 <= 0.0 {
                    return None;
                }
                let mut n = [0.0; 3];
                n[axis] = -dir[axis].signum();
                Some((t0, n))
            }
            Shape::Sphere { center, radius } => {
                let dd = dot(dir, dir);
                let dc = dot(dir, center);
                let disc = dc * dc - dd * (dot(center, center) - radius * radius);
                if disc < 0.0 {
                    return None;
                }
                let t = (dc - disc.sqrt()) / dd;
                if t <= 0.0 {
                    return None;
                }
                let p = [dir[0] * t, dir[1] * t, dir[2] * t];
                let n = [
                    (p[0] - center[0]) / radius,
                    (p[1] - center[1]) / radius,
                    (p[2] - center[2]) / radius,
                ];
                Some((t, n))
            }
        }
    }
}

fn dot(a: [f64; 3], b: [f64; 3]) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = dot(v, v).sqrt();
    [v[0] / n, v[1] / n, v[2] / n]
}

/// Renders a room seen by a camera pitched down towards the floor: a floor
/// plane, a back wall leaning away from the camera and `n_objects` boxes and
/// spheres resting on the floor.
///
/// Rays have unit z-component in the camera frame, so the hit parameter is
/// the depth directly.
/// Without objects, depth strictly increases from the bottom row to the top
/// row of every column.
pub fn generate_scene(seed: u64, height: usize, width: usize, n_objects: usize) -> Result<Scene> {
    if height < 32 || width < 32 {
        return Err(Error::InvalidArgument(format!(
            "scenes must be at least 32x32, got {height}x{width}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let focal = width as f64;
    let cam_h: f64 = rng.random_range(0.8..1.4);
    let pitch: f64 = rng.random_range(0.3..0.45);
    let wall_z: f64 = rng.random_range(4.5..7.0);
    // Leaning further back than the pitch keeps the wall receding upwards.
    let lean: f64 = pitch.tan() + rng.random_range(0.1..0.3);
    let yaw: f64 = rng.random_range(-0.15..0.15);
    let wall_albedo = random_color(&mut rng, 0.5, 0.9);
    let floor_a = random_color(&mut rng, 0.35, 0.7);
    let floor_b = random_color(&mut rng, 0.55, 0.95);
    let checker: f64 = rng.random_range(0.5..1.0);
    let light = normalize3([
        rng.random_range(-0.6..0.6),
        rng.random_range(0.5..1.0),
        rng.random_range(-0.8..-0.3),
    ]);

    let mut objects = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let cz: f64 = rng.random_range(2.0..wall_z - 1.5);
        let cx = rng.random_range(-0.35..0.35) * cz;
        let albedo = random_color(&mut rng, 0.2, 1.0);
        let shape = if rng.random_bool(0.5) {
            let s = [
                rng.random_range(0.3..0.9),
                rng.random_range(0.3..1.0),
                rng.random_range(0.3..0.8),
            ];
            Shape::Box {
                lo: [cx - s[0] / 2.0, -cam_h, cz - s[2] / 2.0],
                hi: [cx + s[0] / 2.0, -cam_h + s[1], cz + s[2] / 2.0],
            }
        } else {
            let radius = rng.random_range(0.25..0.5);
            Shape::Sphere {
                center: [cx, -cam_h + radius, cz],
                radius,
            }
        };
        objects.push(Object { shape, albedo });
    }

    let n = height * width;
    let mut depth = vec![0.0; n];
    let mut rgb = vec![0.0; n * 3];
    let mut labels = vec![0u16; n];
    let wall_normal = normalize3([yaw, lean, -1.0]);
    let (sin_p, cos_p) = pitch.sin_cos();
    for r in 0..height {
        let dy = -((r as f64 + 0.5) - height as f64 / 2.0) / focal;
        for c in 0..width {
            let dx = ((c as f64 + 0.5) - width as f64 / 2.0) / focal;
            let dir = [dx, dy * cos_p - sin_p, dy * sin_p + cos_p];
            // wall: z = wall_z + lean·y + yaw·x
            let mut best = wall_z / (dir[2] - lean * dir[1] - yaw * dx);
            let mut normal = wall_normal;
            let mut albedo = wall_albedo;
            let mut label = 0u16;
            if dir[1] < 0.0 {
                let t = -cam_h / dir[1];
                if t < best {
                    best = t;
                    normal = [0.0, 1.0, 0.0];
                    let (fx, fz) = (dx * t, dir[2] * t);
                    let even = ((fx / checker).floor() + (fz / checker).floor()) as i64 % 2 == 0;
                    albedo = if even { floor_a } else { floor_b };
                }
            }
            for (k, obj) in objects.iter().enumerate() {
                if let Some((t, nrm)) = obj.hit(dir) {
                    if t < best {
                        best = t;
                        normal = nrm;
                        albedo = obj.albedo;
                        label = k as u16 + 1;
                    }
                }
            }
            let i = r * width + c;
            depth[i] = best;
            labels[i] = label;
            let shade = (0.3 + 0.7 * dot(normal, light).max(0.0)) / (1.0 + 0.04 * best);
            for ch in 0..3 {
                rgb[i * 3 + ch] = (albedo[ch] * shade).clamp(0.0, 1.0);
            }
        }
    }
    let masks = InstanceMasks::from_label_map(height, width, &labels)?;
    Ok(Scene {
        rgb: Tensor::new(vec![height, width, 3], rgb)?,
        depth: Tensor::new(vec![height, width], depth)?,
        masks,
        valid: Mask::all_valid(height, width),
    })
}

fn random_color(rng: &mut impl Rng, lo: f64, hi: f64) -> [f64; 3] {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}
