use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::adapt::mix;
use super::optim::{adamw_step, AdamParams, OptimizerState};
use crate::error::{Error, Result};
use crate::experiment::{DataConfig, Split};
use crate::grad::{Tape, Tensor, Var};
use crate::losses::self_training_loss;
use crate::model::{Checkpoint, NetConfig, StudentNet, TuneScope};
use crate::normalize::{build_global_context, DEFAULT_EPSILON};
use crate::synth::{augment, AugmentSpec, GeomMap, Geometry, Rect, Scene, Strength};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub net: NetConfig,
    pub seed: u64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate (cosine-annealed to zero).
    pub lr: f64,
    pub weight_decay: f64,
    /// Leading share of epochs trained with the least-squares aligned loss
    /// before switching to the median/MAD self-training loss.
    pub aligned_fraction: f64,
    /// Weak photometric jitter on top of the random flip.
    pub jitter: bool,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            net: NetConfig::default(),
            seed: 0,
            epochs: 100,
            batch_size: 8,
            lr: 2e-3,
            weight_decay: 0.05,
            aligned_fraction: 1.0,
            jitter: false,
        }
    }
}

/// Trains every base weight of a fresh network on `scenes` with the
/// affine-invariant self-training loss, using ground-truth disparity as the
/// target. Returns the checkpoint (no teacher) and the mean loss per epoch.
pub fn pretrain_on(scenes: &[Scene], cfg: &PretrainConfig) -> Result<(Checkpoint, Vec<f64>)> {
    if scenes.is_empty() || cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("pretraining needs scenes, epochs and a batch size".into()));
    }
    let mut net = StudentNet::new(cfg.net.clone(), cfg.seed)?;
    let ids = net.store.ids(TuneScope::All);
    let mut opt = OptimizerState::new(&net.store, ids, AdamParams::default());
    let batches = scenes.len().div_ceil(cfg.batch_size);
    let total = (cfg.epochs * batches) as f64;
    let mut losses = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let aligned_epochs = (cfg.aligned_fraction.clamp(0.0, 1.0) * cfg.epochs as f64).round() as usize;
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, 1000 + epoch as u64));
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for idx in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let bound = net.store.bind(&mut tape, TuneScope::All);
            let mut total_loss = tape.constant(Tensor::scalar(0.0));
            for &i in idx {
                let scene = &scenes[i];
                let (h, w) = (scene.height(), scene.width());
                let spec = AugmentSpec {
                    geometry: Geometry {
                        crop: Rect::full(h, w),
                        hflip: rng.random_bool(0.5),
                    },
                    strength: Strength::Weak,
                    seed: rng.random(),
                };
                let (view, map) = if cfg.jitter {
                    augment(&scene.rgb, &spec)?
                } else {
                    let map = GeomMap {
                        src_height: h,
                        src_width: w,
                        geometry: spec.geometry,
                    };
                    (map.apply(&scene.rgb)?, map)
                };
                let target = map.apply(&scene.depth)?.map(|d| 1.0 / d);
                let valid = map.map_mask(&scene.valid);
                let pred = net.forward(&mut tape, &bound, &view)?;
                let target = tape.constant(target);
                let l = if epoch < aligned_epochs {
                    aligned_l1(&mut tape, pred, target, &valid.indices())?
                } else {
                    let hier = build_global_context(h, w, &valid)?;
                    self_training_loss(&mut tape, pred, target, &hier, DEFAULT_EPSILON, false)?
                };
                let l = tape.scale(l, 1.0 / idx.len() as f64);
                total_loss = tape.add(total_loss, l)?;
            }
            let value = tape.value(total_loss).item();
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite pretraining loss at epoch {epoch}")));
            }
            epoch_loss += value;
            let mut grads = tape.backward(total_loss)?;
            let grads: Vec<Tensor> = opt
                .ids
                .iter()
                .map(|&id| grads.take(bound.var(id)).expect("trainable parameter has a gradient"))
                .collect();
            let lr = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / total).cos());
            adamw_step(&mut net.store, &grads, &mut opt, lr, cfg.weight_decay)?;
            step += 1;
        }
        losses.push(epoch_loss / batches as f64);
    }
    Ok((
        Checkpoint {
            student: net,
            teacher: None,
        },
        losses,
    ))
}

/// Mean absolute error after the closed-form least-squares scale and shift
/// that best map `pred` onto `target` over `indices`.
///
/// Invariant to positive affine changes of `pred`, like the median/MAD loss,
/// but the alignment gradient is spread over every pixel instead of the two
/// order statistics, which keeps training from a random start stable.
pub fn aligned_l1(tape: &mut Tape, pred: Var, target: Var, indices: &[usize]) -> Result<Var> {
    if indices.len() < 2 {
        return Err(Error::EmptyInput { op: "aligned_l1" });
    }
    let p = tape.gather(pred, indices)?;
    let t = tape.gather(target, indices)?;
    let t = tape.stop_gradient(t);
    let pm = tape.mean(p)?;
    let tm = tape.mean(t)?;
    let pc = tape.sub(p, pm)?;
    let tc = tape.sub(t, tm)?;
    let cov = tape.mul(pc, tc)?;
    let cov = tape.mean(cov)?;
    let var = tape.mul(pc, pc)?;
    let var = tape.mean(var)?;
    let var = tape.affine(var, 1.0, 1e-12);
    let scale = tape.div(cov, var)?;
    let aligned = tape.mul(pc, scale)?;
    let aligned = tape.add(aligned, tm)?;
    let err = tape.sub(aligned, t)?;
    let err = tape.abs(err);
    let err = tape.mean(err)?;
    // Relative to the target spread so the loss is unitless.
    let tdev = tape.abs(tc);
    let tdev = tape.mean(tdev)?;
    let tdev = tape.affine(tdev, 1.0, 1e-12);
    tape.div(err, tdev)
}

/// Pretrains on the clean train split of the default data layout for `seed`,
/// resized to `n_scenes` scenes.
pub fn pretrain_toy(seed: u64, n_scenes: usize, epochs: usize) -> Result<Checkpoint> {
    let cfg = PretrainConfig {
        seed,
        epochs,
        ..PretrainConfig::default()
    };
    let data = DataConfig {
        seed,
        n_train: n_scenes,
        height: cfg.net.height,
        width: cfg.net.width,
        ..DataConfig::default()
    };
    let scenes: Vec<Scene> = data.split(Split::Train)?.into_iter().map(|r| r.clean).collect();
    Ok(pretrain_on(&scenes, &cfg)?.0)
}
