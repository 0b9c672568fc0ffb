use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::optim::{adamw_step, cosine_lr, AdamParams, OptimizerState};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, pool_reports, MetricsReport};
use crate::grad::{Tape, Tensor, Var};
use crate::losses::{lora_reg_loss, self_training_loss, weak_loss, LossWeights, WeakLabel};
use crate::model::{clone_to_teacher, Bound, Checkpoint, StudentNet, TeacherNet, TuneScope};
use crate::normalize::{
    build_global_context, build_hdn_contexts_with, build_sa_hdn_contexts, normalize_phi, stats_of,
    ContextHierarchy, HdnScheme, InstanceMasks, Mask, DEFAULT_EPSILON, DEFAULT_HDN_LEVELS,
};
use crate::synth::{augment, AugmentSpec, GeomMap, Geometry, Rect, Strength};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum NormMode {
    Global,
    Hdn,
    SaHdn,
}

impl NormMode {
    pub const ALL: [NormMode; 3] = [NormMode::Global, NormMode::Hdn, NormMode::SaHdn];

    pub fn name(self) -> &'static str {
        match self {
            NormMode::Global => "global",
            NormMode::Hdn => "hdn",
            NormMode::SaHdn => "sa_hdn",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown norm mode `{s}`")))
    }
}

/// Which loss terms are active.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Components {
    /// Self-training against the teacher.
    pub st: bool,
    /// Weak ordinal supervision.
    pub ws: bool,
    /// Adapter regularization.
    pub wr: bool,
}

impl Components {
    pub const FULL: Components = Components {
        st: true,
        ws: true,
        wr: true,
    };

    pub fn any(self) -> bool {
        self.st || self.ws || self.wr
    }

    /// `"baseline"` or the active terms joined by `+`, e.g. `"st+ws"`.
    pub fn name(self) -> String {
        let parts: Vec<&str> = [(self.st, "st"), (self.ws, "ws"), (self.wr, "wr")]
            .into_iter()
            .filter_map(|(on, n)| on.then_some(n))
            .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut c = Components::default();
        if s == "baseline" || s == "none" || s.is_empty() {
            return Ok(c);
        }
        for part in s.split(['+', ',']) {
            match part.trim() {
                "st" => c.st = true,
                "ws" => c.ws = true,
                "wr" => c.wr = true,
                other => return Err(Error::Config(format!("unknown loss component `{other}`"))),
            }
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmaCadence {
    Step,
    Epoch,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptConfig {
    pub batch_size: usize,
    /// Reference rate at batch size 256; scaled linearly.
    pub base_lr: f64,
    pub epochs_max: usize,
    pub patience: usize,
    pub ema_alpha: f64,
    pub ema_cadence: EmaCadence,
    pub lora_rank: usize,
    pub lora_alpha: f64,
    pub lora_init_std: f64,
    pub weight_decay: f64,
    pub adam: AdamParams,
    pub weights: LossWeights,
    pub epsilon: f64,
    pub norm_mode: NormMode,
    pub hdn_levels: Vec<usize>,
    pub hdn_scheme: HdnScheme,
    pub min_instance_size: usize,
    pub components: Components,
    pub scope: TuneScope,
    pub detach_student_stats: bool,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            batch_size: 4,
            base_lr: 0.1,
            epochs_max: 100,
            patience: 30,
            ema_alpha: 0.996,
            ema_cadence: EmaCadence::Step,
            lora_rank: 8,
            lora_alpha: 16.0,
            lora_init_std: 0.02,
            weight_decay: 1e-4,
            adam: AdamParams::default(),
            weights: LossWeights::default(),
            epsilon: DEFAULT_EPSILON,
            norm_mode: NormMode::SaHdn,
            hdn_levels: DEFAULT_HDN_LEVELS.to_vec(),
            hdn_scheme: HdnScheme::Bins,
            min_instance_size: 16,
            components: Components::FULL,
            scope: TuneScope::Lora,
            detach_student_stats: false,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    /// Settings for the 64×64 synthetic testbed: a short schedule with a
    /// larger step, and a weak-label weight that matches the ranking loss
    /// being a mean over pairs in normalized units rather than a sum.
    pub fn desk() -> Self {
        let mut cfg = Self {
            base_lr: 0.3,
            epochs_max: 15,
            patience: 5,
            ..Self::default()
        };
        cfg.weights.lambda_w = 10.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 || self.epochs_max == 0 {
            return bad("batch_size and epochs_max must be positive".into());
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha must be in [0, 1], got {}", self.ema_alpha));
        }
        if self.lora_rank == 0 || !(self.lora_alpha > 0.0) || !(self.lora_init_std >= 0.0) {
            return bad("LoRA rank, alpha must be positive and init std non-negative".into());
        }
        if !(self.weight_decay >= 0.0) || !(self.epsilon >= 0.0) {
            return bad("weight_decay and epsilon must be non-negative".into());
        }
        if self.hdn_levels.first() != Some(&1) || self.hdn_levels.contains(&0) {
            return bad(format!("hdn_levels must start with 1, got {:?}", self.hdn_levels));
        }
        self.weights.validate()
    }
}

/// One image of the unlabeled target split, with its cheap annotations.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptSample {
    pub id: u64,
    pub rgb: Tensor,
    pub masks: InstanceMasks,
    pub valid: Mask,
    pub labels: Vec<WeakLabel>,
}

/// Held-out image with ground truth, used only for model selection and
/// reporting.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalSample {
    pub id: u64,
    pub rgb: Tensor,
    pub depth: Tensor,
    pub valid: Mask,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptState {
    pub student: StudentNet,
    pub teacher: TeacherNet,
    pub optimizer: OptimizerState,
    pub step: usize,
    pub total_steps: usize,
}

impl AdaptState {
    /// Fresh adapters (in LoRA scope), a teacher cloned from the student and
    /// a schedule of `epochs_max · batches_per_epoch` steps.
    pub fn new(base: &StudentNet, cfg: &AdaptConfig, batches_per_epoch: usize) -> Result<Self> {
        cfg.validate()?;
        let mut student = base.clone();
        if cfg.scope == TuneScope::Lora {
            student.init_lora_with(cfg.lora_rank, cfg.lora_alpha, cfg.lora_init_std, cfg.seed)?;
        }
        let teacher = clone_to_teacher(&student, cfg.ema_alpha);
        let ids = student.store.ids(cfg.scope);
        let optimizer = OptimizerState::new(&student.store, ids, cfg.adam);
        Ok(Self {
            student,
            teacher,
            optimizer,
            step: 0,
            total_steps: cfg.epochs_max * batches_per_epoch.max(1),
        })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochStats {
    pub lr: f64,
    pub loss_st: f64,
    pub loss_weak: f64,
    pub loss_reg: f64,
    pub steps: usize,
}

pub(crate) fn mix(a: u64, b: u64) -> u64 {
    let mut z = a ^ b.wrapping_add(0x9e37_79b9_7f4a_7c15).wrapping_add(a << 6).wrapping_add(a >> 2);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Weak and strong views of one sample with shared geometry.
pub fn make_views(rgb: &Tensor, seed: u64) -> Result<(Tensor, Tensor, GeomMap)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (rgb.shape()[0], rgb.shape()[1]);
    let geometry = Geometry {
        crop: Rect::full(h, w),
        hflip: rng.random_bool(0.5),
    };
    let (weak, map) = augment(
        rgb,
        &AugmentSpec {
            geometry,
            strength: Strength::Weak,
            seed: rng.random(),
        },
    )?;
    let (strong, _) = augment(
        rgb,
        &AugmentSpec {
            geometry,
            strength: Strength::Strong,
            seed: rng.random(),
        },
    )?;
    Ok((weak, strong, map))
}

pub fn build_hierarchy(
    cfg: &AdaptConfig,
    pseudo: &Tensor,
    valid: &Mask,
    masks: &InstanceMasks,
) -> Result<ContextHierarchy> {
    match cfg.norm_mode {
        NormMode::Global => build_global_context(valid.height, valid.width, valid),
        NormMode::Hdn => build_hdn_contexts_with(pseudo, valid, &cfg.hdn_levels, cfg.hdn_scheme),
        NormMode::SaHdn => build_sa_hdn_contexts(masks, valid, cfg.min_instance_size),
    }
}

/// Rank loss on the globally normalized prediction.
fn weak_term(tape: &mut Tape, pred: Var, valid: &Mask, labels: &[WeakLabel], cfg: &AdaptConfig) -> Result<Var> {
    let vals = tape.gather(pred, &valid.indices())?;
    let vals = if cfg.detach_student_stats {
        tape.stop_gradient(vals)
    } else {
        vals
    };
    let stats = stats_of(tape, vals, cfg.epsilon)?;
    let phi = normalize_phi(tape, pred, &stats)?;
    weak_loss(tape, phi, labels, cfg.weights.margin_delta)
}

struct BatchLoss {
    loss: Var,
    st: f64,
    weak: f64,
    reg: f64,
}

fn batch_loss(
    tape: &mut Tape,
    bound: &Bound,
    state: &AdaptState,
    batch: &[&AdaptSample],
    cfg: &AdaptConfig,
    view_seeds: &[u64],
) -> Result<BatchLoss> {
    let c = cfg.components;
    let w = &cfg.weights;
    let (mut sum_st, mut sum_weak) = (0.0, 0.0);
    let mut total = tape.constant(Tensor::scalar(0.0));
    for (sample, &vseed) in batch.iter().zip(view_seeds) {
        let (weak, strong, map) = make_views(&sample.rgb, vseed)?;
        let valid = map.map_mask(&sample.valid);
        if c.st {
            let pseudo = state.teacher.predict(&weak)?;
            let masks = map.map_instances(&sample.masks);
            let hier = build_hierarchy(cfg, &pseudo, &valid, &masks)?;
            let teacher = tape.constant(pseudo);
            let pred = state.student.forward(tape, bound, &strong)?;
            let l = self_training_loss(tape, pred, teacher, &hier, cfg.epsilon, cfg.detach_student_stats)?;
            sum_st += tape.value(l).item();
            let l = tape.scale(l, w.lambda_st / batch.len() as f64);
            total = tape.add(total, l)?;
        }
        if c.ws && !sample.labels.is_empty() {
            let labels = map.map_labels(&sample.labels);
            let pred = state.student.forward(tape, bound, &weak)?;
            let l = weak_term(tape, pred, &valid, &labels, cfg)?;
            sum_weak += tape.value(l).item();
            let l = tape.scale(l, w.lambda_w / batch.len() as f64);
            total = tape.add(total, l)?;
        }
    }
    let mut reg = 0.0;
    if c.wr {
        let layers = state.student.lora_layers();
        let l = lora_reg_loss(tape, &layers, bound, w.reg_alpha)?;
        reg = tape.value(l).item();
        let l = tape.scale(l, w.lambda_r);
        total = tape.add(total, l)?;
    }
    let n = batch.len() as f64;
    Ok(BatchLoss {
        loss: total,
        st: sum_st / n,
        weak: sum_weak / n,
        reg,
    })
}

/// One pass over `data` in a seeded random order. With every component
/// disabled nothing is updated.
pub fn adapt_epoch(state: &mut AdaptState, data: &[AdaptSample], cfg: &AdaptConfig, epoch: usize) -> Result<EpochStats> {
    let mut stats = EpochStats::default();
    if !cfg.components.any() || data.is_empty() {
        return Ok(stats);
    }
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64));
    order.shuffle(&mut rng);
    let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
    for (b, idx) in batches.iter().enumerate() {
        let batch: Vec<&AdaptSample> = idx.iter().map(|&i| &data[i]).collect();
        let view_seeds: Vec<u64> = idx
            .iter()
            .map(|&i| mix(mix(cfg.seed, epoch as u64), data[i].id))
            .collect();
        let lr = cosine_lr(state.step.min(state.total_steps), state.total_steps, cfg.base_lr, cfg.batch_size)?;
        if b == 0 {
            stats.lr = lr;
        }
        let mut tape = Tape::new();
        let bound = state.student.store.bind(&mut tape, cfg.scope);
        let bl = batch_loss(&mut tape, &bound, state, &batch, cfg, &view_seeds)?;
        let value = tape.value(bl.loss).item();
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss {value} at epoch {epoch}, batch {b}")));
        }
        let mut grads = tape.backward(bl.loss)?;
        let grads: Vec<Tensor> = state
            .optimizer
            .ids
            .iter()
            .map(|&id| grads.take(bound.var(id)).expect("trainable parameter has a gradient"))
            .collect();
        adamw_step(&mut state.student.store, &grads, &mut state.optimizer, lr, cfg.weight_decay)?;
        state.step += 1;
        if cfg.ema_cadence == EmaCadence::Step {
            state.teacher.ema_update(&state.student)?;
        }
        stats.loss_st += bl.st;
        stats.loss_weak += bl.weak;
        stats.loss_reg += bl.reg;
        stats.steps += 1;
    }
    if cfg.ema_cadence == EmaCadence::Epoch {
        state.teacher.ema_update(&state.student)?;
    }
    let n = stats.steps.max(1) as f64;
    stats.loss_st /= n;
    stats.loss_weak /= n;
    stats.loss_reg /= n;
    Ok(stats)
}

/// Pixel-pooled metrics of `net` over `samples`, each image aligned separately.
pub fn evaluate(net: &StudentNet, samples: &[EvalSample]) -> Result<MetricsReport> {
    let mut reports = Vec::with_capacity(samples.len());
    for s in samples {
        let pred = net.predict(&s.rgb)?;
        reports.push(compute_metrics(&pred, &s.depth, &s.valid)?);
    }
    pool_reports(&reports).ok_or(Error::EmptyInput { op: "evaluate" })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrajectoryRow {
    pub epoch: usize,
    pub lr: f64,
    pub loss_st: f64,
    pub loss_weak: f64,
    pub loss_reg: f64,
    pub val_delta1: f64,
    pub val_absrel: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdaptOutcome {
    /// Student and teacher at the best validation epoch.
    pub best: Checkpoint,
    /// 1-based; 0 when no epoch ran.
    pub best_epoch: usize,
    pub initial_val: MetricsReport,
    pub best_val: MetricsReport,
    pub trajectory: Vec<TrajectoryRow>,
}

/// Adapts `base` on `train`, selecting the epoch with the best validation δ1.
///
/// Training stops once `patience + 1` consecutive epochs fail to improve on
/// the best δ1 so far, or after `epochs_max` epochs.
pub fn run_adaptation(base: &StudentNet, train: &[AdaptSample], val: &[EvalSample], cfg: &AdaptConfig) -> Result<AdaptOutcome> {
    let train_ids: std::collections::BTreeSet<u64> = train.iter().map(|s| s.id).collect();
    if let Some(s) = val.iter().find(|s| train_ids.contains(&s.id)) {
        return Err(Error::InvalidArgument(format!("scene {} is in both train and val splits", s.id)));
    }
    let batches = train.len().div_ceil(cfg.batch_size.max(1));
    let mut state = AdaptState::new(base, cfg, batches)?;
    let initial_val = evaluate(&state.student, val)?;
    let mut best = Checkpoint {
        student: state.student.clone(),
        teacher: Some(state.teacher.clone()),
    };
    let mut best_val = initial_val.clone();
    let mut best_epoch = 0;
    let mut best_delta1 = f64::NEG_INFINITY;
    let mut stale = 0;
    let mut trajectory = Vec::new();
    for epoch in 1..=cfg.epochs_max {
        let stats = adapt_epoch(&mut state, train, cfg, epoch)?;
        let report = evaluate(&state.student, val)?;
        trajectory.push(TrajectoryRow {
            epoch,
            lr: stats.lr,
            loss_st: stats.loss_st,
            loss_weak: stats.loss_weak,
            loss_reg: stats.loss_reg,
            val_delta1: report.delta1,
            val_absrel: report.absrel,
        });
        if report.delta1 > best_delta1 {
            best_delta1 = report.delta1;
            best_epoch = epoch;
            best = Checkpoint {
                student: state.student.clone(),
                teacher: Some(state.teacher.clone()),
            };
            best_val = report;
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.patience {
                break;
            }
        }
    }
    Ok(AdaptOutcome {
        best,
        best_epoch,
        initial_val,
        best_val,
        trajectory,
    })
}

pub const TRAJECTORY_HEADER: &str = "epoch,lr,loss_st,loss_weak,loss_reg,val_delta1,val_absrel";

pub fn trajectory_csv(rows: &[TrajectoryRow]) -> String {
    let mut out = String::from(TRAJECTORY_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            r.epoch, r.lr, r.loss_st, r.loss_weak, r.loss_reg, r.val_delta1, r.val_absrel
        ));
    }
    out
}

pub fn parse_trajectory_csv(text: &str) -> Result<Vec<TrajectoryRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(TRAJECTORY_HEADER) {
        return Err(Error::Format("missing trajectory header".into()));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() != 7 {
                return Err(Error::Format(format!("bad trajectory row `{l}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::Format(format!("bad number `{s}`")));
            Ok(TrajectoryRow {
                epoch: f[0].parse().map_err(|_| Error::Format(format!("bad epoch `{}`", f[0])))?,
                lr: num(f[1])?,
                loss_st: num(f[2])?,
                loss_weak: num(f[3])?,
                loss_reg: num(f[4])?,
                val_delta1: num(f[5])?,
                val_absrel: num(f[6])?,
            })
        })
        .collect()
}
