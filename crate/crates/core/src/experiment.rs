//! Dataset construction and multi-seed experiment drivers shared by the CLI
//! and the end-to-end tests.

use crate::error::{Error, Result};
use crate::eval::{pool_reports, MetricsReport};
use crate::model::{StudentNet, TuneScope};
use crate::synth::{
    corrupt, generate_scene, sample_ordinal_pairs, CorruptionKind, CorruptionSpec, PairSampling, Scene,
};
use crate::train::{
    evaluate, mix, run_adaptation, AdaptConfig, AdaptOutcome, AdaptSample, Components, EvalSample, NormMode,
};

/// Corruption applied to the target-domain splits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorruptionChoice {
    None,
    /// Cycle through every kind, scene `i` getting kind `i mod 6`.
    Mixed,
    Single(CorruptionKind),
    /// One separate task per kind, each adapted and scored on its own.
    Each,
}

impl CorruptionChoice {
    pub fn name(self) -> &'static str {
        match self {
            CorruptionChoice::None => "none",
            CorruptionChoice::Mixed => "mixed",
            CorruptionChoice::Single(k) => k.name(),
            CorruptionChoice::Each => "each",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(CorruptionChoice::None),
            "mixed" => Ok(CorruptionChoice::Mixed),
            "each" => Ok(CorruptionChoice::Each),
            other => Ok(CorruptionChoice::Single(
                CorruptionKind::parse(other).map_err(|e| Error::Config(e.to_string()))?,
            )),
        }
    }

    fn kind_for(self, index: usize) -> Option<CorruptionKind> {
        match self {
            CorruptionChoice::None | CorruptionChoice::Each => None,
            CorruptionChoice::Mixed => Some(CorruptionKind::ALL[index % CorruptionKind::ALL.len()]),
            CorruptionChoice::Single(k) => Some(k),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub height: usize,
    pub width: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_adapt: usize,
    pub n_test: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    pub corruption: CorruptionChoice,
    pub severity: u8,
    pub pairs: PairSampling,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            n_train: 200,
            n_val: 20,
            n_adapt: 100,
            n_test: 100,
            min_objects: 1,
            max_objects: 4,
            corruption: CorruptionChoice::Each,
            severity: 5,
            pairs: PairSampling::default(),
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Adapt,
    Test,
}

impl Split {
    pub const ALL: [Split; 4] = [Split::Train, Split::Val, Split::Adapt, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Adapt => "adapt",
            Split::Test => "test",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Val => 2,
            Split::Adapt => 3,
            Split::Test => 4,
        }
    }
}

/// A clean scene, its corrupted counterpart and the weak labels drawn from
/// its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneRecord {
    pub id: u64,
    pub clean: Scene,
    pub corrupted: Scene,
    pub corruption: Option<CorruptionKind>,
    pub labels: Vec<crate::losses::WeakLabel>,
}

impl SceneRecord {
    pub fn adapt_sample(&self) -> AdaptSample {
        AdaptSample {
            id: self.id,
            rgb: self.corrupted.rgb.clone(),
            masks: self.corrupted.masks.clone(),
            valid: self.corrupted.valid.clone(),
            labels: self.labels.clone(),
        }
    }

    pub fn eval_sample(&self, corrupted: bool) -> EvalSample {
        let s = if corrupted { &self.corrupted } else { &self.clean };
        EvalSample {
            id: self.id,
            rgb: s.rgb.clone(),
            depth: s.depth.clone(),
            valid: s.valid.clone(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects exceeds max_objects".into()));
        }
        CorruptionSpec::new(CorruptionKind::Fog, self.severity).map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.n_train,
            Split::Val => self.n_val,
            Split::Adapt => self.n_adapt,
            Split::Test => self.n_test,
        }
    }

    /// Scene id of item `index` in `split`; ids never collide across splits.
    pub fn scene_id(&self, split: Split, index: usize) -> u64 {
        mix(mix(self.seed, split.tag()), index as u64)
    }

    pub fn record(&self, split: Split, index: usize) -> Result<SceneRecord> {
        let id = self.scene_id(split, index);
        let span = (self.max_objects - self.min_objects + 1) as u64;
        let n_objects = self.min_objects + (mix(id, 7) % span) as usize;
        let clean = generate_scene(id, self.height, self.width, n_objects)?;
        // The pretraining split is clean by definition.
        let kind = match (split, self.corruption) {
            (Split::Train, _) => None,
            (_, CorruptionChoice::Each) => {
                return Err(Error::Config(
                    "corruption `each` describes several tasks; expand it with tasks()".into(),
                ))
            }
            (_, c) => c.kind_for(index),
        };
        let mut corrupted = clean.clone();
        if let Some(kind) = kind {
            let spec = CorruptionSpec::new(kind, self.severity)?;
            corrupted.rgb = corrupt(&clean.rgb, Some(&clean.depth), spec, mix(id, 99))?;
        }
        let labels = sample_ordinal_pairs(&clean.depth, &clean.valid, &self.pairs, mix(id, 5))?;
        Ok(SceneRecord {
            id,
            clean,
            corrupted,
            corruption: kind,
            labels,
        })
    }

    pub fn split(&self, split: Split) -> Result<Vec<SceneRecord>> {
        (0..self.count(split)).map(|i| self.record(split, i)).collect()
    }

    /// Named single-task configurations: one per kind for `each`, otherwise
    /// just this one. Every task shares the same underlying scenes.
    pub fn tasks(&self) -> Vec<(String, DataConfig)> {
        match self.corruption {
            CorruptionChoice::Each => CorruptionKind::ALL
                .into_iter()
                .map(|k| {
                    let cfg = DataConfig {
                        corruption: CorruptionChoice::Single(k),
                        ..self.clone()
                    };
                    (k.name().to_string(), cfg)
                })
                .collect(),
            c => vec![(c.name().to_string(), self.clone())],
        }
    }
}

/// In-memory splits for one experiment.
#[derive(Clone, Debug)]
pub struct Splits {
    pub adapt: Vec<AdaptSample>,
    pub val: Vec<EvalSample>,
    pub test: Vec<EvalSample>,
    pub test_clean: Vec<EvalSample>,
}

impl Splits {
    pub fn build(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let adapt = cfg.split(Split::Adapt)?.iter().map(SceneRecord::adapt_sample).collect();
        let val = cfg.split(Split::Val)?.iter().map(|r| r.eval_sample(true)).collect();
        let test_records = cfg.split(Split::Test)?;
        Ok(Self {
            adapt,
            val,
            test: test_records.iter().map(|r| r.eval_sample(true)).collect(),
            test_clean: test_records.iter().map(|r| r.eval_sample(false)).collect(),
        })
    }
}

/// Every task of an experiment with its splits.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub tasks: Vec<(String, Splits)>,
}

impl Benchmark {
    pub fn build(cfg: &DataConfig) -> Result<Self> {
        let tasks = cfg
            .tasks()
            .into_iter()
            .map(|(name, c)| Ok((name, Splits::build(&c)?)))
            .collect::<Result<_>>()?;
        Ok(Self { tasks })
    }

    /// Scores `net` on every corrupted test split: `(pooled, per task)`.
    pub fn evaluate(&self, net: &StudentNet) -> Result<(MetricsReport, Vec<MetricsReport>)> {
        let per: Vec<MetricsReport> = self
            .tasks
            .iter()
            .map(|(_, s)| evaluate(net, &s.test))
            .collect::<Result<_>>()?;
        let pooled = pool_reports(&per).ok_or(Error::EmptyInput { op: "benchmark" })?;
        Ok((pooled, per))
    }
}

/// Outcome of one task of a variant.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskResult {
    pub task: String,
    pub test: MetricsReport,
    pub outcome: Option<AdaptOutcome>,
}

/// Test metrics of one variant and seed, pooled over tasks.
#[derive(Clone, Debug, PartialEq)]
pub struct VariantResult {
    pub name: String,
    pub seed: u64,
    pub test: MetricsReport,
    pub tasks: Vec<TaskResult>,
}

/// Adapts `base` with `cfg` on each task separately (or just evaluates it
/// when no component is on) and scores the selected student on that task's
/// corrupted test split.
pub fn run_variant(base: &StudentNet, bench: &Benchmark, cfg: &AdaptConfig, name: &str) -> Result<VariantResult> {
    let mut tasks = Vec::with_capacity(bench.tasks.len());
    for (task, splits) in &bench.tasks {
        let (test, outcome) = if cfg.components.any() {
            let outcome = run_adaptation(base, &splits.adapt, &splits.val, cfg)?;
            (evaluate(&outcome.best.student, &splits.test)?, Some(outcome))
        } else {
            (evaluate(base, &splits.test)?, None)
        };
        tasks.push(TaskResult {
            task: task.clone(),
            test,
            outcome,
        });
    }
    let per: Vec<MetricsReport> = tasks.iter().map(|t| t.test.clone()).collect();
    Ok(VariantResult {
        name: name.into(),
        seed: cfg.seed,
        test: pool_reports(&per).ok_or(Error::EmptyInput { op: "run_variant" })?,
        tasks,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Components,
    Tuning,
    Norm,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Components => "components",
            AblationAxis::Tuning => "tuning",
            AblationAxis::Norm => "norm",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "components" => Ok(AblationAxis::Components),
            "tuning" => Ok(AblationAxis::Tuning),
            "norm" => Ok(AblationAxis::Norm),
            other => Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        }
    }

    /// Named configurations along this axis, derived from `base`.
    pub fn variants(self, base: &AdaptConfig) -> Vec<(String, AdaptConfig)> {
        match self {
            AblationAxis::Components => ["baseline", "st", "ws", "st+ws", "st+ws+wr"]
                .into_iter()
                .map(|n| {
                    let components = Components::parse(n).expect("static names");
                    (n.to_string(), AdaptConfig { components, ..base.clone() })
                })
                .collect(),
            AblationAxis::Tuning => [TuneScope::All, TuneScope::Encoder, TuneScope::Decoder, TuneScope::Lora]
                .into_iter()
                .map(|scope| (scope.name().to_string(), AdaptConfig { scope, ..base.clone() }))
                .collect(),
            AblationAxis::Norm => NormMode::ALL
                .into_iter()
                .map(|norm_mode| (norm_mode.name().to_string(), AdaptConfig { norm_mode, ..base.clone() }))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub delta1: Vec<f64>,
    pub absrel: Vec<f64>,
}

impl AblationRow {
    pub fn delta1_mean(&self) -> f64 {
        mean_std(&self.delta1).0
    }
}

pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Runs every variant of `axis` for each seed, in a fixed order.
pub fn ablate(
    base: &StudentNet,
    bench: &Benchmark,
    cfg: &AdaptConfig,
    axis: AblationAxis,
    seeds: &[u64],
    mut progress: impl FnMut(&VariantResult),
) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for (name, vcfg) in axis.variants(cfg) {
        let mut row = AblationRow {
            variant: name.clone(),
            delta1: Vec::new(),
            absrel: Vec::new(),
        };
        for &seed in seeds {
            let r = run_variant(base, bench, &AdaptConfig { seed, ..vcfg.clone() }, &name)?;
            progress(&r);
            row.delta1.push(r.test.delta1);
            row.absrel.push(r.test.absrel);
        }
        rows.push(row);
    }
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "variant,delta1_mean,delta1_std,absrel_mean,absrel_std,n_seeds";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from(ABLATION_HEADER);
    out.push('\n');
    for r in rows {
        let (dm, ds) = mean_std(&r.delta1);
        let (am, as_) = mean_std(&r.absrel);
        out.push_str(&format!("{},{dm:.4},{ds:.4},{am:.4},{as_:.4},{}\n", r.variant, r.delta1.len()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn axes_have_table_shaped_rows() {
        let cfg = AdaptConfig::default();
        let names = |a: AblationAxis| a.variants(&cfg).into_iter().map(|(n, _)| n).collect::<Vec<_>>();
        assert_eq!(names(AblationAxis::Components), ["baseline", "st", "ws", "st+ws", "st+ws+wr"]);
        assert_eq!(names(AblationAxis::Tuning), ["all", "encoder", "decoder", "lora"]);
        assert_eq!(names(AblationAxis::Norm), ["global", "hdn", "sa_hdn"]);
    }

    #[test]
    fn split_ids_are_disjoint_and_records_deterministic() {
        let cfg = DataConfig {
            height: 32,
            width: 32,
            corruption: CorruptionChoice::Mixed,
            ..DataConfig::default()
        };
        let mut ids = std::collections::BTreeSet::new();
        for split in Split::ALL {
            for i in 0..cfg.count(split) {
                assert!(ids.insert(cfg.scene_id(split, i)));
            }
        }
        assert_eq!(cfg.record(Split::Adapt, 3).unwrap(), cfg.record(Split::Adapt, 3).unwrap());
        let r = cfg.record(Split::Adapt, 4).unwrap();
        assert_eq!(r.corruption, Some(CorruptionKind::Fog));
        assert_eq!(r.clean.depth, r.corrupted.depth);
        assert_eq!(r.labels.len(), 10);
        assert_eq!(cfg.record(Split::Train, 4).unwrap().corruption, None);

        let each = DataConfig {
            corruption: CorruptionChoice::Each,
            ..cfg.clone()
        };
        assert!(matches!(each.record(Split::Test, 0), Err(Error::Config(_))));
        let tasks = each.tasks();
        assert_eq!(tasks.len(), 6);
        let a = tasks[0].1.record(Split::Test, 1).unwrap();
        let b = tasks[4].1.record(Split::Test, 1).unwrap();
        assert_eq!((a.id, &a.clean), (b.id, &b.clean));
        assert_eq!(b.corruption, Some(CorruptionKind::Fog));
        assert_eq!(cfg.tasks().len(), 1);
    }

    #[test]
    fn ablation_csv_layout() {
        let rows = vec![AblationRow {
            variant: "st".into(),
            delta1: vec![80.0, 82.0],
            absrel: vec![10.0, 12.0],
        }];
        assert_eq!(
            ablation_csv(&rows),
            format!("{ABLATION_HEADER}\nst,81.0000,1.0000,11.0000,1.0000,2\n")
        );
    }
}
