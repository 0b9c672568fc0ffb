//! Flat `key = value` experiment configuration.
//!
//! One setting per line, `#` starts a comment, unknown keys are rejected.
//! A single `seed` drives data generation, pretraining and adaptation.

use std::path::{Path, PathBuf};

use westar::experiment::{AblationAxis, CorruptionChoice, DataConfig};
use westar::model::TuneScope;
use westar::normalize::HdnScheme;
use westar::train::{AdaptConfig, Components, EmaCadence, NormMode, PretrainConfig};

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub data: DataConfig,
    pub pretrain: PretrainConfig,
    pub adapt: AdaptConfig,
    pub axes: Vec<AblationAxis>,
    pub n_seeds: usize,
    /// Dataset directory read by every command except `gen`.
    pub data_dir: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut cfg = Self {
            seed: 0,
            data: DataConfig::default(),
            pretrain: PretrainConfig::default(),
            adapt: AdaptConfig::desk(),
            axes: vec![AblationAxis::Components, AblationAxis::Norm],
            n_seeds: 5,
            data_dir: None,
            out: None,
            checkpoint: None,
        };
        cfg.sync();
        cfg
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .parse()
        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn flag(key: &str, value: &str) -> Result<bool, CliError> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(CliError::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

fn list<T>(value: &str, f: impl Fn(&str) -> Result<T, CliError>) -> Result<Vec<T>, CliError> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(f)
        .collect()
}

fn scheme_name(s: HdnScheme) -> &'static str {
    match s {
        HdnScheme::Bins => "bins",
        HdnScheme::Grid => "grid",
    }
}

fn cadence_name(c: EmaCadence) -> &'static str {
    match c {
        EmaCadence::Step => "step",
        EmaCadence::Epoch => "epoch",
    }
}

impl ExperimentConfig {
    /// Parses `text` on top of the defaults. Relative paths resolve against
    /// `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self, CliError> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(key.trim(), value.trim(), base)
                .map_err(|e| CliError::Config(format!("line {}: {e}", lineno + 1)))?;
        }
        cfg.sync();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, &absolute(&base)?)
    }

    pub fn set(&mut self, key: &str, value: &str, base: &Path) -> Result<(), CliError> {
        let d = &mut self.data;
        let p = &mut self.pretrain;
        let a = &mut self.adapt;
        let cfg_err = |e: westar::Error| CliError::Config(e.to_string());
        match key {
            "seed" => self.seed = num(key, value)?,
            "height" => d.height = num(key, value)?,
            "width" => d.width = num(key, value)?,
            "n_train" => d.n_train = num(key, value)?,
            "n_val" => d.n_val = num(key, value)?,
            "n_adapt" => d.n_adapt = num(key, value)?,
            "n_test" => d.n_test = num(key, value)?,
            "min_objects" => d.min_objects = num(key, value)?,
            "max_objects" => d.max_objects = num(key, value)?,
            "corruption" => d.corruption = CorruptionChoice::parse(value).map_err(cfg_err)?,
            "severity" => d.severity = num(key, value)?,
            "pair_anchors" => d.pairs.k_iters = num(key, value)?,
            "equal_ratio" => d.pairs.equal_ratio = num(key, value)?,
            "allow_equal_pairs" => d.pairs.allow_equal = flag(key, value)?,

            "patch" => p.net.patch = num(key, value)?,
            "embed_dim" => p.net.embed_dim = num(key, value)?,
            "blocks" => p.net.blocks = num(key, value)?,
            "mlp_hidden" => p.net.mlp_hidden = num(key, value)?,
            "decoder_hidden" => p.net.decoder_hidden = num(key, value)?,
            "pos_embed" => p.net.use_pos_embed = flag(key, value)?,
            "pretrain_epochs" => p.epochs = num(key, value)?,
            "pretrain_batch_size" => p.batch_size = num(key, value)?,
            "pretrain_lr" => p.lr = num(key, value)?,
            "pretrain_weight_decay" => p.weight_decay = num(key, value)?,
            "pretrain_aligned_fraction" => p.aligned_fraction = num(key, value)?,
            "pretrain_jitter" => p.jitter = flag(key, value)?,

            "components" => a.components = Components::parse(value).map_err(cfg_err)?,
            "norm_mode" => a.norm_mode = NormMode::parse(value).map_err(cfg_err)?,
            "scope" => a.scope = TuneScope::parse(value).map_err(cfg_err)?,
            "batch_size" => a.batch_size = num(key, value)?,
            "base_lr" => a.base_lr = num(key, value)?,
            "epochs_max" => a.epochs_max = num(key, value)?,
            "patience" => a.patience = num(key, value)?,
            "ema_alpha" => a.ema_alpha = num(key, value)?,
            "ema_cadence" => {
                a.ema_cadence = match value {
                    "step" => EmaCadence::Step,
                    "epoch" => EmaCadence::Epoch,
                    _ => return Err(CliError::Config(format!("`{key}`: expected step or epoch"))),
                }
            }
            "lora_rank" => a.lora_rank = num(key, value)?,
            "lora_alpha" => a.lora_alpha = num(key, value)?,
            "lora_init_std" => a.lora_init_std = num(key, value)?,
            "weight_decay" => a.weight_decay = num(key, value)?,
            "adam_beta1" => a.adam.beta1 = num(key, value)?,
            "adam_beta2" => a.adam.beta2 = num(key, value)?,
            "adam_eps" => a.adam.eps = num(key, value)?,
            "lambda_st" => a.weights.lambda_st = num(key, value)?,
            "lambda_w" => a.weights.lambda_w = num(key, value)?,
            "lambda_r" => a.weights.lambda_r = num(key, value)?,
            "margin_delta" => a.weights.margin_delta = num(key, value)?,
            "reg_alpha" => a.weights.reg_alpha = num(key, value)?,
            "epsilon" => a.epsilon = num(key, value)?,
            "hdn_levels" => a.hdn_levels = list(value, |s| num(key, s))?,
            "hdn_scheme" => {
                a.hdn_scheme = match value {
                    "bins" => HdnScheme::Bins,
                    "grid" => HdnScheme::Grid,
                    _ => return Err(CliError::Config(format!("`{key}`: expected bins or grid"))),
                }
            }
            "min_instance_size" => a.min_instance_size = num(key, value)?,
            "detach_student_stats" => a.detach_student_stats = flag(key, value)?,

            "axes" => self.axes = list(value, |s| AblationAxis::parse(s).map_err(cfg_err))?,
            "n_seeds" => self.n_seeds = num(key, value)?,
            "data_dir" => self.data_dir = Some(base.join(value)),
            "out" => self.out = Some(base.join(value)),
            "checkpoint" => self.checkpoint = Some(base.join(value)),
            other => return Err(CliError::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// Propagates the shared settings (seed, image size) into every part.
    pub fn sync(&mut self) {
        self.data.seed = self.seed;
        self.pretrain.seed = self.seed;
        self.adapt.seed = self.seed;
        self.pretrain.net.height = self.data.height;
        self.pretrain.net.width = self.data.width;
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let err = |e: westar::Error| CliError::Config(e.to_string());
        self.data.validate().map_err(err)?;
        self.adapt.validate().map_err(err)?;
        let net = &self.pretrain.net;
        if net.patch == 0 || self.data.height % net.patch != 0 || self.data.width % net.patch != 0 {
            return Err(CliError::Config(format!(
                "image size {}x{} is not a multiple of patch {}",
                self.data.height, self.data.width, net.patch
            )));
        }
        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 {
            return Err(CliError::Config("pretrain_epochs and pretrain_batch_size must be positive".into()));
        }
        if self.n_seeds == 0 {
            return Err(CliError::Config("n_seeds must be positive".into()));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields the same configuration.
    pub fn to_text(&self) -> String {
        let mut text = self.settings_text();
        for (k, v) in [("data_dir", &self.data_dir), ("out", &self.out), ("checkpoint", &self.checkpoint)] {
            if let Some(v) = v {
                text.push_str(&format!("{k} = {}\n", v.display()));
            }
        }
        text
    }

    /// Every setting except the paths; its digest identifies an experiment
    /// regardless of where it runs.
    pub fn settings_text(&self) -> String {
        let d = &self.data;
        let p = &self.pretrain;
        let a = &self.adapt;
        let join = |v: Vec<String>| v.join(",");
        let kv: Vec<(&str, String)> = vec![
            ("seed", self.seed.to_string()),
            ("height", d.height.to_string()),
            ("width", d.width.to_string()),
            ("n_train", d.n_train.to_string()),
            ("n_val", d.n_val.to_string()),
            ("n_adapt", d.n_adapt.to_string()),
            ("n_test", d.n_test.to_string()),
            ("min_objects", d.min_objects.to_string()),
            ("max_objects", d.max_objects.to_string()),
            ("corruption", d.corruption.name().to_string()),
            ("severity", d.severity.to_string()),
            ("pair_anchors", d.pairs.k_iters.to_string()),
            ("equal_ratio", d.pairs.equal_ratio.to_string()),
            ("allow_equal_pairs", d.pairs.allow_equal.to_string()),
            ("patch", p.net.patch.to_string()),
            ("embed_dim", p.net.embed_dim.to_string()),
            ("blocks", p.net.blocks.to_string()),
            ("mlp_hidden", p.net.mlp_hidden.to_string()),
            ("decoder_hidden", p.net.decoder_hidden.to_string()),
            ("pos_embed", p.net.use_pos_embed.to_string()),
            ("pretrain_epochs", p.epochs.to_string()),
            ("pretrain_batch_size", p.batch_size.to_string()),
            ("pretrain_lr", p.lr.to_string()),
            ("pretrain_weight_decay", p.weight_decay.to_string()),
            ("pretrain_aligned_fraction", p.aligned_fraction.to_string()),
            ("pretrain_jitter", p.jitter.to_string()),
            ("components", a.components.name()),
            ("norm_mode", a.norm_mode.name().to_string()),
            ("scope", a.scope.name().to_string()),
            ("batch_size", a.batch_size.to_string()),
            ("base_lr", a.base_lr.to_string()),
            ("epochs_max", a.epochs_max.to_string()),
            ("patience", a.patience.to_string()),
            ("ema_alpha", a.ema_alpha.to_string()),
            ("ema_cadence", cadence_name(a.ema_cadence).to_string()),
            ("lora_rank", a.lora_rank.to_string()),
            ("lora_alpha", a.lora_alpha.to_string()),
            ("lora_init_std", a.lora_init_std.to_string()),
            ("weight_decay", a.weight_decay.to_string()),
            ("adam_beta1", a.adam.beta1.to_string()),
            ("adam_beta2", a.adam.beta2.to_string()),
            ("adam_eps", a.adam.eps.to_string()),
            ("lambda_st", a.weights.lambda_st.to_string()),
            ("lambda_w", a.weights.lambda_w.to_string()),
            ("lambda_r", a.weights.lambda_r.to_string()),
            ("margin_delta", a.weights.margin_delta.to_string()),
            ("reg_alpha", a.weights.reg_alpha.to_string()),
            ("epsilon", a.epsilon.to_string()),
            ("hdn_levels", join(a.hdn_levels.iter().map(|l| l.to_string()).collect())),
            ("hdn_scheme", scheme_name(a.hdn_scheme).to_string()),
            ("min_instance_size", a.min_instance_size.to_string()),
            ("detach_student_stats", a.detach_student_stats.to_string()),
            ("axes", join(self.axes.iter().map(|x| x.name().to_string()).collect())),
            ("n_seeds", self.n_seeds.to_string()),
        ];
        kv.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

pub fn absolute(path: &Path) -> Result<PathBuf, CliError> {
    std::path::absolute(path).map_err(|e| CliError::Config(format!("cannot resolve {}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let base = Path::new("/tmp");
        let mut cfg = ExperimentConfig::parse(
            "seed = 7 # trailing comment\n\n# full line\ncorruption = fog\ncomponents = st+wr\nhdn_levels = 1,2\nout = runs/a\n",
            base,
        )
        .unwrap();
        assert_eq!(cfg.adapt.seed, 7);
        assert_eq!(cfg.out.as_deref(), Some(Path::new("/tmp/runs/a")));
        let again = ExperimentConfig::parse(&cfg.to_text(), base).unwrap();
        assert_eq!(again, cfg);
        cfg.seed = 8;
        assert_ne!(cfg.to_text(), again.to_text());
    }

    #[test]
    fn unknown_keys_and_bad_values_are_config_errors() {
        let base = Path::new("/");
        for text in ["colour = red", "seed = -1", "norm_mode = best", "just words", "axes = width"] {
            assert!(matches!(ExperimentConfig::parse(text, base), Err(CliError::Config(_))), "{text}");
        }
    }

    #[test]
    fn validation_catches_patch_mismatch() {
        let cfg = ExperimentConfig::parse("height = 30", Path::new("/")).unwrap();
        assert!(cfg.validate().is_err());
        assert!(ExperimentConfig::default().validate().is_ok());
    }
}
