//! Experiment configuration: a TOML file with `[world]`, `[train]`, and
//! `[objective]` sections plus a top-level seed and output directory.
//! Parsing rejects unknown keys; validation resolves the objective section
//! (including the `hypo_gamma` / `hypo_tau` spellings, `tau = 1/alpha`)
//! into core types.
//!
//! All derived randomness comes from the top-level seed: world generation
//! uses `seed`, pair sampling `seed+1`, the train/eval split `seed+2`, the
//! training shuffle `seed+3`, win-matrix prompt draws `seed+4`, and
//! log-linear feature maps `seed+5`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use hypo_core::datagen::WorldConfig;
use hypo_core::math::HyperParams;
use hypo_core::objectives::ObjectiveKind;
use hypo_core::trainer::TrainConfig;

use crate::CliError;

pub const VALID_OBJECTIVES: &[&str] = &["dpo", "ref_free", "hypo", "dpo_sft"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub world: WorldSection,
    pub train: TrainSection,
    pub objective: ObjectiveSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorldSection {
    pub n_prompts: usize,
    pub n_responses: usize,
    #[serde(default)]
    pub ref_misalignment: f64,
    /// When set, bisect `ref_misalignment` until the measured pessimistic
    /// fraction lands within `pessimism_tolerance` of this target.
    #[serde(default)]
    pub target_pessimism: Option<f64>,
    #[serde(default = "default_pessimism_tolerance")]
    pub pessimism_tolerance: f64,
    pub n_pairs: usize,
    #[serde(default)]
    pub label_noise: f64,
    #[serde(default = "default_eval_fraction")]
    pub eval_fraction: f64,
    #[serde(default = "default_one")]
    pub reward_std: f64,
    #[serde(default = "default_one")]
    pub gibbs_tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyClass {
    Tabular,
    Loglinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    #[serde(default = "default_policy")]
    pub policy: PolicyClass,
    /// Log-linear feature dimension; ignored for tabular policies.
    #[serde(default = "default_feature_dim")]
    pub feature_dim: usize,
    /// Defaults by policy class when omitted: 1e-2 tabular, 1e-3 log-linear.
    #[serde(default)]
    pub peak_lr: Option<f64>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_warmup")]
    pub warmup_fraction: f64,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_epsilon")]
    pub adam_epsilon: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_eval_every")]
    pub eval_every: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            policy: default_policy(),
            feature_dim: default_feature_dim(),
            peak_lr: None,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            warmup_fraction: default_warmup(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_epsilon: default_epsilon(),
            weight_decay: 0.0,
            grad_clip: None,
            eval_every: default_eval_every(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveSection {
    /// One of `dpo`, `ref_free`, `hypo`, `dpo_sft`.
    pub kind: String,
    #[serde(default = "default_one")]
    pub beta: f64,
    /// Clip threshold; `hypo_gamma` is the equivalent spelling.
    #[serde(default, alias = "hypo_gamma")]
    pub gamma: f64,
    /// Softplus sharpness; mutually exclusive with `hypo_tau`.
    #[serde(default)]
    pub alpha: Option<f64>,
    /// Smoothing temperature `tau = 1/alpha`; 0 means hard clipping,
    /// anything positive selects the soft variant.
    #[serde(default)]
    pub hypo_tau: Option<f64>,
    /// Home-advantage margin (hybrid objectives only).
    #[serde(default)]
    pub h: f64,
    #[serde(default)]
    pub lambda_sft: f64,
}

fn default_one() -> f64 {
    1.0
}
fn default_pessimism_tolerance() -> f64 {
    0.02
}
fn default_eval_fraction() -> f64 {
    0.1
}
fn default_policy() -> PolicyClass {
    PolicyClass::Tabular
}
fn default_feature_dim() -> usize {
    32
}
fn default_epochs() -> usize {
    1
}
fn default_batch_size() -> usize {
    128
}
fn default_warmup() -> f64 {
    0.10
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_eval_every() -> usize {
    10
}

/// Everything a command needs after validation, in core types.
#[derive(Debug, Clone)]
pub struct ResolvedObjective {
    pub kind: ObjectiveKind,
    pub hp: HyperParams,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("cannot read config {}: {e}", path.display())))?;
        let config: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("invalid config {}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.world_config()
            .validate()
            .map_err(CliError::from_core)?;
        if let Some(t) = self.world.target_pessimism {
            if !(0.0..1.0).contains(&t) || t <= 0.0 {
                return Err(CliError::Config(format!(
                    "world.target_pessimism must be in (0, 1), got {t}"
                )));
            }
        }
        if self.world.n_pairs < 2 {
            return Err(CliError::Config(format!(
                "world.n_pairs must be >= 2 (a train/eval split needs both sides), got {}",
                self.world.n_pairs
            )));
        }
        if !(0.0..1.0).contains(&self.world.label_noise) {
            return Err(CliError::Config(format!(
                "world.label_noise must be in [0, 1), got {}",
                self.world.label_noise
            )));
        }
        if !(self.world.eval_fraction > 0.0 && self.world.eval_fraction < 1.0) {
            return Err(CliError::Config(format!(
                "world.eval_fraction must be in (0, 1), got {}",
                self.world.eval_fraction
            )));
        }
        if self.train.policy == PolicyClass::Loglinear && self.train.feature_dim == 0 {
            return Err(CliError::Config(
                "train.feature_dim must be >= 1 for loglinear policies".into(),
            ));
        }
        self.resolved_objective()?;
        self.train_config()?;
        Ok(())
    }

    pub fn world_config(&self) -> WorldConfig {
        WorldConfig {
            n_prompts: self.world.n_prompts,
            n_responses: self.world.n_responses,
            ref_misalignment: self.world.ref_misalignment,
            reward_std: self.world.reward_std,
            gibbs_tau: self.world.gibbs_tau,
            seed: self.seed,
        }
    }

    pub fn sampling_seed(&self) -> u64 {
        self.seed.wrapping_add(1)
    }

    pub fn split_seed(&self) -> u64 {
        self.seed.wrapping_add(2)
    }

    pub fn train_seed(&self) -> u64 {
        self.seed.wrapping_add(3)
    }

    pub fn win_matrix_seed(&self) -> u64 {
        self.seed.wrapping_add(4)
    }

    pub fn feature_seed(&self) -> u64 {
        self.seed.wrapping_add(5)
    }

    /// Resolve the objective section into core types, applying the
    /// `hypo_tau` semantics: 0 keeps the hard clip, positive values select
    /// the soft variant with `alpha = 1/tau`.
    pub fn resolved_objective(&self) -> Result<ResolvedObjective, CliError> {
        resolve_objective(&self.objective)
    }

    pub fn train_config(&self) -> Result<TrainConfig, CliError> {
        let resolved = self.resolved_objective()?;
        let peak_lr = self.train.peak_lr.unwrap_or(match self.train.policy {
            PolicyClass::Tabular => 1e-2,
            PolicyClass::Loglinear => 1e-3,
        });
        let mut cfg = TrainConfig::new(resolved.kind, resolved.hp, peak_lr, self.train_seed())
            .map_err(CliError::from_core)?;
        cfg.epochs = self.train.epochs;
        cfg.batch_size = self.train.batch_size;
        cfg.warmup_fraction = self.train.warmup_fraction;
        cfg.adam_beta1 = self.train.adam_beta1;
        cfg.adam_beta2 = self.train.adam_beta2;
        cfg.adam_epsilon = self.train.adam_epsilon;
        cfg.weight_decay = self.train.weight_decay;
        cfg.grad_clip = self.train.grad_clip;
        cfg.eval_every = self.train.eval_every;
        cfg.validate().map_err(CliError::from_core)?;
        Ok(cfg)
    }

    /// Stable short name for run directories: objective kind plus seed.
    pub fn run_name(&self) -> Result<String, CliError> {
        Ok(format!(
            "{}_seed{}",
            self.resolved_objective()?.kind,
            self.seed
        ))
    }

    pub fn config_hash(&self) -> String {
        hypo_core::datagen::config_hash(self)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serialization cannot fail")
    }
}

/// Resolve an objective description (config section or CLI flags) into the
/// core kind plus hyperparameters.
pub fn resolve_objective(section: &ObjectiveSection) -> Result<ResolvedObjective, CliError> {
    if section.alpha.is_some() && section.hypo_tau.is_some() {
        return Err(CliError::Config(
            "objective.alpha and objective.hypo_tau are mutually exclusive (tau = 1/alpha)".into(),
        ));
    }
    let mut hp = HyperParams::new(section.beta)
        .and_then(|hp| hp.with_gamma(section.gamma))
        .and_then(|hp| hp.with_home_advantage(section.h))
        .and_then(|hp| hp.with_lambda_sft(section.lambda_sft))
        .map_err(CliError::from_core)?;

    let mut smoothing = false;
    if let Some(alpha) = section.alpha {
        hp = hp.with_alpha(alpha).map_err(CliError::from_core)?;
        smoothing = true;
    } else if let Some(tau) = section.hypo_tau {
        if tau < 0.0 || !tau.is_finite() {
            return Err(CliError::Config(format!(
                "objective.hypo_tau must be finite and >= 0, got {tau}"
            )));
        }
        if tau > 0.0 {
            hp = hp.with_tau(tau).map_err(CliError::from_core)?;
            smoothing = true;
        }
    }

    let kind = match section.kind.as_str() {
        "dpo" => ObjectiveKind::Dpo,
        "ref_free" => ObjectiveKind::RefFree,
        "hypo" => {
            if smoothing {
                ObjectiveKind::HypoSoft
            } else {
                ObjectiveKind::HypoHard
            }
        }
        "dpo_sft" => {
            if section.lambda_sft <= 0.0 {
                return Err(CliError::Config(
                    "objective.lambda_sft must be > 0 for dpo_sft (0 is plain dpo)".into(),
                ));
            }
            ObjectiveKind::DpoPlusSft
        }
        other => {
            return Err(CliError::Config(format!(
                "unknown objective kind {other:?}; valid kinds: {}",
                VALID_OBJECTIVES.join(", ")
            )));
        }
    };
    Ok(ResolvedObjective { kind, hp })
}

/// Compare leg configs must agree everywhere outside `[objective]`.
pub fn check_compare_compatible(configs: &[ExperimentConfig]) -> Result<(), CliError> {
    let first = &configs[0];
    for (i, cfg) in configs.iter().enumerate().skip(1) {
        if cfg.seed != first.seed {
            return Err(CliError::Config(format!(
                "compare configs must share the seed: config #{} has {}, expected {}",
                i + 1,
                cfg.seed,
                first.seed
            )));
        }
        let mut masked = cfg.clone();
        masked.objective = first.objective.clone();
        if masked != *first {
            return Err(CliError::Config(format!(
                "compare configs may differ only in [objective]: config #{} diverges elsewhere",
                i + 1
            )));
        }
    }
    Ok(())
}
