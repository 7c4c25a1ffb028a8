//! Experiment configuration: a TOML file with nested sections, every field
//! defaulted, unknown keys rejected so typos fail loudly instead of
//! silently running the wrong experiment.
//!
//! The file looks like:
//!
//! ```toml
//! seed = 0
//!
//! [dataset]
//! scenario = "task-shift"   # or "domain-shift"
//! num_tasks = 3
//! num_samples = 512
//! input = [1, 8, 8]
//! correlation = 0.8
//! noise = 0.05
//! split = [0.7, 0.15, 0.15]
//!
//! [model]
//! conv_channels = [8]
//! pool = true
//! head_hidden = 16          # 0 disables the hidden layer
//!
//! [method]
//! name = "repmtl"           # ew|uw|dwa|gradnorm|pcgrad|mgda|cagrad|repmtl
//!
//! [regularizer]
//! lambda_tsr = 0.9
//! lambda_csa = 0.9
//!
//! [train]
//! epochs = 8
//! batch_size = 32
//! learning_rate = 1e-4
//!
//! [output]
//! dir = "run"
//! ```
//!
//! Each struct below documents its defaults on the fields.

use crate::alignment::{AnchorTaskReduction, CsaSettings, TaskReduction};
use crate::baselines::{Method, MtoState};
use crate::benchmarks::{Scenario, SyntheticSpec, TaskKind};
use crate::error::{Error, Result};
use crate::model::{EncoderLayer, HeadSpec, ModelSpec};
use crate::objective::{OptimizerKind, OptimizerSettings, RegularizerSettings, TrainSettings};
use crate::scalar::Real;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Synthetic-data section.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// `"task-shift"` (default) or `"domain-shift"`.
    pub scenario: String,
    /// Number of tasks; default 3.
    pub num_tasks: usize,
    /// Samples before splitting; default 512.
    pub num_samples: usize,
    /// Input shape `[channels, height, width]`; default `[1, 8, 8]`.
    pub input: [usize; 3],
    /// Inter-task relatedness in `[0, 1]`; default 0.8.
    pub correlation: f64,
    /// Target noise scale; default 0.05.
    pub noise: f64,
    /// Generation seed; default (absent) reuses the run seed.
    pub seed: Option<u64>,
    /// Train/validation/test fractions; default `[0.7, 0.15, 0.15]`.
    pub split: [f64; 3],
    /// Shuffle seed for the split; default (absent) is the data seed + 1.
    pub split_seed: Option<u64>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            scenario: "task-shift".to_string(),
            num_tasks: 3,
            num_samples: 512,
            input: [1, 8, 8],
            correlation: 0.8,
            noise: 0.05,
            seed: None,
            split: [0.7, 0.15, 0.15],
            split_seed: None,
        }
    }
}

/// Architecture section.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Output channels of each 3x3 same-padded conv (ReLU after each);
    /// default `[8]`.
    pub conv_channels: Vec<usize>,
    /// Append one 2x2 average pool after the convs; default true.
    pub pool: bool,
    /// Hidden units in every task head, 0 for a single linear layer;
    /// default 16.
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            conv_channels: vec![8],
            pool: true,
            head_hidden: 16,
        }
    }
}

/// Optimization-method section.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct MethodConfig {
    /// One of `ew`, `uw`, `dwa`, `gradnorm`, `pcgrad`, `mgda`, `cagrad`,
    /// `repmtl`; default `repmtl`.
    pub name: String,
    /// Softmax temperature for loss-ratio weighting; default 2.0.
    pub dwa_temperature: f64,
    /// Restoring-force exponent for norm balancing; default 1.5.
    pub gradnorm_alpha: f64,
    /// Step size of the norm-balancing weight update; default 0.025.
    pub gradnorm_lr: f64,
    /// Convergence-ball radius factor; default 0.4.
    pub cagrad_c: f64,
}

impl Default for MethodConfig {
    fn default() -> Self {
        MethodConfig {
            name: "repmtl".to_string(),
            dwa_temperature: 2.0,
            gradnorm_alpha: 1.5,
            gradnorm_lr: 0.025,
            cagrad_c: 0.4,
        }
    }
}

/// Saliency-regularizer section.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegularizerConfig {
    /// Entropy-penalty coefficient; default 0.9.
    pub lambda_tsr: f64,
    /// Alignment-penalty coefficient; default 0.9.
    pub lambda_csa: f64,
    /// Contrastive temperature; default 0.5.
    pub tau: f64,
    /// Saliency-distribution smoothing; default 1e-12.
    pub epsilon: f64,
    /// Treat saliencies as constants in the regularizers; default false.
    pub detach_saliency: bool,
    /// Add the positive pair to the contrastive denominator, making the
    /// loss non-negative; default false.
    pub include_positive: bool,
    /// `"mean"` (default) or `"sum"` over tasks in the alignment loss.
    pub task_reduction: String,
    /// `"mean"` (default) or `"concat-then-mean"` anchor construction.
    pub anchor_reduction: String,
}

impl Default for RegularizerConfig {
    fn default() -> Self {
        RegularizerConfig {
            lambda_tsr: 0.9,
            lambda_csa: 0.9,
            tau: 0.5,
            epsilon: 1e-12,
            detach_saliency: false,
            include_positive: false,
            task_reduction: "mean".to_string(),
            anchor_reduction: "mean".to_string(),
        }
    }
}

/// Training-loop section.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Passes over the training split; default 8. 0 evaluates without
    /// training.
    pub epochs: usize,
    /// Minibatch size; default 32.
    pub batch_size: usize,
    /// Step size; default 1e-4.
    pub learning_rate: f64,
    /// Epoch (1-based) at whose start the learning rate halves, 0 for
    /// never; default 0.
    pub halve_lr_at: usize,
    /// `"adam"` (default) or `"sgd"`.
    pub optimizer: String,
    /// Decoupled weight decay; default 1e-5.
    pub weight_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 32,
            learning_rate: 1e-4,
            halve_lr_at: 0,
            optimizer: "adam".to_string(),
            weight_decay: 1e-5,
        }
    }
}

/// Artifact-emission section.
#[derive(Debug, Clone, PartialEq, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    /// Directory (under the output root) receiving CSV/JSON/SVG files;
    /// default `"run"`.
    pub dir: String,
    /// Also draw SVG charts; default true.
    pub svg: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: "run".to_string(),
            svg: true,
        }
    }
}

/// One experiment, fully specified. Every field has a default, so `{}` is
/// a valid config; unknown keys anywhere are rejected.
#[derive(Debug, Clone, PartialEq, Default, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed for data (unless overridden), init and shuffling;
    /// default 0.
    pub seed: u64,
    pub dataset: DatasetConfig,
    pub model: ModelConfig,
    pub method: MethodConfig,
    pub regularizer: RegularizerConfig,
    pub train: TrainConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    /// Parses TOML text, rejecting unknown keys and invalid field values.
    pub fn parse_toml(text: &str) -> Result<RunConfig> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            path: "<inline>".to_string(),
            detail: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Reads and parses a config file.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let config: RunConfig = toml::from_str(&text).map_err(|e| Error::Config {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Field-level checks beyond what deserialization enforces.
    pub fn validate(&self) -> Result<()> {
        Scenario::parse(&self.dataset.scenario)?;
        self.method()?;
        self.optimizer_kind()?;
        self.task_reduction()?;
        self.anchor_reduction()?;
        let bad = |detail: String| Error::Config {
            path: "<config>".to_string(),
            detail,
        };
        if self.dataset.num_tasks < 2 {
            return Err(bad("dataset.num_tasks must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.dataset.correlation) {
            return Err(bad(format!(
                "dataset.correlation {} outside [0, 1]",
                self.dataset.correlation
            )));
        }
        if self.dataset.noise < 0.0 {
            return Err(bad("dataset.noise must be non-negative".into()));
        }
        let frac_sum: f64 = self.dataset.split.iter().sum();
        if self.dataset.split.iter().any(|&f| f < 0.0) || (frac_sum - 1.0).abs() > 1e-9 {
            return Err(bad(format!(
                "dataset.split must be non-negative and sum to 1, got {:?}",
                self.dataset.split
            )));
        }
        if self.model.conv_channels.is_empty() {
            return Err(bad("model.conv_channels must name at least one layer".into()));
        }
        if self.model.conv_channels.iter().any(|&c| c == 0) {
            return Err(bad("model.conv_channels entries must be positive".into()));
        }
        if self.regularizer.lambda_tsr < 0.0 || self.regularizer.lambda_csa < 0.0 {
            return Err(bad("regularizer coefficients must be non-negative".into()));
        }
        if self.regularizer.tau <= 0.0 {
            return Err(bad("regularizer.tau must be positive".into()));
        }
        if self.regularizer.epsilon <= 0.0 {
            return Err(bad("regularizer.epsilon must be positive".into()));
        }
        if self.train.batch_size == 0 {
            return Err(bad("train.batch_size must be positive".into()));
        }
        if self.train.learning_rate <= 0.0 {
            return Err(bad("train.learning_rate must be positive".into()));
        }
        if self.train.weight_decay < 0.0 {
            return Err(bad("train.weight_decay must be non-negative".into()));
        }
        if self.method.dwa_temperature <= 0.0 {
            return Err(bad("method.dwa_temperature must be positive".into()));
        }
        if self.method.gradnorm_lr <= 0.0 {
            return Err(bad("method.gradnorm_lr must be positive".into()));
        }
        if self.method.cagrad_c < 0.0 {
            return Err(bad("method.cagrad_c must be non-negative".into()));
        }
        if self.output.dir.is_empty() {
            return Err(bad("output.dir must be non-empty".into()));
        }
        Ok(())
    }

    pub fn method(&self) -> Result<Method> {
        Method::parse(&self.method.name)
    }

    pub fn optimizer_kind(&self) -> Result<OptimizerKind> {
        match self.train.optimizer.as_str() {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::Config {
                path: "<config>".to_string(),
                detail: format!("train.optimizer '{other}' is not adam or sgd"),
            }),
        }
    }

    pub fn task_reduction(&self) -> Result<TaskReduction> {
        match self.regularizer.task_reduction.as_str() {
            "mean" => Ok(TaskReduction::Mean),
            "sum" => Ok(TaskReduction::Sum),
            other => Err(Error::Config {
                path: "<config>".to_string(),
                detail: format!("regularizer.task_reduction '{other}' is not mean or sum"),
            }),
        }
    }

    pub fn anchor_reduction(&self) -> Result<AnchorTaskReduction> {
        match self.regularizer.anchor_reduction.as_str() {
            "mean" => Ok(AnchorTaskReduction::Mean),
            "concat-then-mean" => Ok(AnchorTaskReduction::ConcatThenMean),
            other => Err(Error::Config {
                path: "<config>".to_string(),
                detail: format!(
                    "regularizer.anchor_reduction '{other}' is not mean or concat-then-mean"
                ),
            }),
        }
    }

    /// The dataset seed: explicit value or the run seed.
    pub fn data_seed(&self) -> u64 {
        self.dataset.seed.unwrap_or(self.seed)
    }

    /// The split-shuffle seed: explicit value or the data seed + 1.
    pub fn split_seed(&self) -> u64 {
        self.dataset
            .split_seed
            .unwrap_or_else(|| self.data_seed().wrapping_add(1))
    }

    /// The generation spec this config describes.
    pub fn synthetic_spec(&self) -> Result<SyntheticSpec> {
        Ok(SyntheticSpec {
            scenario: Scenario::parse(&self.dataset.scenario)?,
            num_tasks: self.dataset.num_tasks,
            num_samples: self.dataset.num_samples,
            input: (
                self.dataset.input[0],
                self.dataset.input[1],
                self.dataset.input[2],
            ),
            correlation: self.dataset.correlation,
            noise: self.dataset.noise,
            seed: self.data_seed(),
        })
    }

    /// Builds the architecture spec for the given task layout. Pass a
    /// single element to build one single-task model.
    pub fn model_spec(&self, task_kinds: &[TaskKind]) -> Result<ModelSpec> {
        let mut encoder = Vec::new();
        for &c in &self.model.conv_channels {
            encoder.push(EncoderLayer::Conv3x3 {
                out_channels: c,
                pad: 1,
            });
            encoder.push(EncoderLayer::Relu);
        }
        if self.model.pool {
            encoder.push(EncoderLayer::AvgPool2);
        }
        let hidden = if self.model.head_hidden == 0 {
            None
        } else {
            Some(self.model.head_hidden)
        };
        let heads = task_kinds
            .iter()
            .map(|k| HeadSpec {
                hidden,
                out: k.head_out(),
            })
            .collect();
        let tasks = task_kinds.iter().map(|k| k.descriptor()).collect();
        Ok(ModelSpec {
            input: (
                self.dataset.input[0],
                self.dataset.input[1],
                self.dataset.input[2],
            ),
            encoder,
            heads,
            tasks,
        })
    }

    /// Method state with the configured hyperparameters applied.
    pub fn mto_state<F: Real>(&self, num_tasks: usize) -> Result<MtoState<F>> {
        let mut state = MtoState::new(self.method()?, num_tasks)?;
        state.dwa_temp = F::from_f64_lit(self.method.dwa_temperature);
        state.gradnorm_alpha = F::from_f64_lit(self.method.gradnorm_alpha);
        state.gradnorm_lr = F::from_f64_lit(self.method.gradnorm_lr);
        state.cagrad_c = F::from_f64_lit(self.method.cagrad_c);
        Ok(state)
    }

    /// Regularizer settings; zeroed coefficients unless the method is the
    /// saliency-regularized one, so every other method trains the plain
    /// weighted objective.
    pub fn regularizer_settings<F: Real>(&self) -> Result<RegularizerSettings<F>> {
        let active = self.method()? == Method::RepMtl;
        Ok(RegularizerSettings {
            lambda_tsr: if active {
                F::from_f64_lit(self.regularizer.lambda_tsr)
            } else {
                F::zero()
            },
            lambda_csa: if active {
                F::from_f64_lit(self.regularizer.lambda_csa)
            } else {
                F::zero()
            },
            epsilon: F::from_f64_lit(self.regularizer.epsilon),
            csa: CsaSettings {
                tau: F::from_f64_lit(self.regularizer.tau),
                include_positive_in_denominator: self.regularizer.include_positive,
                task_reduction: self.task_reduction()?,
                anchor_reduction: self.anchor_reduction()?,
            },
            detach_saliency: self.regularizer.detach_saliency,
        })
    }

    /// Optimizer settings at the configured (not yet halved) rate.
    pub fn optimizer_settings<F: Real>(&self) -> Result<OptimizerSettings<F>> {
        Ok(OptimizerSettings {
            kind: self.optimizer_kind()?,
            learning_rate: F::from_f64_lit(self.train.learning_rate),
            weight_decay: F::from_f64_lit(self.train.weight_decay),
            ..OptimizerSettings::default()
        })
    }

    /// Combined step settings.
    pub fn train_settings<F: Real>(&self) -> Result<TrainSettings<F>> {
        Ok(TrainSettings {
            optimizer: self.optimizer_settings()?,
            regularizer: self.regularizer_settings()?,
        })
    }

    /// Canonical TOML rendering (used to record the config beside results).
    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config {
            path: "<serialize>".to_string(),
            detail: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_all_defaults() {
        let config = RunConfig::parse_toml("").unwrap();
        assert_eq!(config, RunConfig::default());
        assert_eq!(config.seed, 0);
        assert_eq!(config.dataset.num_tasks, 3);
        assert_eq!(config.dataset.correlation, 0.8);
        assert_eq!(config.method.name, "repmtl");
        assert_eq!(config.regularizer.lambda_tsr, 0.9);
        assert_eq!(config.regularizer.tau, 0.5);
        assert_eq!(config.train.epochs, 8);
        assert_eq!(config.train.learning_rate, 1e-4);
        config.validate().unwrap();
    }

    #[test]
    fn unknown_keys_are_rejected_at_any_level() {
        assert!(RunConfig::parse_toml("bogus = 1").is_err());
        assert!(RunConfig::parse_toml("[dataset]\nnum_task = 3").is_err());
        assert!(RunConfig::parse_toml("[train]\nlearning_rte = 0.1").is_err());
        assert!(RunConfig::parse_toml("[regularizer]\nlambda = 0.9").is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        assert!(RunConfig::parse_toml("[method]\nname = \"sgd\"").is_err());
        assert!(RunConfig::parse_toml("[dataset]\ncorrelation = 1.5").is_err());
        assert!(RunConfig::parse_toml("[dataset]\nsplit = [0.5, 0.2, 0.2]").is_err());
        assert!(RunConfig::parse_toml("[train]\noptimizer = \"lion\"").is_err());
        assert!(RunConfig::parse_toml("[train]\nlearning_rate = 0.0").is_err());
        assert!(RunConfig::parse_toml("[regularizer]\ntau = -0.5").is_err());
        assert!(RunConfig::parse_toml("[regularizer]\ntask_reduction = \"max\"").is_err());
        assert!(RunConfig::parse_toml("[dataset]\nscenario = \"label-shift\"").is_err());
    }

    #[test]
    fn overrides_apply_and_round_trip() {
        let text = r#"
seed = 7

[dataset]
scenario = "domain-shift"
num_tasks = 4
correlation = 0.25
seed = 99

[method]
name = "cagrad"
cagrad_c = 0.7

[train]
epochs = 2
optimizer = "sgd"
halve_lr_at = 2
"#;
        let config = RunConfig::parse_toml(text).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.data_seed(), 99);
        assert_eq!(config.split_seed(), 100);
        assert_eq!(config.method().unwrap(), Method::CaGrad);
        assert_eq!(config.method.cagrad_c, 0.7);
        assert_eq!(config.optimizer_kind().unwrap(), OptimizerKind::Sgd);
        let rendered = config.to_toml().unwrap();
        let back = RunConfig::parse_toml(&rendered).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn derived_settings_follow_the_method() {
        let repmtl = RunConfig::parse_toml("[method]\nname = \"repmtl\"").unwrap();
        let settings: RegularizerSettings<f64> = repmtl.regularizer_settings().unwrap();
        assert_eq!(settings.lambda_tsr, 0.9);
        assert_eq!(settings.lambda_csa, 0.9);
        let ew = RunConfig::parse_toml("[method]\nname = \"ew\"").unwrap();
        let settings: RegularizerSettings<f64> = ew.regularizer_settings().unwrap();
        assert_eq!(settings.lambda_tsr, 0.0);
        assert_eq!(settings.lambda_csa, 0.0);
    }

    #[test]
    fn model_spec_matches_task_layout() {
        let config = RunConfig::parse_toml("[model]\nconv_channels = [4, 6]\nhead_hidden = 0").unwrap();
        let kinds = [
            TaskKind::Regression { dim: 1 },
            TaskKind::Classification { classes: 2 },
        ];
        let spec = config.model_spec(&kinds).unwrap();
        assert_eq!(spec.encoder.len(), 5);
        assert_eq!(spec.heads.len(), 2);
        assert_eq!(spec.heads[0].hidden, None);
        assert_eq!(spec.heads[0].out, 1);
        assert_eq!(spec.heads[1].out, 2);
        assert_eq!(spec.tasks[0].loss, crate::model::LossKind::SquaredError);
        assert_eq!(spec.tasks[1].loss, crate::model::LossKind::CrossEntropy);
    }

    #[test]
    fn mto_state_carries_hyperparameters() {
        let config = RunConfig::parse_toml(
            "[method]\nname = \"dwa\"\ndwa_temperature = 3.5\ngradnorm_alpha = 0.5",
        )
        .unwrap();
        let state: MtoState<f64> = config.mto_state(3).unwrap();
        assert_eq!(state.method, Method::Dwa);
        assert_eq!(state.dwa_temp, 3.5);
        assert_eq!(state.gradnorm_alpha, 0.5);
        assert_eq!(state.num_tasks, 3);
    }
}
