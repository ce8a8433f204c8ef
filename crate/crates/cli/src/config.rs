//! TOML run configuration shared by the data-, training-, and
//! evaluation-facing subcommands.
//!
//! One file describes a complete experiment: the run mode, the model
//! shape, the refinement policy, the training recipe, the synthetic-scene
//! parameters, and the metric conventions. Sections have sensible
//! defaults, so a minimal file is just `mode = "sdr"` plus `[model]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use sdr_core::guidance::GuidanceConfig;
use sdr_core::objectives::{DepthUnits, MetricOptions, RmseNormalization};
use sdr_core::pipeline::{ModelConfig, RefineConfig, ScheduleMode};
use sdr_core::propagation::PropagationConfig;
use sdr_core::trainer::{InitialEstimate, LossKind, SparsityProtocol, TrainConfig};
use sdr_core::{Result, SdrError};

/// What the run does with the initial dense depth estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Refine an externally supplied initial estimate (the primary mode).
    Sdr,
    /// Predict the initial estimate with the model's own depth head.
    Ordinary,
    /// Like `sdr`, but measurements inside a centered hole covering half
    /// the image are removed and metrics are restricted to that hole.
    Holefill,
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,
    /// Base seed for scene generation, training, and evaluation.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub refine: RefineSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub scene: SceneSection,
    #[serde(default)]
    pub metrics: MetricsSection,
}

/// Model shape. `window` and `guidance_channels` are single-sourced here
/// and fed to both the scheduler and the propagation layers.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub window: usize,
    pub channels: usize,
    pub guidance_channels: usize,
    pub hf_channels: usize,
    pub widths: [usize; 3],
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            window: 13,
            channels: 8,
            guidance_channels: 16,
            hf_channels: 8,
            widths: [8, 16, 32],
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineSection {
    pub kappa: f64,
    pub min_iters: usize,
    pub second_layer_iters: usize,
    /// `points` or `lines`.
    pub schedule: ScheduleKind,
    /// Line count for the `lines` schedule.
    pub n_lines: usize,
    pub final_seed_clamp: bool,
    pub mask_update: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ScheduleKind {
    Points,
    Lines,
}

impl Default for RefineSection {
    fn default() -> Self {
        let d = RefineConfig::default();
        RefineSection {
            kappa: d.kappa,
            min_iters: d.min_iters,
            second_layer_iters: d.second_layer_iters,
            schedule: ScheduleKind::Points,
            n_lines: 1,
            final_seed_clamp: d.final_seed_clamp,
            mask_update: d.mask_update,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub steps_per_epoch: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_halving_epochs: Vec<usize>,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// `l1l2` or `silog`.
    pub loss: LossName,
    /// Sparsity protocol: scattered point counts or measurement lines.
    pub protocol: ScheduleKind,
    pub min_points: usize,
    pub max_points: usize,
    pub max_layer1_iters: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LossName {
    L1l2,
    Silog,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        let (min_points, max_points) = match d.protocol {
            SparsityProtocol::Points { min_s, max_s } => (min_s, max_s),
            SparsityProtocol::Lines => (0, 0),
        };
        TrainSection {
            epochs: d.epochs,
            steps_per_epoch: d.steps_per_epoch,
            batch_size: d.batch_size,
            lr: d.lr,
            lr_halving_epochs: d.lr_halving_epochs,
            weight_decay: d.weight_decay,
            beta1: d.beta1,
            beta2: d.beta2,
            loss: LossName::L1l2,
            protocol: ScheduleKind::Points,
            min_points,
            max_points,
            max_layer1_iters: d.max_layer1_iters,
        }
    }
}

/// Synthetic-scene parameters used by `synth`, `train`, and `sweep`.
#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub height: usize,
    pub width: usize,
    /// Object density in `[0, 1]`.
    pub complexity: f64,
    /// Corruption severity of the simulated initial estimate in `[0, 1]`.
    pub severity: f64,
    /// Measurement count written by `synth`.
    pub sparsity: usize,
}

impl Default for SceneSection {
    fn default() -> Self {
        SceneSection {
            height: 32,
            width: 32,
            complexity: 0.5,
            severity: 0.6,
            sparsity: 200,
        }
    }
}

#[derive(Debug, Clone, Deserialize, Serialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// `meters` or `millimeters`.
    pub units: UnitsName,
    /// `sqrt_of_mean` (conventional) or `root_sum_over_count`.
    pub rmse_norm: RmseNormName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum UnitsName {
    Meters,
    Millimeters,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RmseNormName {
    SqrtOfMean,
    RootSumOverCount,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection {
            units: UnitsName::Meters,
            rmse_norm: RmseNormName::SqrtOfMean,
        }
    }
}

impl RunConfig {
    /// Loads and parses a TOML run configuration. All failures here are
    /// configuration errors: the file is part of the invocation.
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| SdrError::Config(format!("{}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| SdrError::Config(format!("{}: {e}", path.display())))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            guidance: GuidanceConfig {
                hf_channels: self.model.hf_channels,
                out_channels: self.model.guidance_channels,
                widths: self.model.widths,
                with_depth_head: self.mode == Mode::Ordinary,
            },
            propagation: PropagationConfig {
                window: self.model.window,
                channels: self.model.channels,
                guidance_channels: self.model.guidance_channels,
            },
        }
    }

    pub fn refine_config(&self) -> RefineConfig {
        RefineConfig {
            window: self.model.window,
            kappa: self.refine.kappa,
            min_iters: self.refine.min_iters,
            second_layer_iters: self.refine.second_layer_iters,
            mode: match self.refine.schedule {
                ScheduleKind::Points => ScheduleMode::Points,
                ScheduleKind::Lines => ScheduleMode::Lines {
                    n_lines: self.refine.n_lines,
                },
            },
            final_seed_clamp: self.refine.final_seed_clamp,
            mask_update: self.refine.mask_update,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.train.epochs,
            steps_per_epoch: self.train.steps_per_epoch,
            batch_size: self.train.batch_size,
            lr: self.train.lr,
            lr_halving_epochs: self.train.lr_halving_epochs.clone(),
            weight_decay: self.train.weight_decay,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            loss: match self.train.loss {
                LossName::L1l2 => LossKind::L1L2,
                LossName::Silog => LossKind::Silog,
            },
            protocol: match self.train.protocol {
                ScheduleKind::Points => SparsityProtocol::Points {
                    min_s: self.train.min_points,
                    max_s: self.train.max_points,
                },
                ScheduleKind::Lines => SparsityProtocol::Lines,
            },
            initial: match self.mode {
                Mode::Ordinary => InitialEstimate::Predicted,
                _ => InitialEstimate::Simulated,
            },
            mde_severity: self.scene.severity,
            max_layer1_iters: self.train.max_layer1_iters,
            seed: self.seed,
        }
    }

    pub fn metric_options(&self) -> MetricOptions {
        MetricOptions {
            units: match self.metrics.units {
                UnitsName::Meters => DepthUnits::Meters,
                UnitsName::Millimeters => DepthUnits::Millimeters,
            },
            rmse_norm: match self.metrics.rmse_norm {
                RmseNormName::SqrtOfMean => RmseNormalization::SqrtOfMean,
                RmseNormName::RootSumOverCount => RmseNormalization::RootSumOverCount,
            },
        }
    }
}
