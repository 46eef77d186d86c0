//! Declarative experiment configuration: a human-editable TOML file with
//! sections mirroring the training setup plus the evaluation grid. Unknown
//! keys are rejected, and everything is validated before any compute runs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use deep_jscc::channel::{ChannelKind, ChannelSpec};
use deep_jscc::codec::{Activation, CodecConfig, OutputActivation};
use deep_jscc::evaluation::default_snr_grid;
use deep_jscc::schemes::{LayerPlan, SchemeKind};
use deep_jscc::training::{DatasetConfig, OptimizerConfig, ResidualOptions, TrainConfig};

/// Environment variable overriding the dataset root directory.
pub const DATA_ROOT_ENV: &str = "DEEP_JSCC_DATA_ROOT";

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub output_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    pub scheme: SchemeSection,
    pub layers: LayersSection,
    #[serde(default)]
    pub codec: CodecSection,
    pub channel: ChannelSection,
    #[serde(default)]
    pub optimizer: OptimizerSection,
    #[serde(default)]
    pub dataset: DatasetSection,
    #[serde(default)]
    pub residual: ResidualSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchemeSection {
    pub kind: SchemeKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayersSection {
    /// Channel symbols per layer, base layer first.
    pub bandwidths: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CodecSection {
    pub image_shape: [usize; 3],
    pub layer_widths: Vec<usize>,
    pub kernel_size: usize,
    pub activation: Activation,
    pub output_activation: OutputActivation,
}

impl Default for CodecSection {
    fn default() -> Self {
        Self {
            image_shape: [32, 32, 3],
            layer_widths: vec![16, 32, 32, 32],
            kernel_size: 5,
            activation: Activation::PRelu,
            output_activation: OutputActivation::Sigmoid,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelSection {
    pub kind: ChannelKind,
    pub train_snr_db: f64,
    /// Independent fading gain per layer block (default: one per image).
    #[serde(default)]
    pub per_layer_fading: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerSection {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
}

impl Default for OptimizerSection {
    fn default() -> Self {
        let d = OptimizerConfig::default();
        Self {
            learning_rate: d.learning_rate,
            batch_size: d.batch_size,
            max_epochs: d.max_epochs,
            early_stop_patience: d.early_stop_patience,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetSection {
    pub name: String,
    pub root: Option<PathBuf>,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self { name: "synthetic".into(), root: None }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResidualSection {
    pub m_eval: usize,
}

impl Default for ResidualSection {
    fn default() -> Self {
        Self { m_eval: ResidualOptions::default().m_eval }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationSection {
    pub test_snrs_db: Vec<f64>,
    pub realizations: usize,
}

impl Default for EvaluationSection {
    fn default() -> Self {
        Self { test_snrs_db: default_snr_grid(), realizations: 10 }
    }
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
        toml::from_str(&text).map_err(|e| format!("config {}: {e}", path.display()))
    }

    /// Resolve into a core training config; the env var overrides the
    /// dataset root when set.
    pub fn resolve(&self) -> Result<TrainConfig, String> {
        let [h, w, c] = self.codec.image_shape;
        let source_dim = h * w * c;
        let plan = LayerPlan::new(self.layers.bandwidths.clone(), source_dim);
        let codec = CodecConfig {
            image_shape: (h, w, c),
            total_symbols: plan.total_symbols(),
            layer_widths: self.codec.layer_widths.clone(),
            kernel_size: self.codec.kernel_size,
            activation: self.codec.activation,
            output_activation: self.codec.output_activation,
        };
        let root = std::env::var_os(DATA_ROOT_ENV)
            .map(PathBuf::from)
            .or_else(|| self.dataset.root.clone());
        let config = TrainConfig {
            scheme_kind: self.scheme.kind,
            layer_plan: plan,
            codec,
            channel: ChannelSpec::new(self.channel.kind, self.channel.train_snr_db, self.seed),
            optimizer: OptimizerConfig {
                learning_rate: self.optimizer.learning_rate,
                batch_size: self.optimizer.batch_size,
                max_epochs: self.optimizer.max_epochs,
                early_stop_patience: self.optimizer.early_stop_patience,
            },
            dataset: DatasetConfig { name: self.dataset.name.clone(), root },
            seed: self.seed,
            residual: ResidualOptions { m_eval: self.residual.m_eval },
            per_layer_fading: self.channel.per_layer_fading,
        };
        config.validate().map_err(|e| format!("field {e}"))?;
        if self.evaluation.realizations < 1 {
            return Err("field evaluation.realizations must be >= 1".into());
        }
        if self.evaluation.test_snrs_db.is_empty() {
            return Err("field evaluation.test_snrs_db must not be empty".into());
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }
}
