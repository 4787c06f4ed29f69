use serde::{Deserialize, Serialize};

use crate::augment::AugmentConfig;
use crate::bandforge::{BandSelection, Preset};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::metrics::Averaging;
use crate::segnet::ModelConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    #[default]
    Adam,
}

/// Everything that determines a training run. Serialized as YAML with these field names.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    /// One of the named presets (`none`, `15-17`, ..., `15-26`).
    pub band_selection: Preset,
    pub model: ModelConfig,
    /// Split folds so each holds a near-equal share of landslide-bearing samples.
    pub stratify_folds: bool,
    /// How evaluation scores are aggregated over images.
    pub averaging: Averaging,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let band_selection = Preset::Bands15To23;
        TrainConfig {
            epochs: 65,
            batch_size: 16,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            seed: 42,
            loss: LossConfig::default(),
            augment: AugmentConfig::default(),
            band_selection,
            model: ModelConfig::best(BandSelection::preset(band_selection).output_channels()),
            stratify_folds: false,
            averaging: Averaging::Micro,
        }
    }
}

impl TrainConfig {
    pub fn selection(&self) -> BandSelection {
        BandSelection::preset(self.band_selection)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate must be > 0, got {}", self.learning_rate)));
        }
        let channels = self.selection().output_channels();
        if self.model.input_channels != channels {
            return Err(Error::InvalidConfig(format!(
                "model.input_channels is {} but band_selection {} yields {channels} bands",
                self.model.input_channels,
                self.band_selection.name()
            )));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    pub fn from_yaml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_yaml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_yaml(&self) -> String {
        serde_yaml::to_string(self).expect("config serializes")
    }
}
