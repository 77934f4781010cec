//! Run configuration: one TOML file with `[train]`, `[diffusion]`, `[model]`,
//! `[data]` and `[eval]` sections. Missing keys take desk-scale defaults.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleParams;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossKind;

/// Frame in which the training loss compares prediction and target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossFrame {
    /// Every part in its own local frame.
    #[default]
    Part,
    /// Parts moved to the whole-body frame with roots read off the predicted body.
    WholeBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Window length N.
    pub frames: usize,
    pub loss: LossKind,
    pub loss_frame: LossFrame,
    /// Multiplies 3D targets (millimeters) before noising.
    pub data_scale: f64,
    /// Learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    pub seed: u64,
    /// Annotations between training window starts; defaults to `frames`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_stride: Option<usize>,
    /// Write an intermediate checkpoint every this many epochs (0 = only at the end).
    pub checkpoint_every: usize,
}

/// Desk-scale learning rate; see the README for how it was chosen.
pub const DESK_LEARNING_RATE: f64 = 2e-3;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: DESK_LEARNING_RATE,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.1,
            epochs: 20,
            batch_size: 8,
            frames: 9,
            loss: LossKind::Mpjpe,
            loss_frame: LossFrame::Part,
            data_scale: 0.001,
            lr_decay: 0.99,
            seed: 0,
            window_stride: None,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// Full-scale settings (N = 27).
    pub fn paper() -> Self {
        Self {
            learning_rate: 6e-5,
            epochs: 400,
            batch_size: 36,
            frames: 27,
            ..Self::default()
        }
    }

    pub fn stride(&self) -> usize {
        self.window_stride.unwrap_or(self.frames)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v.is_finite() && v > 0.0 {
                Ok(())
            } else {
                Err(Error::Config(format!(
                    "train.{name} must be positive, got {v}"
                )))
            }
        };
        positive("learning_rate", self.learning_rate)?;
        positive("data_scale", self.data_scale)?;
        positive("lr_decay", self.lr_decay)?;
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::Config(format!(
                    "train.{name} must lie in (0, 1), got {b}"
                )));
            }
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!(
                "train.weight_decay must be non-negative, got {}",
                self.weight_decay
            )));
        }
        if self.batch_size == 0 || self.frames == 0 || self.window_stride == Some(0) {
            return Err(Error::Config(
                "train.batch_size, train.frames and train.window_stride must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub hypotheses: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Annotations between evaluation window starts; defaults to N.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub window_stride: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            hypotheses: 20,
            iterations: 10,
            seed: 0,
            window_stride: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub diffusion: ScheduleParams,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// The resolved configuration as JSON, for echoing into outputs.
    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval.hypotheses == 0
            || self.eval.iterations == 0
            || self.eval.window_stride == Some(0)
        {
            return Err(Error::Config(
                "eval.hypotheses, eval.iterations and eval.window_stride must be positive".into(),
            ));
        }
        if self.model.channels.is_empty() {
            return Err(Error::Config("model.channels must not be empty".into()));
        }
        crate::diffusion::NoiseSchedule::try_from(self.diffusion)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_keeps_defaults() {
        let cfg = RunConfig::from_toml("[train]\nepochs = 3\n[eval]\nhypotheses = 2\n").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.eval.hypotheses, 2);
        assert_eq!(cfg.diffusion.steps, 1000);
        assert_eq!(cfg.model.channels, vec![32, 24, 20]);
    }

    #[test]
    fn toml_roundtrip() {
        let mut cfg = RunConfig::default();
        cfg.train.window_stride = Some(3);
        cfg.data.train = Some("d.json".into());
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    }

    #[test]
    fn rejects_bad_values() {
        assert!(RunConfig::from_toml("[train]\nbeta1 = 1.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.0\n").is_err());
        assert!(RunConfig::from_toml("[train]\nbogus = 1\n").is_err());
        assert!(RunConfig::from_toml("[diffusion]\nsteps = 0\n").is_err());
    }

    #[test]
    fn paper_defaults() {
        let p = TrainConfig::paper();
        assert_eq!(
            (p.learning_rate, p.beta1, p.beta2, p.weight_decay),
            (6e-5, 0.9, 0.999, 0.1)
        );
        assert_eq!((p.epochs, p.batch_size, p.frames), (400, 36, 27));
    }
}
