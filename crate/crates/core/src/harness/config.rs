//! Presets and the JSON-loadable pipeline configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::gait::{CostWeights, GaitGrid};
use crate::optim::AdamConfig;
use crate::ts::{PositiveMode, TsConfig, DEFAULT_NEGATIVES};
use crate::vision::VisionConfig;

use super::probe::ProbeConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

impl Preset {
    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "paper" => Some(Preset::Paper),
            "desk" => Some(Preset::Desk),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub epochs: usize,
    pub batch: usize,
    pub optimizer: AdamConfig,
    /// Global gradient-norm cap; 0 disables clipping.
    pub grad_clip: f64,
    /// Anneal the learning rate to zero along a half cosine over all steps.
    #[serde(default)]
    pub cosine_decay: bool,
}

impl StageConfig {
    fn new(epochs: usize, batch: usize, lr: f64, weight_decay: f64) -> Self {
        Self {
            epochs,
            batch,
            optimizer: AdamConfig {
                lr,
                weight_decay,
                ..AdamConfig::default()
            },
            grad_clip: 0.0,
            cosine_decay: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mae: StageConfig,
    pub ts: StageConfig,
    pub fusion: StageConfig,
    pub head: StageConfig,
    pub concat: StageConfig,
    pub positive_mode: PositiveMode,
    pub negatives: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub preset: Preset,
    pub vision: VisionConfig,
    pub ts: TsConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub weights: CostWeights,
    pub grid: GaitGrid,
    pub probe: ProbeConfig,
    /// Seed of the patch mask used whenever the image encoder runs outside
    /// MAE training.
    pub inference_mask_seed: u64,
}

impl PipelineConfig {
    pub fn paper() -> Self {
        Self {
            preset: Preset::Paper,
            vision: VisionConfig::paper(),
            ts: TsConfig::paper(),
            fusion: FusionConfig::paper(),
            train: TrainConfig {
                mae: StageConfig::new(400, 128, 2.5e-4, 0.05),
                ts: StageConfig::new(10, 256, 1e-4, 0.0),
                fusion: StageConfig::new(100, 1024, 5e-5, 0.01),
                head: StageConfig::new(5, 1024, 1e-4, 0.01),
                concat: StageConfig::new(100, 1024, 5e-5, 0.01),
                positive_mode: PositiveMode::SameSegment,
                negatives: DEFAULT_NEGATIVES,
            },
            weights: CostWeights::default(),
            grid: GaitGrid::default(),
            probe: ProbeConfig::default(),
            inference_mask_seed: 0,
        }
    }

    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            vision: VisionConfig::desk(),
            ts: TsConfig::desk(),
            fusion: FusionConfig::desk(),
            train: TrainConfig {
                mae: StageConfig::new(40, 16, 1e-3, 0.05),
                ts: StageConfig::new(10, 16, 1e-3, 0.0),
                fusion: StageConfig::new(10, 8, 1e-3, 0.01),
                head: StageConfig::new(50, 8, 1e-3, 0.01),
                concat: StageConfig::new(10, 8, 1e-3, 0.01),
                positive_mode: PositiveMode::SameSegment,
                negatives: DEFAULT_NEGATIVES,
            },
            ..Self::paper()
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Paper => Self::paper(),
            Preset::Desk => Self::desk(),
        }
    }

    /// Width of the fused latent.
    pub fn d_v(&self) -> usize {
        self.fusion.d_v
    }

    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.fusion.validate()?;
        self.weights.validate()?;
        let t = &self.train;
        for (name, s) in [
            ("mae", &t.mae),
            ("ts", &t.ts),
            ("fusion", &t.fusion),
            ("head", &t.head),
            ("concat", &t.concat),
        ] {
            if s.batch == 0 || s.optimizer.lr <= 0.0 {
                return Err(Error::Input(format!(
                    "stage {name}: batch and learning rate must be positive"
                )));
            }
        }
        if t.negatives == 0 {
            return Err(Error::Input(
                "at least one negative per triplet is required".into(),
            ));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_hyperparameters() {
        let c = PipelineConfig::paper();
        assert_eq!(c.train.mae.optimizer.lr, 0.00025);
        assert_eq!(c.train.mae.batch, 128);
        assert_eq!(c.train.fusion.optimizer.lr, 0.00005);
        assert_eq!(c.train.fusion.batch, 1024);
        assert_eq!(c.fusion.tau, 0.05);
        assert_eq!(
            [
                c.train.mae.epochs,
                c.train.ts.epochs,
                c.train.fusion.epochs,
                c.train.head.epochs
            ],
            [400, 10, 100, 5]
        );
    }

    #[test]
    fn json_round_trip() {
        let c = PipelineConfig::desk();
        let back: PipelineConfig = serde_json::from_str(&c.to_json()).unwrap();
        assert_eq!(back, c);
        assert!(back.validate().is_ok());
    }
}
