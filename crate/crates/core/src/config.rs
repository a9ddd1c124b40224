//! Resolved run configuration: dataset, hyperparameters, network, and
//! training sections, with the desk and paper presets.

use crate::conserve::{ConservationSpec, FFamily};
use crate::data::{DatasetConfig, StormParams, PAPER_CAP_MMH};
use crate::diffusion::ScheduleSpec;
use crate::error::CoreError;
use crate::field::SRFactors;
use crate::nets::{PadMode, UNetConfig};
use crate::Result;
use serde::{Deserialize, Serialize};

/// The three retuned quantities: context length L (attention time A_T = T*L),
/// the noise schedule, and the conservation function.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    pub context_len: usize,
    pub schedule: ScheduleSpec,
    pub conservation: ConservationSpec,
}

impl HyperParams {
    pub fn attention_time(&self, t_factor: usize) -> usize {
        t_factor * self.context_len
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSection {
    pub stages: usize,
    pub base_channels: usize,
    pub window_sizes: Vec<usize>,
    pub heads: usize,
    pub step_embed_dim: usize,
    pub temporal_attention: bool,
    pub spatial_attention: bool,
    pub cross_attention: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSection {
    pub lr_init: f64,
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    /// Anchor step between successive samples cut from a tile.
    pub sample_stride: usize,
    /// Ensemble members generated at evaluation time.
    pub eval_members: usize,
    /// Cap on evaluation forecasts (0 = use every validation sample).
    pub eval_max_samples: usize,
    /// Worker threads (0 = library default); 1 forces the sequential path.
    pub threads: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl std::str::FromStr for Preset {
    type Err = CoreError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(CoreError::Config(format!("unknown preset {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub factors: SRFactors,
    pub fold: usize,
    pub data: DatasetConfig,
    pub storm: StormParams,
    pub hyper: HyperParams,
    pub net: NetSection,
    pub train: TrainSection,
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self {
                preset: p,
                seed: 17,
                factors: SRFactors { s: 4, t: 2 },
                fold: 0,
                data: DatasetConfig {
                    h: 40,
                    w: 40,
                    grid_rows: 4,
                    grid_cols: 4,
                    cap_percentile: 99.5,
                    cap_value_mmh: None,
                    normalization_max: None,
                    fold_count: 4,
                    frames_per_tile: 48,
                },
                storm: StormParams::default(),
                hyper: HyperParams {
                    context_len: 3,
                    schedule: ScheduleSpec {
                        j_steps: 200,
                        beta_min: 1e-4,
                        beta_max: 1.5e-2,
                    },
                    conservation: ConservationSpec {
                        family: FFamily::Power,
                        exponent: 0.5,
                        alpha: 1e-2,
                        enabled: true,
                        activation_epoch: 10,
                    },
                },
                net: NetSection {
                    stages: 4,
                    base_channels: 16,
                    window_sizes: vec![3, 3, 1, 1, 1],
                    heads: 4,
                    step_embed_dim: 128,
                    temporal_attention: true,
                    spatial_attention: true,
                    cross_attention: true,
                },
                train: TrainSection {
                    lr_init: 3e-4,
                    epochs: 30,
                    early_stop_patience: 8,
                    batch_size: 8,
                    sample_stride: 2,
                    eval_members: 3,
                    eval_max_samples: 48,
                    threads: 0,
                },
            },
            Preset::Paper => Self {
                preset: p,
                seed: 17,
                factors: SRFactors { s: 10, t: 3 },
                fold: 0,
                data: DatasetConfig {
                    h: 100,
                    w: 100,
                    grid_rows: 4,
                    grid_cols: 4,
                    cap_percentile: 99.5,
                    cap_value_mmh: Some(PAPER_CAP_MMH),
                    normalization_max: Some(PAPER_CAP_MMH),
                    fold_count: 4,
                    frames_per_tile: 720,
                },
                storm: StormParams::default(),
                hyper: HyperParams {
                    // Table row for (10, 3): A_T = 15 so L = 5, beta_max 2e-2,
                    // identity transform with threshold 2e-2.
                    context_len: 5,
                    schedule: ScheduleSpec {
                        j_steps: 1000,
                        beta_min: 1e-4,
                        beta_max: 2e-2,
                    },
                    conservation: ConservationSpec {
                        family: FFamily::Identity,
                        exponent: 1.0,
                        alpha: 2e-2,
                        enabled: true,
                        activation_epoch: 20,
                    },
                },
                net: NetSection {
                    stages: 4,
                    base_channels: 64,
                    window_sizes: vec![3, 3, 1, 1, 1],
                    heads: 4,
                    step_embed_dim: 128,
                    temporal_attention: true,
                    spatial_attention: true,
                    cross_attention: true,
                },
                train: TrainSection {
                    lr_init: 1e-4,
                    epochs: 80,
                    early_stop_patience: 8,
                    batch_size: 12,
                    sample_stride: 1,
                    eval_members: 3,
                    eval_max_samples: 0,
                    threads: 0,
                },
            },
        }
    }

    /// The network configuration implied by the run settings.
    pub fn unet_config(&self) -> UNetConfig {
        UNetConfig {
            stages: self.net.stages,
            base_channels: self.net.base_channels,
            window_sizes: self.net.window_sizes.clone(),
            heads: self.net.heads,
            context_len: self.hyper.context_len,
            t_frames: self.factors.t,
            j_steps: self.hyper.schedule.j_steps,
            step_embed_dim: self.net.step_embed_dim,
            temporal_attention: self.net.temporal_attention,
            spatial_attention: self.net.spatial_attention,
            cross_attention: self.net.cross_attention,
            pad: PadMode::Zero,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.data.validate()?;
        self.hyper.conservation.validate()?;
        self.unet_config().validate()?;
        if self.data.h % self.factors.s != 0 || self.data.w % self.factors.s != 0 {
            return Err(CoreError::Config(format!(
                "spatial factor {} must divide the tile shape {}x{}",
                self.factors.s, self.data.h, self.data.w
            )));
        }
        if self.train.lr_init <= 0.0 {
            return Err(CoreError::Config("lr_init must be positive".into()));
        }
        if self.train.early_stop_patience >= self.train.epochs {
            return Err(CoreError::Config("patience must be below the epoch count".into()));
        }
        if self.fold >= self.data.fold_count {
            return Err(CoreError::Config(format!(
                "fold {} outside 0..{}",
                self.fold, self.data.fold_count
            )));
        }
        if self.train.batch_size == 0 || self.train.eval_members == 0 {
            return Err(CoreError::Config("batch size and eval members must be >= 1".into()));
        }
        Ok(())
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(json)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}
