//! Shared fixtures for the pipeline benchmarks.

use scalesr_core::data::{synthesize_storms, StormParams, Tile};
use scalesr_core::field::{Field, SRFactors};
use scalesr_core::nets::{ModelWeights, NetRole, PadMode, UNetConfig};
use scalesr_core::tensor::Tensor;

pub fn storm_tile(h: usize, w: usize, frames: usize) -> Tile {
    synthesize_storms(42, frames, (h, w), &StormParams::default()).expect("tile")
}

pub fn hr_field(h: usize, w: usize) -> Field {
    storm_tile(h, w, 1).hr_frames.remove(0)
}

pub fn desk_unet_config() -> UNetConfig {
    UNetConfig {
        stages: 4,
        base_channels: 16,
        window_sizes: vec![3, 3, 1, 1, 1],
        heads: 4,
        context_len: 3,
        t_frames: 2,
        j_steps: 200,
        step_embed_dim: 128,
        temporal_attention: true,
        spatial_attention: true,
        cross_attention: true,
        pad: PadMode::Zero,
    }
}

pub fn det_net() -> ModelWeights {
    ModelWeights::new(&desk_unet_config(), NetRole::Det, 7).expect("net")
}

pub fn dif_net() -> ModelWeights {
    ModelWeights::new(&desk_unet_config(), NetRole::Dif, 7).expect("net")
}

pub fn det_input(cfg: &UNetConfig, h: usize, w: usize) -> Tensor {
    let tile = storm_tile(h, w, cfg.context_len);
    let mut data = Vec::with_capacity((cfg.context_len + 1) * h * w);
    for f in &tile.hr_frames {
        data.extend_from_slice(f.values());
    }
    data.extend_from_slice(tile.topography.values());
    Tensor::new(vec![cfg.context_len + 1, h, w], data)
}

pub fn factors(s: usize, t: usize) -> SRFactors {
    SRFactors::new(s, t).expect("factors")
}
