//! Shared fixtures for the pipeline benchmarks.

use autotimes_core::adapter::{AdapterConfig, AdapterParams, HeadKind};
use autotimes_core::backbone::{BackboneConfig, BackboneVariant, FrozenBackbone};
use autotimes_core::data::{make_windows, synth_generate, NormMode, SynthSpec, WindowSample};
use autotimes_core::model::Model;
use autotimes_core::trainer::TrainConfig;

pub const SEGMENT: usize = 96;
pub const CONTEXT: usize = 7;
pub const DIM: usize = 64;

/// Desk-scale model: 2 frozen layers, D = 64, MLP adapter heads.
pub fn desk_model() -> Model {
    let backbone = FrozenBackbone::build(BackboneConfig {
        num_layers: 2,
        model_dim: DIM,
        num_heads: 4,
        ffn_dim: 128,
        max_positions: 128,
        variant: BackboneVariant::Full,
        seed: 1,
    })
    .unwrap();
    let adapter = AdapterParams::new(
        AdapterConfig::new(SEGMENT, HeadKind::Mlp { hidden: 512 }, HeadKind::Mlp { hidden: 512 }),
        DIM,
        2,
    )
    .unwrap();
    let config = TrainConfig {
        context_segments: CONTEXT,
        segment_length: SEGMENT,
        use_timestamps: false,
        normalization: NormMode::LookbackStandardize,
        ..Default::default()
    };
    Model::new(backbone, adapter, config).unwrap()
}

pub fn training_windows(count: usize) -> Vec<WindowSample> {
    let ds = synth_generate(&SynthSpec {
        length: (CONTEXT + 1) * SEGMENT + count,
        period: SEGMENT,
        noise_std: 0.1,
        seed: 3,
        ..Default::default()
    })
    .unwrap();
    make_windows(&ds, SEGMENT, CONTEXT, 1).unwrap().samples
}
