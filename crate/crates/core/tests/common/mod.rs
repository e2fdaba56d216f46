#![allow(dead_code)]

pub mod engine_checks;
pub mod listing1;
pub mod metric_oracles;

use slotphys::savi::EncoderConfig;
use slotphys::scene::GeneratorParams;

/// A 16×16, width-8 encoder small enough for finite differences.
pub fn tiny_encoder(dtype: &str) -> EncoderConfig {
    EncoderConfig {
        num_slots: 4,
        slot_dim: 8,
        slot_iterations: 2,
        cnn_channels: vec![8, 8],
        cnn_strides: vec![1, 1],
        cnn_kernel: 3,
        slot_mlp_hidden: 16,
        predictor_heads: 2,
        broadcast_size: 8,
        decoder_channels: 8,
        decoder_kernel: 3,
        context_len: 2,
        height: 16,
        width: 16,
        dtype: dtype.into(),
    }
}

pub fn tiny_generator(frames: usize) -> GeneratorParams {
    GeneratorParams {
        num_samples: 4,
        frames,
        height: 16,
        width: 16,
        k_min: 2,
        k_max: 3,
        seed: 11,
        ..GeneratorParams::desk()
    }
}

use slotphys::rollout::{RolloutConfig, TransformerSpec, Variant};

/// Four slots of width 8 with a one-layer predictor, in double precision.
pub fn tiny_rollout(variant: Variant) -> RolloutConfig {
    RolloutConfig {
        context_len: 3,
        train_horizon: 2,
        eval_horizon: 4,
        num_slots: 4,
        slot_dim: 8,
        hidden: 16,
        transformer: TransformerSpec {
            layers: 1,
            heads: 2,
            width: 8,
            ffn_width: 16,
        },
        engine_grad_cap: None,
        dtype: "f64".into(),
        ..RolloutConfig::for_variant(variant, 8)
    }
}
