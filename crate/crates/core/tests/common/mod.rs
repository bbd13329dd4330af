//! Shared fixtures for the driver-level tests.

use cofinetune_core::data::{ClsDatasetConfig, SyntheticConfig, SyntheticSuite, TaskKind};
use cofinetune_core::model::{HeadSpec, ModelConfig};
use cofinetune_core::sampler::Strategy;
use cofinetune_core::train::TrainOptions;

pub fn tiny_synth_config(data_seed: u64) -> SyntheticConfig {
    SyntheticConfig {
        data_seed,
        clip_t: 4,
        clip_h: 16,
        clip_w: 16,
        clip_c: 2,
        num_classes: 4,
        long_tail_exponent: 1.0,
        det_name: "toy-det".into(),
        det_train_instances: 24,
        det_val_instances: 16,
        min_boxes_per_keyframe: 1,
        max_boxes_per_keyframe: 2,
        classification: vec![ClsDatasetConfig {
            name: "toy-cls".into(),
            examples: 24,
        }],
        noise: 0.05,
    }
}

pub fn tiny_suite(data_seed: u64) -> SyntheticSuite<f64> {
    SyntheticSuite::generate(&tiny_synth_config(data_seed)).unwrap()
}

/// Model matched to [`tiny_synth_config`] clips: heads[0] classification,
/// heads[1] detection.
pub fn tiny_model_config(num_classes: usize) -> ModelConfig {
    ModelConfig {
        input_t: 4,
        input_h: 16,
        input_w: 16,
        input_c: 2,
        tubelet: (2, 4, 4),
        hidden_dim: 12,
        num_layers: 1,
        num_heads: 2,
        mlp_hidden: 24,
        stochastic_depth_rate: 0.1,
        roi_grid: (2, 2),
        heads: vec![
            HeadSpec {
                task: TaskKind::Classification,
                num_classes,
            },
            HeadSpec {
                task: TaskKind::Detection,
                num_classes,
            },
        ],
    }
}

pub fn tiny_options(seed: u64, total_epochs: f64) -> TrainOptions {
    TrainOptions {
        seed,
        strategy: Strategy::Weighted,
        batch_size: 4,
        base_lr: 0.05,
        warmup_epochs: 1.0,
        total_epochs,
        momentum: 0.9,
        scale_jitter: (0.8, 1.0),
        box_jitter_ratio: 0.1,
        label_smoothing: 0.1,
    }
}
