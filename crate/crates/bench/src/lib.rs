//! Fixtures shared by the benchmarks.

use scribbleseg::trainer::TrainSetup;
use scribbleseg::{generate_synthetic_dataset, BackboneConfig, ImageSample, TrainConfig};

/// Backbone sized like the synthetic acceptance runs.
pub fn small_backbone(num_classes: usize) -> BackboneConfig {
    BackboneConfig {
        encoder_depth: 4,
        init_channels: 4,
        max_channels: 16,
        hidden_dim: 16,
        num_classes,
        ..BackboneConfig::default()
    }
}

pub fn small_setup() -> TrainSetup {
    TrainSetup {
        backbone: small_backbone(3),
        common: Default::default(),
        further: Default::default(),
        train: TrainConfig {
            batch_size: 12,
            num_epochs: 60,
            ..TrainConfig::default()
        },
    }
}

/// One synthetic patient of 64×64 slices.
pub fn synthetic_slices(n: usize) -> Vec<ImageSample> {
    generate_synthetic_dataset(5, n, (64, 64), 11)
        .expect("valid synthetic arguments")
        .into_iter()
        .take(n)
        .collect()
}
