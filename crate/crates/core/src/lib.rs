//! Scribble-supervised segmentation: a siamese consistency-training
//! pipeline with entropy-regularized pseudo-masks and a class memory bank,
//! plus scribble tools, metrics and a synthetic benchmark.

#![allow(clippy::needless_range_loop, clippy::neg_cmp_op_on_partial_ord)]

pub mod augment;
pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod grid;
pub mod losses;
pub mod memory_bank;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod scribble;
pub mod trainer;

pub use augment::{apply_common, apply_further, CommonAugmentConfig, FurtherAugmentConfig};
pub use backbone::{Backbone, BackboneConfig, Mode, NetworkOutputs};
pub use config::RunConfigFile;
pub use data::{
    generate_synthetic_dataset, preprocess, split_folds, DatasetSpec, FoldSplit, ImageSample, ScribbleLabel,
    UNLABELED,
};
pub use error::{Error, Result};
pub use grid::Grid;
pub use losses::{LossBreakdown, LossWeights, ProbabilityMap};
pub use memory_bank::MemoryBank;
pub use metrics::{dice, evaluate_model, hd95, EvalResult};
pub use optim::lr_scale;
pub use scribble::{prune_scribbles, synthesize_scribbles, synthesize_scribbles_with, PruneSpec};
pub use trainer::{fit, fit_fold, train_step, TrainConfig, TrainSetup, TrainState, Variant};
