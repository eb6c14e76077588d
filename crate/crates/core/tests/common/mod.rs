//! Helpers shared by the integration test targets.
#![allow(dead_code)]

pub mod gradcheck;
pub mod oracles;
pub mod scribbles;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use scribbleseg::augment::{CommonAugmentConfig, FurtherAugmentConfig};
use scribbleseg::backbone::{Backbone, BackboneConfig, Mode};
use scribbleseg::nn::{Grads, Tensor};
use scribbleseg::{TrainConfig, TrainSetup, UNLABELED};

pub const FD_STEP: f64 = 1e-5;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize, scale: f64) -> Tensor {
    let data = (0..n * c * h * w).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::from_vec(n, c, h, w, data)
}

/// Labels in `0..k`, each pixel unlabeled with probability `p_unlabeled`.
pub fn rand_labels(rng: &mut ChaCha8Rng, len: usize, k: usize, p_unlabeled: f64) -> Vec<u8> {
    (0..len)
        .map(|_| {
            if rng.random_bool(p_unlabeled) {
                UNLABELED
            } else {
                rng.random_range(0..k) as u8
            }
        })
        .collect()
}

/// Central differences of `f` over every entry of `x`.
pub fn numeric_grad(x: &Tensor, mut f: impl FnMut(&Tensor) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let v = probe.data[i];
            probe.data[i] = v + FD_STEP;
            let up = f(&probe);
            probe.data[i] = v - FD_STEP;
            let down = f(&probe);
            probe.data[i] = v;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// Central differences of `f` over every network parameter, flattened in
/// store order. `f` may run training-mode forwards.
pub fn numeric_param_grad(model: &Backbone, mut f: impl FnMut(&mut Backbone) -> f64) -> Vec<f64> {
    let mut probe = model.clone();
    let ids: Vec<_> = model.params().ids().collect();
    let mut out = Vec::new();
    for id in ids {
        for j in 0..model.params().get(id).len() {
            let v = model.params().get(id)[j];
            probe.params_mut().get_mut(id)[j] = v + FD_STEP;
            let up = f(&mut probe);
            probe.params_mut().get_mut(id)[j] = v - FD_STEP;
            let down = f(&mut probe);
            probe.params_mut().get_mut(id)[j] = v;
            out.push((up - down) / (2.0 * FD_STEP));
        }
    }
    out
}

pub fn flatten(grads: &Grads) -> Vec<f64> {
    grads.values.iter().flatten().copied().collect()
}

/// Largest elementwise `|a − n| / max(|a|, |n|, floor)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// A network small enough for exhaustive finite differences.
pub fn tiny_backbone_config(num_classes: usize) -> BackboneConfig {
    BackboneConfig {
        encoder_depth: 2,
        init_channels: 2,
        max_channels: 3,
        num_classes,
        hidden_dim: 3,
        ..BackboneConfig::default()
    }
}

pub fn tiny_backbone(num_classes: usize, seed: u64) -> Backbone {
    let mut net = Backbone::new(tiny_backbone_config(num_classes), seed).unwrap();
    // Non-trivial batch-norm affine parameters so their gradients are exercised.
    let mut r = rng(seed ^ 0xABCD);
    let ids: Vec<_> = net.params().ids().collect();
    for id in ids {
        if net.params().name(id).contains(".bn.") || net.params().name(id).ends_with("bias") {
            for v in net.params_mut().get_mut(id) {
                *v += r.random_range(-0.3..0.3);
            }
        }
    }
    net
}

pub fn train_logits(net: &mut Backbone, x: &Tensor) -> Tensor {
    net.forward(x, Mode::Train).unwrap().0.logits
}

/// Small training setup for fast end-to-end runs on `size × size` slices.
pub fn small_setup(num_classes: usize, size: usize, epochs: usize, seed: u64) -> TrainSetup {
    TrainSetup {
        backbone: BackboneConfig {
            encoder_depth: 2,
            init_channels: 2,
            max_channels: 4,
            num_classes,
            hidden_dim: 4,
            ..BackboneConfig::default()
        },
        common: CommonAugmentConfig {
            crop_pad_to: Some((size, size)),
            ..CommonAugmentConfig::default()
        },
        further: FurtherAugmentConfig::default(),
        train: TrainConfig {
            batch_size: 4,
            num_epochs: epochs,
            seed,
            ..TrainConfig::default()
        },
    }
}
