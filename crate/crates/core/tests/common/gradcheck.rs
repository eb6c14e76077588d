//! Finite-difference checks of every loss gradient, at the logit level and
//! through a small network. Each check returns its worst relative error.

use rand::Rng;
use scribbleseg::backbone::{Backbone, Mode};
use scribbleseg::losses::{self, ProbabilityMap};
use scribbleseg::nn::{softmax_channels, Tensor};
use scribbleseg::{LossWeights, TrainConfig, TrainSetup, TrainState, Variant};

use super::*;

/// Denominator floor of the relative error; below it errors are absolute.
pub const REL_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub rel_err: f64,
}

fn check(name: impl Into<String>, analytic: &[f64], numeric: &[f64]) -> Check {
    Check {
        name: name.into(),
        rel_err: max_rel_err(analytic, numeric, REL_FLOOR),
    }
}

/// Cross-entropy of `softmax(pseudo_logits)` against `softmax(logits)`,
/// written directly from the definition.
fn cr_value(pseudo_logits: &Tensor, logits: &Tensor) -> f64 {
    let p = softmax_channels(pseudo_logits);
    let q = softmax_channels(logits);
    let n_pix = (p.n * p.plane()) as f64;
    -p.data.iter().zip(&q.data).map(|(a, b)| a * b.ln()).sum::<f64>() / n_pix
}

/// Logit-level checks on `trials` random instances no larger than
/// `2 × 3 × 4 × 4`.
pub fn logit_checks(trials: usize, seed: u64) -> Vec<Check> {
    let mut r = rng(seed);
    let mut out = Vec::new();
    for t in 0..trials {
        let k = r.random_range(2..=3);
        let (h, w) = (r.random_range(1..=4), r.random_range(1..=4));
        let n = r.random_range(1..=2);
        let a = rand_tensor(&mut r, n, k, h, w, 3.0);
        let b = rand_tensor(&mut r, n, k, h, w, 3.0);
        let labels = rand_labels(&mut r, n * h * w, k, 0.4);
        let dense = rand_labels(&mut r, n * h * w, k, 0.0);

        let (_, g) = losses::partial_cross_entropy_grad(&a, &labels).unwrap();
        let num = numeric_grad(&a, |x| losses::partial_cross_entropy(x, &labels).unwrap());
        out.push(check(format!("pce/logits#{t}"), &g.data, &num));

        let (_, g) = losses::auxiliary_loss_grad(&a, &labels).unwrap();
        let num = numeric_grad(&a, |x| losses::auxiliary_loss(x, &labels).unwrap());
        out.push(check(format!("aux/logits#{t}"), &g.data, &num));

        let (_, g) = losses::entropy_regularization_grad(&a).unwrap();
        let num = numeric_grad(&a, |x| {
            losses::entropy_regularization(&ProbabilityMap::from_logits(x).unwrap()).unwrap()
        });
        out.push(check(format!("ent/logits#{t}"), &g.data, &num));

        for sg in [false, true] {
            let cg = losses::consistency_regularization_grad(&a, &b, sg).unwrap();
            let num_b = numeric_grad(&b, |x| cr_value(&a, x));
            out.push(check(format!("cr(sg={sg})/further#{t}"), &cg.d_further.data, &num_b));
            match cg.d_common {
                Some(dc) => {
                    let num_a = numeric_grad(&a, |x| cr_value(x, &b));
                    out.push(check(format!("cr(sg={sg})/pseudo#{t}"), &dc.data, &num_a));
                }
                None => assert!(sg, "gradient into the pseudo-mask missing without stop-gradient"),
            }
        }

        let bank_logits = rand_tensor(&mut r, 1, 1, k, k, 3.0);
        let (_, g) = losses::memory_loss_grad(&bank_logits.data, k).unwrap();
        let num = numeric_grad(&bank_logits, |x| losses::memory_loss(&x.data, k).unwrap());
        out.push(check(format!("m/logits#{t}"), &g, &num));

        let (_, g) = losses::cross_entropy_grad(&a, &dense).unwrap();
        let num = numeric_grad(&a, |x| losses::cross_entropy_grad(x, &dense).unwrap().0);
        out.push(check(format!("ce/logits#{t}"), &g.data, &num));

        let (_, g) = losses::soft_dice_loss_grad(&a, &dense).unwrap();
        let num = numeric_grad(&a, |x| losses::soft_dice_loss_grad(x, &dense).unwrap().0);
        out.push(check(format!("dice/logits#{t}"), &g.data, &num));
    }
    out
}

fn zero_grads(net: &Backbone) -> scribbleseg::nn::Grads {
    net.params().zeros_like()
}

/// Parameter-level checks through a two-stage network on `2 × 1 × 4 × 4`
/// inputs.
pub fn param_checks(seed: u64) -> Vec<Check> {
    let k = 3;
    let mut r = rng(seed);
    let net = tiny_backbone(k, seed);
    let xa = rand_tensor(&mut r, 2, 1, 4, 4, 1.5);
    let xb = rand_tensor(&mut r, 2, 1, 4, 4, 1.5);
    let labels = rand_labels(&mut r, 2 * 16, k, 0.5);
    let bank: Vec<f64> = (0..k * net.config().hidden_dim).map(|_| r.random_range(-1.0..1.0)).collect();
    let mut out = Vec::new();

    let mut m = net.clone();
    let (oa, ca) = m.forward(&xa, Mode::Train).unwrap();
    let ca = ca.unwrap();
    let (ob, cb) = m.forward(&xb, Mode::Train).unwrap();
    let cb = cb.unwrap();

    // pce
    let mut g = zero_grads(&net);
    let (_, d) = losses::partial_cross_entropy_grad(&oa.logits, &labels).unwrap();
    net.backward(&ca, Some(&d), None, &mut g);
    let num = numeric_param_grad(&net, |n| losses::partial_cross_entropy(&train_logits(n, &xa), &labels).unwrap());
    out.push(check("pce/params", &flatten(&g), &num));

    // ent
    let mut g = zero_grads(&net);
    let (_, d) = losses::entropy_regularization_grad(&oa.logits).unwrap();
    net.backward(&ca, Some(&d), None, &mut g);
    let num = numeric_param_grad(&net, |n| {
        losses::entropy_regularization(&ProbabilityMap::from_logits(&train_logits(n, &xa)).unwrap()).unwrap()
    });
    out.push(check("ent/params", &flatten(&g), &num));

    // aux, through g and the hidden features
    let mut g = zero_grads(&net);
    let gz = net.head_g(&oa.hidden).unwrap();
    let (_, d) = losses::auxiliary_loss_grad(&gz, &labels).unwrap();
    let dz = net.head_g_backward(&oa.hidden, &d, &mut g);
    net.backward(&ca, None, Some(&dz), &mut g);
    let num = numeric_param_grad(&net, |n| {
        let z = n.forward(&xa, Mode::Train).unwrap().0.hidden;
        losses::auxiliary_loss(&n.head_g(&z).unwrap(), &labels).unwrap()
    });
    out.push(check("aux/params", &flatten(&g), &num));

    // m, the bank held constant
    let mut g = zero_grads(&net);
    let (_, d) = losses::memory_loss_grad(&net.predict_head_g(&bank, k).unwrap(), k).unwrap();
    net.predict_head_g_backward(&bank, k, &d, &mut g);
    let num = numeric_param_grad(&net, |n| losses::memory_loss(&n.predict_head_g(&bank, k).unwrap(), k).unwrap());
    out.push(check("m/params", &flatten(&g), &num));

    // cr through both branches, with and without stop-gradient
    let mut grads_by_sg = Vec::new();
    for sg in [false, true] {
        let mut g = zero_grads(&net);
        let cg = losses::consistency_regularization_grad(&oa.logits, &ob.logits, sg).unwrap();
        net.backward(&cb, Some(&cg.d_further), None, &mut g);
        if let Some(dc) = &cg.d_common {
            net.backward(&ca, Some(dc), None, &mut g);
        }
        let fixed_pseudo = oa.logits.clone();
        let num = numeric_param_grad(&net, |n| {
            let lb = train_logits(n, &xb);
            if sg {
                cr_value(&fixed_pseudo, &lb)
            } else {
                cr_value(&train_logits(n, &xa), &lb)
            }
        });
        out.push(check(format!("cr(sg={sg})/params"), &flatten(&g), &num));
        grads_by_sg.push(flatten(&g));
    }

    // The two settings differ by exactly the gradient through the
    // pseudo-mask with the further view held fixed.
    let diff: Vec<f64> = grads_by_sg[0].iter().zip(&grads_by_sg[1]).map(|(a, b)| a - b).collect();
    let fixed_further = ob.logits.clone();
    let num = numeric_param_grad(&net, |n| cr_value(&train_logits(n, &xa), &fixed_further));
    out.push(check("cr/stop_gradient_difference", &diff, &num));
    out
}

/// Gradient of `g`'s weights under the memory variant with the given
/// loss weights.
fn head_g_grad(lambda_aux: f64, lambda_mem: f64, seed: u64) -> Vec<f64> {
    let setup = TrainSetup {
        backbone: tiny_backbone_config(3),
        train: TrainConfig {
            variant: Variant::EntminMemory,
            loss: LossWeights {
                lambda_aux,
                lambda_mem,
                ..LossWeights::default()
            },
            seed,
            ..TrainConfig::default()
        },
        ..small_setup(3, 4, 1, seed)
    };
    let mut r = rng(seed);
    let mut state = TrainState::new(&setup).unwrap();
    let batch = scribbleseg::trainer::Batch {
        common: rand_tensor(&mut r, 2, 1, 4, 4, 1.5),
        further: rand_tensor(&mut r, 2, 1, 4, 4, 1.5),
        scribble: rand_labels(&mut r, 32, 3, 0.3),
        dense: None,
    };
    let (_, g) = scribbleseg::trainer::compute_gradients(&mut state, &batch, &setup, 0).unwrap();
    let (w, b) = state.model.head_g_ids();
    g.get(w).iter().chain(g.get(b)).copied().collect()
}

/// `g` is trained by both the auxiliary and the memory loss: the gradient
/// with both terms equals the sum of the single-term gradients and each
/// single-term gradient is non-zero. Returns the additivity error and the
/// two single-term gradient norms.
pub fn head_g_paths(seed: u64) -> (f64, f64, f64) {
    let both = head_g_grad(1.0, 1.0, seed);
    let aux_only = head_g_grad(1.0, 0.0, seed);
    let mem_only = head_g_grad(0.0, 1.0, seed);
    let err = both
        .iter()
        .zip(&aux_only)
        .zip(&mem_only)
        .map(|((b, a), m)| (b - a - m).abs())
        .fold(0.0, f64::max);
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (err, norm(&aux_only), norm(&mem_only))
}
