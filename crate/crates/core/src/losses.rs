//! Loss terms of the training objective and their gradients with respect
//! to logits.
//!
//! Logit tensors are `n × K × H × W`; label slices are `n·H·W` class
//! indices in sample-major, row-major order with [`UNLABELED`] marking
//! pixels without supervision. Every pixel-averaged loss divides by the
//! total pixel count `n·H·W`, labeled or not.

use serde::{Deserialize, Serialize};

use crate::data::UNLABELED;
use crate::error::{Error, Result};
use crate::nn::{softmax_channels, Tensor};

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// Per-pixel class distributions (softmax outputs), `n × K × H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap(Tensor);

impl ProbabilityMap {
    /// Validates that every pixel holds a distribution (non-negative,
    /// summing to one within `1e-5`).
    pub fn new(probs: Tensor) -> Result<Self> {
        let (k, hw) = (probs.c, probs.plane());
        for s in 0..probs.n {
            let p = probs.sample(s);
            for i in 0..hw {
                let mut total = 0.0;
                for c in 0..k {
                    let v = p[c * hw + i];
                    if !(v >= 0.0) {
                        return Err(Error::invalid(format!("negative or NaN probability {v}")));
                    }
                    total += v;
                }
                if (total - 1.0).abs() > 1e-5 {
                    return Err(Error::invalid(format!(
                        "probabilities at sample {s}, pixel {i} sum to {total}"
                    )));
                }
            }
        }
        Ok(ProbabilityMap(probs))
    }

    pub fn from_logits(logits: &Tensor) -> Result<Self> {
        check_finite(logits, "logits")?;
        Ok(ProbabilityMap(softmax_channels(logits)))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }
}

fn check_finite(t: &Tensor, term: &str) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: term.to_string(),
            step: None,
        })
    }
}

fn check_labels(logits: &Tensor, labels: &[u8]) -> Result<()> {
    let n = logits.n * logits.plane();
    if labels.len() != n {
        return Err(Error::invalid(format!(
            "label map has {} pixels, logits have {n}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != UNLABELED && l as usize >= logits.c) {
        return Err(Error::invalid(format!("label {bad} out of range for {} classes", logits.c)));
    }
    Ok(())
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// Log-softmax over channels, computed stably.
fn log_softmax(logits: &Tensor) -> Tensor {
    let (k, hw) = (logits.c, logits.plane());
    let mut out = Tensor::zeros(logits.n, k, logits.h, logits.w);
    for s in 0..logits.n {
        let src = logits.sample(s);
        let dst = out.sample_mut(s);
        for i in 0..hw {
            let mx = (0..k).map(|c| src[c * hw + i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + (0..k).map(|c| (src[c * hw + i] - mx).exp()).sum::<f64>().ln();
            for c in 0..k {
                dst[c * hw + i] = src[c * hw + i] - lse;
            }
        }
    }
    out
}

/// Cross-entropy against scribble labels, averaged over all pixels.
pub fn partial_cross_entropy(logits: &Tensor, labels: &[u8]) -> Result<f64> {
    partial_cross_entropy_grad(logits, labels).map(|(v, _)| v)
}

/// [`partial_cross_entropy`] and its gradient w.r.t. the logits. Unlabeled
/// pixels get an exactly zero gradient.
pub fn partial_cross_entropy_grad(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    check_finite(logits, "logits")?;
    check_labels(logits, labels)?;
    let (k, hw) = (logits.c, logits.plane());
    let n_pix = (logits.n * hw) as f64;
    let logp = log_softmax(logits);
    let mut grad = Tensor::zeros(logits.n, k, logits.h, logits.w);
    let mut loss = 0.0;
    for s in 0..logits.n {
        let lp = logp.sample(s);
        let g = grad.sample_mut(s);
        let lab = &labels[s * hw..(s + 1) * hw];
        for (i, &l) in lab.iter().enumerate() {
            if l == UNLABELED {
                continue;
            }
            let l = l as usize;
            loss -= lp[l * hw + i];
            for c in 0..k {
                let p = lp[c * hw + i].exp();
                g[c * hw + i] = (p - if c == l { 1.0 } else { 0.0 }) / n_pix;
            }
        }
    }
    Ok((loss / n_pix, grad))
}

/// The auxiliary loss on `g(z)`: partial cross-entropy of the head outputs.
pub fn auxiliary_loss(hidden_logits: &Tensor, labels: &[u8]) -> Result<f64> {
    partial_cross_entropy(hidden_logits, labels)
}

pub fn auxiliary_loss_grad(hidden_logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    partial_cross_entropy_grad(hidden_logits, labels)
}

/// Mean cross-entropy between the pseudo-mask and the further-augmented
/// view's prediction.
pub fn consistency_regularization(pseudo: &ProbabilityMap, logits_further: &Tensor) -> Result<f64> {
    let p = pseudo.tensor();
    same_shape(p, logits_further)?;
    check_finite(logits_further, "logits_further")?;
    let logq = log_softmax(logits_further);
    let n_pix = (p.n * p.plane()) as f64;
    let total: f64 = p
        .data
        .iter()
        .zip(&logq.data)
        .map(|(a, b)| if *a == 0.0 { 0.0 } else { -a * b })
        .sum();
    Ok(total / n_pix)
}

/// Value and logit gradients of the consistency loss.
#[derive(Debug, Clone)]
pub struct ConsistencyGrad {
    pub value: f64,
    /// Gradient w.r.t. the logits that produced the pseudo-mask; `None`
    /// under stop-gradient.
    pub d_common: Option<Tensor>,
    /// Gradient w.r.t. the further-augmented view's logits.
    pub d_further: Tensor,
}

/// Consistency loss with the pseudo-mask given as logits so that, without
/// stop-gradient, the gradient also flows through the softmax producing it.
pub fn consistency_regularization_grad(
    logits_common: &Tensor,
    logits_further: &Tensor,
    stop_gradient: bool,
) -> Result<ConsistencyGrad> {
    same_shape(logits_common, logits_further)?;
    check_finite(logits_common, "logits_common")?;
    check_finite(logits_further, "logits_further")?;
    let (k, hw) = (logits_common.c, logits_common.plane());
    let n_pix = (logits_common.n * hw) as f64;
    let pseudo = softmax_channels(logits_common);
    let logq = log_softmax(logits_further);
    let mut d_further = Tensor::zeros(logits_common.n, k, logits_common.h, logits_common.w);
    let mut d_common = (!stop_gradient).then(|| d_further.clone());
    let mut value = 0.0;
    for s in 0..logits_common.n {
        let p = pseudo.sample(s);
        let lq = logq.sample(s);
        let df = d_further.sample_mut(s);
        for i in 0..hw {
            let mut mass = 0.0;
            for c in 0..k {
                mass += p[c * hw + i];
            }
            for c in 0..k {
                let j = c * hw + i;
                value -= p[j] * lq[j];
                df[j] = (mass * lq[j].exp() - p[j]) / n_pix;
            }
        }
        if let Some(dc) = d_common.as_mut() {
            let dc = dc.sample_mut(s);
            for i in 0..hw {
                // d/dp_c = -log q_c / N, pulled back through the softmax.
                let dot: f64 = (0..k).map(|c| p[c * hw + i] * -lq[c * hw + i]).sum();
                for c in 0..k {
                    let j = c * hw + i;
                    dc[j] = p[j] * (-lq[j] - dot) / n_pix;
                }
            }
        }
    }
    Ok(ConsistencyGrad {
        value: value / n_pix,
        d_common,
        d_further,
    })
}

/// Mean Shannon entropy (natural log) of the pixel distributions, with
/// `0·log 0 = 0`.
pub fn entropy_regularization(pseudo: &ProbabilityMap) -> Result<f64> {
    let p = pseudo.tensor();
    let n_pix = (p.n * p.plane()) as f64;
    let total: f64 = p
        .data
        .iter()
        .map(|&v| if v > 0.0 { -v * v.ln() } else { 0.0 })
        .sum();
    Ok(total / n_pix)
}

/// Entropy of `softmax(logits)` and its gradient w.r.t. the logits.
pub fn entropy_regularization_grad(logits: &Tensor) -> Result<(f64, Tensor)> {
    check_finite(logits, "logits")?;
    let (k, hw) = (logits.c, logits.plane());
    let n_pix = (logits.n * hw) as f64;
    let logp = log_softmax(logits);
    let mut grad = Tensor::zeros(logits.n, k, logits.h, logits.w);
    let mut value = 0.0;
    for s in 0..logits.n {
        let lp = logp.sample(s);
        let g = grad.sample_mut(s);
        for i in 0..hw {
            let mut h = 0.0;
            for c in 0..k {
                let l = lp[c * hw + i];
                h -= l.exp() * l;
            }
            value += h;
            for c in 0..k {
                let j = c * hw + i;
                let p = lp[j].exp();
                g[j] = p * (-lp[j] - h) / n_pix;
            }
        }
    }
    Ok((value / n_pix, grad))
}

/// Cross-entropy of `g(M)` (a `K × K` row-major matrix) against the
/// identity labels, averaged over the `K` rows.
pub fn memory_loss(bank_logits: &[f64], num_classes: usize) -> Result<f64> {
    memory_loss_grad(bank_logits, num_classes).map(|(v, _)| v)
}

pub fn memory_loss_grad(bank_logits: &[f64], num_classes: usize) -> Result<(f64, Vec<f64>)> {
    let k = num_classes;
    if bank_logits.len() != k * k {
        return Err(Error::invalid(format!(
            "memory loss expects a square {k}x{k} logit matrix, got {} values",
            bank_logits.len()
        )));
    }
    if bank_logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            term: "bank_logits".into(),
            step: None,
        });
    }
    let mut grad = vec![0.0; k * k];
    let mut value = 0.0;
    for r in 0..k {
        let row = &bank_logits[r * k..(r + 1) * k];
        let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
        value -= row[r] - lse;
        for c in 0..k {
            let p = (row[c] - lse).exp();
            grad[r * k + c] = (p - if c == r { 1.0 } else { 0.0 }) / k as f64;
        }
    }
    Ok((value / k as f64, grad))
}

/// Cross-entropy against a fully labeled mask (the fully supervised
/// reference modes).
pub fn cross_entropy_grad(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    if labels.contains(&UNLABELED) {
        return Err(Error::invalid("dense cross-entropy needs every pixel labeled"));
    }
    partial_cross_entropy_grad(logits, labels)
}

/// Soft Dice loss `1 − mean_k (2Σpg + ε)/(Σp + Σg + ε)` over all classes,
/// pooled over the batch.
pub fn soft_dice_loss_grad(logits: &Tensor, labels: &[u8]) -> Result<(f64, Tensor)> {
    check_finite(logits, "logits")?;
    check_labels(logits, labels)?;
    if labels.contains(&UNLABELED) {
        return Err(Error::invalid("dice loss needs every pixel labeled"));
    }
    let (k, hw) = (logits.c, logits.plane());
    let p = softmax_channels(logits);
    let mut inter = vec![0.0; k];
    let mut psum = vec![0.0; k];
    let mut gsum = vec![0.0; k];
    for s in 0..logits.n {
        let ps = p.sample(s);
        for i in 0..hw {
            let l = labels[s * hw + i] as usize;
            for c in 0..k {
                psum[c] += ps[c * hw + i];
            }
            inter[l] += ps[l * hw + i];
            gsum[l] += 1.0;
        }
    }
    let mut value = 1.0;
    let mut dd_dp_const = vec![0.0; k]; // ∂dice_k/∂p for g = 0
    let mut dd_dp_pos = vec![0.0; k]; // extra term for g = 1
    for c in 0..k {
        let den = psum[c] + gsum[c] + DICE_EPS;
        let num = 2.0 * inter[c] + DICE_EPS;
        value -= num / den / k as f64;
        dd_dp_const[c] = -num / (den * den);
        dd_dp_pos[c] = 2.0 / den;
    }
    let mut grad = Tensor::zeros(logits.n, k, logits.h, logits.w);
    let mut dp = vec![0.0; k];
    for s in 0..logits.n {
        let ps = p.sample(s);
        let g = grad.sample_mut(s);
        for i in 0..hw {
            let l = labels[s * hw + i] as usize;
            for c in 0..k {
                let dd = dd_dp_const[c] + if c == l { dd_dp_pos[c] } else { 0.0 };
                dp[c] = -dd / k as f64;
            }
            let dot: f64 = (0..k).map(|c| ps[c * hw + i] * dp[c]).sum();
            for c in 0..k {
                let j = c * hw + i;
                g[j] = ps[j] * (dp[c] - dot);
            }
        }
    }
    Ok((value, grad))
}

/// Exponential ramp `exp(−η(1 − t/T))`, clamped to 1 from epoch `T` on.
pub fn warmup_factor(t: usize, ramp_epochs: usize, eta: f64) -> Result<f64> {
    if ramp_epochs == 0 {
        return Err(Error::invalid("warm-up length T must be positive"));
    }
    if t >= ramp_epochs {
        return Ok(1.0);
    }
    Ok((-eta * (1.0 - t as f64 / ramp_epochs as f64)).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    /// Weight of the auxiliary loss.
    pub lambda_aux: f64,
    /// Weight of the memory loss.
    pub lambda_mem: f64,
    /// Warm-up length in epochs.
    pub warmup_epochs: usize,
    /// Warm-up speed.
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_aux: 0.01,
            lambda_mem: 1.0,
            warmup_epochs: 80,
            eta: 8.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_aux >= 0.0) || !(self.lambda_mem >= 0.0) {
            return Err(Error::invalid("loss weights must be non-negative"));
        }
        if self.warmup_epochs == 0 {
            return Err(Error::invalid("warmup_epochs must be at least 1"));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::invalid("eta must be non-negative"));
        }
        Ok(())
    }
}

/// Unweighted loss terms of one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub pce: f64,
    pub cr: f64,
    pub ent: f64,
    pub aux: f64,
    pub m: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub pce: f64,
    pub cr: f64,
    pub ent: f64,
    pub aux: f64,
    pub m: f64,
    pub total: f64,
    pub r_t: f64,
}

/// Combines the terms as `pce + r(t)·cr + r(t)·ent + λ_aux·aux + λ_mem·m`.
pub fn total_loss(parts: LossParts, weights: &LossWeights, t: usize) -> Result<LossBreakdown> {
    for (name, v) in [
        ("pce", parts.pce),
        ("cr", parts.cr),
        ("ent", parts.ent),
        ("aux", parts.aux),
        ("m", parts.m),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                term: name.into(),
                step: None,
            });
        }
    }
    let r_t = warmup_factor(t, weights.warmup_epochs, weights.eta)?;
    let total = parts.pce
        + r_t * parts.cr
        + r_t * parts.ent
        + weights.lambda_aux * parts.aux
        + weights.lambda_mem * parts.m;
    Ok(LossBreakdown {
        pce: parts.pce,
        cr: parts.cr,
        ent: parts.ent,
        aux: parts.aux,
        m: parts.m,
        total,
        r_t,
    })
}
