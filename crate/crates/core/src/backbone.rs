//! Encoder-decoder segmentation network with skip connections, a hidden
//! feature projection `z`, and the shared linear prediction head `g`.
//!
//! Each stage is two `3×3 conv → batch norm → LeakyReLU` units. Encoder
//! stages downsample with 2×2 max pooling, decoder stages upsample with
//! bilinear interpolation and concatenate the matching encoder output.
//! The deepest encoder map is projected to `hidden_dim` channels with a
//! 1×1 convolution and bilinearly upsampled to the input resolution.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, BatchNormCache, Grads, ParamId, ParamStore, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub encoder_depth: usize,
    pub init_channels: usize,
    pub max_channels: usize,
    pub leaky_slope: f64,
    pub num_classes: usize,
    pub hidden_dim: usize,
    /// Running-statistics momentum for batch normalization.
    pub bn_momentum: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            encoder_depth: 6,
            init_channels: 32,
            max_channels: 512,
            leaky_slope: 0.01,
            num_classes: 2,
            hidden_dim: 64,
            bn_momentum: 0.1,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_depth < 2 {
            return Err(Error::invalid("encoder_depth must be at least 2"));
        }
        if self.init_channels == 0 || self.max_channels < self.init_channels {
            return Err(Error::invalid("channel schedule requires 0 < init_channels <= max_channels"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if self.hidden_dim == 0 {
            return Err(Error::invalid("hidden_dim must be positive"));
        }
        if !(0.0..=1.0).contains(&self.bn_momentum) {
            return Err(Error::invalid("bn_momentum must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Output channels of encoder stage `s`.
    pub fn stage_channels(&self, s: usize) -> usize {
        (self.init_channels << s.min(31)).min(self.max_channels)
    }

    pub fn channel_schedule(&self) -> Vec<usize> {
        (0..self.encoder_depth).map(|s| self.stage_channels(s)).collect()
    }

    /// Spatial sizes must be multiples of this.
    pub fn output_stride(&self) -> usize {
        1 << (self.encoder_depth - 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, running averages updated, backward cache kept.
    Train,
    /// Batch statistics and a backward cache, running averages untouched.
    TrainFrozenStats,
    /// Running statistics, no cache.
    Eval,
}

#[derive(Debug, Clone)]
pub struct NetworkOutputs {
    /// Pre-softmax segmentation logits, `n × K × H × W`.
    pub logits: Tensor,
    /// Hidden features `z`, `n × D × H × W`.
    pub hidden: Tensor,
    /// Deepest encoder map.
    pub encoder_features: Tensor,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerInfo {
    pub name: String,
    pub kind: String,
}

#[derive(Debug, Clone)]
struct ConvUnit {
    weight: ParamId,
    gamma: ParamId,
    beta: ParamId,
    run_mean: ParamId,
    run_var: ParamId,
    cout: usize,
}

#[derive(Debug, Clone)]
struct Stage {
    a: ConvUnit,
    b: ConvUnit,
}

#[derive(Debug, Clone)]
struct UnitCache {
    x: Tensor,
    bn: BatchNormCache,
    out: Tensor,
}

#[derive(Debug, Clone)]
struct StageCache {
    a: UnitCache,
    b: UnitCache,
}

/// Everything a training-mode forward keeps for its backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    param_version: u64,
    enc: Vec<StageCache>,
    /// `(argmax, in_h, in_w)` of the pooling before encoder stage `s + 1`.
    pools: Vec<(Vec<u8>, usize, usize)>,
    /// Decoder stages in execution order; `(cache, skip channels, low h, low w)`.
    dec: Vec<(StageCache, usize, usize, usize)>,
    head_input: Tensor,
    deep: Tensor,
    zlow_hw: (usize, usize),
    out_hw: (usize, usize),
}

impl ForwardCache {
    /// Parameter-store version observed by this forward.
    pub fn param_version(&self) -> u64 {
        self.param_version
    }
}

#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: BackboneConfig,
    params: ParamStore,
    buffers: ParamStore,
    enc: Vec<Stage>,
    dec: Vec<Stage>,
    seg_w: ParamId,
    seg_b: ParamId,
    proj_w: ParamId,
    proj_b: ParamId,
    g_w: ParamId,
    g_b: ParamId,
}

fn kaiming(rng: &mut ChaCha8Rng, fan_in: usize, gain2: f64, len: usize) -> Vec<f64> {
    let std = (gain2 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    (0..len).map(|_| normal.sample(rng)).collect()
}

impl Backbone {
    /// Builds a network with fan-in scaled normal weights and zero biases.
    pub fn new(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let gain2 = 2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope);

        let mut unit = |name: &str, cin: usize, cout: usize, params: &mut ParamStore, buffers: &mut ParamStore| {
            let fan = cin * 9;
            ConvUnit {
                weight: params.add(
                    format!("{name}.conv.weight"),
                    vec![cout, cin, 3, 3],
                    kaiming(&mut rng, fan, gain2, cout * fan),
                ),
                gamma: params.add(format!("{name}.bn.weight"), vec![cout], vec![1.0; cout]),
                beta: params.add(format!("{name}.bn.bias"), vec![cout], vec![0.0; cout]),
                run_mean: buffers.add(format!("{name}.bn.running_mean"), vec![cout], vec![0.0; cout]),
                run_var: buffers.add(format!("{name}.bn.running_var"), vec![cout], vec![1.0; cout]),
                cout,
            }
        };

        let mut enc = Vec::new();
        let mut cin = 1;
        for s in 0..cfg.encoder_depth {
            let c = cfg.stage_channels(s);
            let a = unit(&format!("encoder.{s}.0"), cin, c, &mut params, &mut buffers);
            let b = unit(&format!("encoder.{s}.1"), c, c, &mut params, &mut buffers);
            enc.push(Stage { a, b });
            cin = c;
        }
        let mut dec = Vec::new();
        let mut below = cfg.stage_channels(cfg.encoder_depth - 1);
        for s in (0..cfg.encoder_depth - 1).rev() {
            let c = cfg.stage_channels(s);
            let a = unit(&format!("decoder.{s}.0"), c + below, c, &mut params, &mut buffers);
            let b = unit(&format!("decoder.{s}.1"), c, c, &mut params, &mut buffers);
            dec.push(Stage { a, b });
            below = c;
        }

        let c0 = cfg.stage_channels(0);
        let deep_c = cfg.stage_channels(cfg.encoder_depth - 1);
        let (k, d) = (cfg.num_classes, cfg.hidden_dim);
        let seg_w = params.add("seg_head.weight", vec![k, c0, 1, 1], kaiming(&mut rng, c0, 1.0, k * c0));
        let seg_b = params.add("seg_head.bias", vec![k], vec![0.0; k]);
        let proj_w = params.add("proj.weight", vec![d, deep_c, 1, 1], kaiming(&mut rng, deep_c, 1.0, d * deep_c));
        let proj_b = params.add("proj.bias", vec![d], vec![0.0; d]);
        let g_w = params.add("head_g.weight", vec![k, d, 1, 1], kaiming(&mut rng, d, 1.0, k * d));
        let g_b = params.add("head_g.bias", vec![k], vec![0.0; k]);

        Ok(Backbone {
            cfg,
            params,
            buffers,
            enc,
            dec,
            seg_w,
            seg_b,
            proj_w,
            proj_b,
            g_w,
            g_b,
        })
    }

    /// Rebuilds a network from stored arrays, checking names and shapes.
    pub fn from_parts(cfg: BackboneConfig, params: ParamStore, buffers: ParamStore) -> Result<Self> {
        let mut net = Backbone::new(cfg, 0)?;
        for (store, loaded, what) in [(&mut net.params, &params, "parameter"), (&mut net.buffers, &buffers, "buffer")] {
            if store.len() != loaded.len() {
                return Err(Error::Checkpoint(format!(
                    "expected {} {what} arrays, found {}",
                    store.len(),
                    loaded.len()
                )));
            }
            for id in loaded.ids() {
                let name = loaded.name(id);
                let target = store
                    .find(name)
                    .ok_or_else(|| Error::Checkpoint(format!("unknown {what} `{name}`")))?;
                if store.shape(target) != loaded.shape(id) {
                    return Err(Error::Checkpoint(format!("shape mismatch for {what} `{name}`")));
                }
                store.values_mut_unversioned()[target.0].copy_from_slice(loaded.get(id));
            }
        }
        Ok(net)
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore {
        &self.buffers
    }

    pub fn head_g_ids(&self) -> (ParamId, ParamId) {
        (self.g_w, self.g_b)
    }

    pub fn check_input_size(&self, h: usize, w: usize) -> Result<()> {
        let stride = self.cfg.output_stride();
        if h == 0 || w == 0 || !h.is_multiple_of(stride) || !w.is_multiple_of(stride) {
            return Err(Error::invalid(format!(
                "input size {h}x{w} must be a positive multiple of {stride} (2^(encoder_depth-1))"
            )));
        }
        Ok(())
    }

    /// Ordered description of every layer, used for architecture audits.
    pub fn layer_inventory(&self) -> Vec<LayerInfo> {
        let slope = self.cfg.leaky_slope;
        let mut out = Vec::new();
        let mut push = |name: String, kind: String| out.push(LayerInfo { name, kind });
        let unit_layers = |prefix: &str, push: &mut dyn FnMut(String, String)| {
            push(format!("{prefix}.conv"), "conv3x3".into());
            push(format!("{prefix}.bn"), "batch_norm".into());
            push(format!("{prefix}.act"), format!("leaky_relu({slope})"));
        };
        for s in 0..self.cfg.encoder_depth {
            if s > 0 {
                push(format!("encoder.{s}.pool"), "max_pool2x2".into());
            }
            unit_layers(&format!("encoder.{s}.0"), &mut push);
            unit_layers(&format!("encoder.{s}.1"), &mut push);
        }
        for s in (0..self.cfg.encoder_depth - 1).rev() {
            push(format!("decoder.{s}.up"), "upsample_bilinear".into());
            push(format!("decoder.{s}.cat"), "concat_skip".into());
            unit_layers(&format!("decoder.{s}.0"), &mut push);
            unit_layers(&format!("decoder.{s}.1"), &mut push);
        }
        push("seg_head".into(), "conv1x1".into());
        push("proj".into(), "conv1x1".into());
        push("proj.up".into(), "upsample_bilinear".into());
        push("head_g".into(), "conv1x1".into());
        out
    }

    fn unit_forward(&mut self, u: &ConvUnit, x: Tensor, mode: Mode) -> (Tensor, Option<UnitCache>) {
        let conv = nn::conv2d(&x, self.params.get(u.weight), None, u.cout, 3);
        let gamma = self.params.get(u.gamma);
        let beta = self.params.get(u.beta);
        match mode {
            Mode::Train | Mode::TrainFrozenStats => {
                let (mut y, bn, mean, var) = nn::batch_norm_train(&conv, gamma, beta);
                if mode == Mode::Train {
                    let m = self.cfg.bn_momentum;
                    let vals = self.buffers.values_mut_unversioned();
                    for (r, b) in vals[u.run_mean.0].iter_mut().zip(&mean) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                    for (r, b) in vals[u.run_var.0].iter_mut().zip(&var) {
                        *r = (1.0 - m) * *r + m * b;
                    }
                }
                nn::leaky_relu_inplace(&mut y, self.cfg.leaky_slope);
                let cache = UnitCache { x, bn, out: y.clone() };
                (y, Some(cache))
            }
            Mode::Eval => {
                let mut y = nn::batch_norm_eval(
                    &conv,
                    gamma,
                    beta,
                    self.buffers.get(u.run_mean),
                    self.buffers.get(u.run_var),
                );
                nn::leaky_relu_inplace(&mut y, self.cfg.leaky_slope);
                (y, None)
            }
        }
    }

    fn unit_backward(&self, u: &ConvUnit, cache: &UnitCache, mut dy: Tensor, grads: &mut Grads) -> Tensor {
        nn::leaky_relu_backward_inplace(&cache.out, &mut dy, self.cfg.leaky_slope);
        let gamma = self.params.get(u.gamma);
        let mut dgamma = std::mem::take(&mut grads.values[u.gamma.0]);
        let dconv = nn::batch_norm_backward(&cache.bn, gamma, &dy, &mut dgamma, grads.get_mut(u.beta));
        grads.values[u.gamma.0] = dgamma;
        nn::conv2d_backward(&cache.x, self.params.get(u.weight), &dconv, 3, grads.get_mut(u.weight), None, true)
            .expect("dx requested")
    }

    fn stage_forward(&mut self, st: &Stage, x: Tensor, mode: Mode) -> (Tensor, Option<StageCache>) {
        let (y, ca) = self.unit_forward(&st.a, x, mode);
        let (y, cb) = self.unit_forward(&st.b, y, mode);
        (y, ca.zip(cb).map(|(a, b)| StageCache { a, b }))
    }

    fn stage_backward(&self, st: &Stage, cache: &StageCache, dy: Tensor, grads: &mut Grads) -> Tensor {
        let d = self.unit_backward(&st.b, &cache.b, dy, grads);
        self.unit_backward(&st.a, &cache.a, d, grads)
    }

    /// Runs the network on a `n × 1 × H × W` batch. In the training modes the
    /// returned cache feeds [`Backbone::backward`].
    pub fn forward(&mut self, input: &Tensor, mode: Mode) -> Result<(NetworkOutputs, Option<ForwardCache>)> {
        if input.c != 1 {
            return Err(Error::invalid(format!("expected 1 input channel, got {}", input.c)));
        }
        if input.n == 0 {
            return Err(Error::invalid("empty batch"));
        }
        self.check_input_size(input.h, input.w)?;
        let train = mode != Mode::Eval;
        let param_version = self.params.version();
        let enc = self.enc.clone();
        let dec = self.dec.clone();

        let mut x = input.clone();
        let mut skips = Vec::with_capacity(enc.len());
        let mut enc_caches = Vec::new();
        let mut pools = Vec::new();
        for (s, st) in enc.iter().enumerate() {
            if s > 0 {
                let (p, arg) = nn::max_pool2(&x);
                if train {
                    pools.push((arg, x.h, x.w));
                }
                x = p;
            }
            let (y, c) = self.stage_forward(st, x, mode);
            if let Some(c) = c {
                enc_caches.push(c);
            }
            skips.push(y.clone());
            x = y;
        }
        let deep = x.clone();

        let mut dec_caches = Vec::new();
        for (i, st) in dec.iter().enumerate() {
            let s = enc.len() - 2 - i;
            let skip = &skips[s];
            let (lh, lw) = (x.h, x.w);
            let up = nn::resize_bilinear(&x, skip.h, skip.w);
            let cat = nn::concat_channels(skip, &up);
            let (y, c) = self.stage_forward(st, cat, mode);
            if let Some(c) = c {
                dec_caches.push((c, skip.c, lh, lw));
            }
            x = y;
        }

        let k = self.cfg.num_classes;
        let logits = nn::conv2d(&x, self.params.get(self.seg_w), Some(self.params.get(self.seg_b)), k, 1);
        // Projecting before upsampling equals upsampling then projecting:
        // both maps are linear and the bilinear taps sum to one.
        let zlow = nn::conv2d(
            &deep,
            self.params.get(self.proj_w),
            Some(self.params.get(self.proj_b)),
            self.cfg.hidden_dim,
            1,
        );
        let hidden = nn::resize_bilinear(&zlow, input.h, input.w);

        let cache = train.then(|| ForwardCache {
            param_version,
            enc: enc_caches,
            pools,
            dec: dec_caches,
            head_input: x,
            deep: deep.clone(),
            zlow_hw: (zlow.h, zlow.w),
            out_hw: (input.h, input.w),
        });
        Ok((
            NetworkOutputs {
                logits,
                hidden,
                encoder_features: deep,
            },
            cache,
        ))
    }

    /// Accumulates parameter gradients given upstream gradients of the
    /// logits and/or the hidden features.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        d_logits: Option<&Tensor>,
        d_hidden: Option<&Tensor>,
        grads: &mut Grads,
    ) {
        let depth = self.enc.len();
        let deep = &cache.deep;
        let mut d_deep = Tensor::zeros(deep.n, deep.c, deep.h, deep.w);
        let mut d_skips: Vec<Option<Tensor>> = vec![None; depth];

        if let Some(dl) = d_logits {
            let mut dw = std::mem::take(&mut grads.values[self.seg_w.0]);
            let mut dx = nn::conv2d_backward(
                &cache.head_input,
                self.params.get(self.seg_w),
                dl,
                1,
                &mut dw,
                Some(grads.get_mut(self.seg_b)),
                true,
            )
            .expect("dx requested");
            grads.values[self.seg_w.0] = dw;

            for (i, st) in self.dec.iter().enumerate().rev() {
                let (sc, skip_c, lh, lw) = &cache.dec[i];
                let dcat = self.stage_backward(st, sc, dx, grads);
                let (dskip, dup) = nn::split_channels(&dcat, *skip_c);
                let s = depth - 2 - i;
                accumulate(&mut d_skips[s], dskip);
                dx = nn::resize_bilinear_backward(&dup, *lh, *lw);
            }
            d_deep.add_assign(&dx);
        }

        if let Some(dz) = d_hidden {
            let (zh, zw) = cache.zlow_hw;
            debug_assert_eq!((dz.h, dz.w), cache.out_hw);
            let dzlow = nn::resize_bilinear_backward(dz, zh, zw);
            let mut dw = std::mem::take(&mut grads.values[self.proj_w.0]);
            let dx = nn::conv2d_backward(
                deep,
                self.params.get(self.proj_w),
                &dzlow,
                1,
                &mut dw,
                Some(grads.get_mut(self.proj_b)),
                true,
            )
            .expect("dx requested");
            grads.values[self.proj_w.0] = dw;
            d_deep.add_assign(&dx);
        }

        // Encoder, deepest stage first.
        let mut dx = d_deep;
        for s in (0..depth).rev() {
            if let Some(ds) = d_skips[s].take() {
                dx.add_assign(&ds);
            }
            dx = self.stage_backward(&self.enc[s], &cache.enc[s], dx, grads);
            if s > 0 {
                let (arg, ih, iw) = &cache.pools[s - 1];
                dx = nn::max_pool2_backward(&dx, arg, *ih, *iw);
            }
        }
    }

    /// `g(z)` applied per pixel: `n × D × H × W` → `n × K × H × W`.
    pub fn head_g(&self, z: &Tensor) -> Result<Tensor> {
        if z.c != self.cfg.hidden_dim {
            return Err(Error::invalid(format!(
                "head g expects {} feature channels, got {}",
                self.cfg.hidden_dim, z.c
            )));
        }
        Ok(nn::conv2d(
            z,
            self.params.get(self.g_w),
            Some(self.params.get(self.g_b)),
            self.cfg.num_classes,
            1,
        ))
    }

    /// Backward of [`Backbone::head_g`]; returns the gradient w.r.t. `z`.
    pub fn head_g_backward(&self, z: &Tensor, d_out: &Tensor, grads: &mut Grads) -> Tensor {
        let mut dw = std::mem::take(&mut grads.values[self.g_w.0]);
        let dz = nn::conv2d_backward(
            z,
            self.params.get(self.g_w),
            d_out,
            1,
            &mut dw,
            Some(grads.get_mut(self.g_b)),
            true,
        )
        .expect("dx requested");
        grads.values[self.g_w.0] = dw;
        dz
    }

    /// `g` applied to the rows of an `rows × D` matrix (e.g. the memory bank).
    pub fn predict_head_g(&self, features: &[f64], rows: usize) -> Result<Vec<f64>> {
        predict_linear(
            self.params.get(self.g_w),
            self.params.get(self.g_b),
            self.cfg.num_classes,
            self.cfg.hidden_dim,
            features,
            rows,
        )
    }

    /// Accumulates the weight/bias gradient of [`Backbone::predict_head_g`].
    /// The features are treated as constants.
    pub fn predict_head_g_backward(&self, features: &[f64], rows: usize, d_logits: &[f64], grads: &mut Grads) {
        let (k, d) = (self.cfg.num_classes, self.cfg.hidden_dim);
        debug_assert_eq!(d_logits.len(), rows * k);
        let dw = grads.get_mut(self.g_w);
        for r in 0..rows {
            let f = &features[r * d..(r + 1) * d];
            for kk in 0..k {
                let g = d_logits[r * k + kk];
                if g != 0.0 {
                    for (w, x) in dw[kk * d..(kk + 1) * d].iter_mut().zip(f) {
                        *w += g * x;
                    }
                }
            }
        }
        let db = grads.get_mut(self.g_b);
        for r in 0..rows {
            for kk in 0..k {
                db[kk] += d_logits[r * k + kk];
            }
        }
    }
}

/// Linear map `rows × D` → `rows × K` with row-major weight `K × D`.
pub fn predict_linear(
    weight: &[f64],
    bias: &[f64],
    k: usize,
    d: usize,
    features: &[f64],
    rows: usize,
) -> Result<Vec<f64>> {
    if features.len() != rows * d {
        return Err(Error::invalid(format!(
            "feature matrix has {} values, expected {rows}x{d}",
            features.len()
        )));
    }
    let mut out = vec![0.0; rows * k];
    for r in 0..rows {
        let f = &features[r * d..(r + 1) * d];
        for kk in 0..k {
            let w = &weight[kk * d..(kk + 1) * d];
            out[r * k + kk] = bias[kk] + w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
        }
    }
    Ok(out)
}

fn accumulate(slot: &mut Option<Tensor>, t: Tensor) {
    match slot {
        Some(s) => s.add_assign(&t),
        None => *slot = Some(t),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> BackboneConfig {
        BackboneConfig {
            encoder_depth: 3,
            init_channels: 2,
            max_channels: 4,
            num_classes: 3,
            hidden_dim: 4,
            ..Default::default()
        }
    }

    fn input(n: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(n, 1, h, w, (0..n * h * w).map(|i| ((i * 7919) % 97) as f64 / 50.0 - 1.0).collect())
    }

    #[test]
    fn default_channel_schedule() {
        let cfg = BackboneConfig::default();
        assert_eq!(cfg.channel_schedule(), vec![32, 64, 128, 256, 512, 512]);
        assert_eq!(cfg.output_stride(), 32);
    }

    #[test]
    fn rejects_indivisible_size() {
        let mut net = Backbone::new(tiny_cfg(), 1).unwrap();
        let err = net.forward(&input(1, 10, 8), Mode::Eval).unwrap_err();
        assert!(err.to_string().contains("multiple of 4"), "{err}");
    }

    #[test]
    fn output_shapes_follow_input() {
        let mut net = Backbone::new(tiny_cfg(), 1).unwrap();
        let (out, _) = net.forward(&input(2, 12, 8), Mode::Eval).unwrap();
        assert_eq!(out.logits.shape(), [2, 3, 12, 8]);
        assert_eq!(out.hidden.shape(), [2, 4, 12, 8]);
        assert_eq!(out.encoder_features.shape(), [2, 4, 3, 2]);
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let mut net = Backbone::new(tiny_cfg(), 3).unwrap();
        let x = input(2, 8, 8);
        let (a, _) = net.forward(&x, Mode::Eval).unwrap();
        let (b, _) = net.forward(&x, Mode::Eval).unwrap();
        assert_eq!(a.logits.data, b.logits.data);
        assert_eq!(a.hidden.data, b.hidden.data);
    }

    #[test]
    fn head_g_zero_weights_give_uniform() {
        let mut net = Backbone::new(tiny_cfg(), 3).unwrap();
        let (w, b) = net.head_g_ids();
        net.params_mut().get_mut(w).fill(0.0);
        net.params_mut().get_mut(b).fill(0.0);
        let logits = net.predict_head_g(&[0.3, -1.0, 2.0, 5.0], 1).unwrap();
        assert_eq!(logits, vec![0.0; 3]);
        assert!(net.predict_head_g(&[0.3, -1.0, 2.0], 1).is_err());
    }

    #[test]
    fn inventory_lists_leaky_slope_and_heads() {
        let net = Backbone::new(BackboneConfig::default(), 0).unwrap();
        let inv = net.layer_inventory();
        assert!(inv.iter().filter(|l| l.kind.starts_with("leaky_relu")).all(|l| l.kind == "leaky_relu(0.01)"));
        assert_eq!(inv.iter().filter(|l| l.kind == "conv3x3").count(), 2 * 6 + 2 * 5);
        assert_eq!(inv.iter().filter(|l| l.kind == "max_pool2x2").count(), 5);
        let seg = inv.iter().find(|l| l.name == "seg_head").unwrap();
        assert_eq!(seg.kind, "conv1x1");
    }
}
