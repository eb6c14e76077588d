//! Training loop: two augmented views through one network, the variant's
//! loss terms, the memory bank, Adam with an epoch-wise polynomial
//! schedule, metric logs and checkpoints.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_common, apply_further, CommonAugmentConfig, FurtherAugmentConfig};
use crate::backbone::{Backbone, BackboneConfig, Mode};
use crate::checkpoint;
use crate::data::{FoldSplit, ImageSample};
use crate::error::{Error, Result};
use crate::losses::{self, LossBreakdown, LossParts, LossWeights};
use crate::memory_bank::{MemoryBank, DEFAULT_MOMENTUM};
use crate::metrics::{evaluate_model, EvalResult};
use crate::nn::{Grads, Tensor};
use crate::optim::{lr_scale, Adam, AdamConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Partial cross-entropy, entropy, memory bank and consistency.
    Full,
    /// Partial cross-entropy only.
    BaselinePce,
    /// Partial cross-entropy plus entropy.
    Entmin,
    /// Entropy plus the memory-bank terms.
    EntminMemory,
    /// Dense cross-entropy against the full masks.
    FullsupCe,
    /// Dense cross-entropy plus soft Dice.
    FullsupCeDice,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::BaselinePce,
        Variant::Entmin,
        Variant::EntminMemory,
        Variant::FullsupCe,
        Variant::FullsupCeDice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::BaselinePce => "baseline_pce",
            Variant::Entmin => "entmin",
            Variant::EntminMemory => "entmin_memory",
            Variant::FullsupCe => "fullsup_ce",
            Variant::FullsupCeDice => "fullsup_ce_dice",
        }
    }

    pub fn uses_entropy(self) -> bool {
        matches!(self, Variant::Full | Variant::Entmin | Variant::EntminMemory)
    }

    pub fn uses_memory(self) -> bool {
        matches!(self, Variant::Full | Variant::EntminMemory)
    }

    pub fn uses_consistency(self) -> bool {
        self == Variant::Full
    }

    pub fn fully_supervised(self) -> bool {
        matches!(self, Variant::FullsupCe | Variant::FullsupCeDice)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// When the memory bank is refreshed relative to the memory loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankOrder {
    /// Update with this step's features, then compute `g(M)`.
    #[default]
    UpdateThenLoss,
    /// Compute `g(M)` with the previous bank, then update.
    LossThenUpdate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub optimizer: AdamConfig,
    pub batch_size: usize,
    pub num_epochs: usize,
    pub lr_power: f64,
    pub loss: LossWeights,
    pub variant: Variant,
    pub stop_gradient: bool,
    pub memory_momentum: f64,
    pub bank_order: BankOrder,
    /// Whether the further-augmented forward also updates batch-norm
    /// running statistics.
    pub further_updates_bn_stats: bool,
    pub n_folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamConfig::default(),
            batch_size: 12,
            num_epochs: 400,
            lr_power: 0.9,
            loss: LossWeights::default(),
            variant: Variant::Full,
            stop_gradient: false,
            memory_momentum: DEFAULT_MOMENTUM,
            bank_order: BankOrder::default(),
            further_updates_bn_stats: true,
            n_folds: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        self.loss.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be at least 1"));
        }
        if self.num_epochs == 0 {
            return Err(Error::invalid("num_epochs must be at least 1"));
        }
        if !(self.lr_power >= 0.0) {
            return Err(Error::invalid("lr_power must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.memory_momentum) {
            return Err(Error::invalid("memory_momentum must lie in [0, 1)"));
        }
        if self.n_folds < 2 {
            return Err(Error::invalid("n_folds must be at least 2"));
        }
        Ok(())
    }
}

/// Everything that defines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSetup {
    pub backbone: BackboneConfig,
    pub common: CommonAugmentConfig,
    pub further: FurtherAugmentConfig,
    pub train: TrainConfig,
}

impl TrainSetup {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.common.validate()?;
        self.further.validate()?;
        self.train.validate()
    }
}

/// One row of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub epoch: usize,
    /// Global step count after this row.
    pub step: usize,
    pub pce: f64,
    pub cr: f64,
    pub ent: f64,
    pub aux: f64,
    pub m: f64,
    pub total: f64,
    pub r_t: f64,
    pub lr_scale: f64,
}

impl LogRow {
    fn new(epoch: usize, step: usize, b: &LossBreakdown, lr_scale: f64) -> Self {
        LogRow {
            epoch,
            step,
            pce: b.pce,
            cr: b.cr,
            ent: b.ent,
            aux: b.aux,
            m: b.m,
            total: b.total,
            r_t: b.r_t,
            lr_scale,
        }
    }
}

pub const LOG_HEADER: &str = "epoch,step,pce,cr,ent,aux,m,total,r_t,lr_scale";

/// Formats rows as CSV with [`LOG_HEADER`]; floats use the shortest
/// round-trip representation.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.epoch, r.step, r.pce, r.cr, r.ent, r.aux, r.m, r.total, r.r_t, r.lr_scale
        ));
    }
    s
}

/// Complete mutable training state. Per-sample randomness is derived from
/// `(seed, epoch, sample index)`, so no generator state needs saving.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Next epoch to run.
    pub epoch: usize,
    pub step: usize,
    pub model: Backbone,
    pub optimizer: Adam,
    pub bank: MemoryBank,
    pub epoch_log: Vec<LogRow>,
    pub step_log: Vec<LogRow>,
}

impl TrainState {
    pub fn new(setup: &TrainSetup) -> Result<Self> {
        setup.validate()?;
        let model = Backbone::new(setup.backbone.clone(), setup.train.seed)?;
        let optimizer = Adam::new(setup.train.optimizer.clone(), model.params())?;
        let bank = MemoryBank::new(setup.backbone.num_classes, setup.backbone.hidden_dim, setup.train.memory_momentum)?;
        Ok(TrainState {
            epoch: 0,
            step: 0,
            model,
            optimizer,
            bank,
            epoch_log: Vec::new(),
            step_log: Vec::new(),
        })
    }
}

/// Views of one minibatch: the common view with its labels and the
/// further view's image.
#[derive(Debug, Clone)]
pub struct Batch {
    pub common: Tensor,
    pub further: Tensor,
    pub scribble: Vec<u8>,
    pub dense: Option<Vec<u8>>,
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Seed of an independent stream for `(seed, epoch, index)`.
pub fn stream_seed(seed: u64, epoch: usize, index: u64) -> u64 {
    splitmix(splitmix(splitmix(seed) ^ epoch as u64) ^ index)
}

const SHUFFLE_STREAM: u64 = u64::MAX;

/// Augments `samples` (indices into the training set) into a batch.
pub fn make_batch(samples: &[(usize, &ImageSample)], setup: &TrainSetup, epoch: usize) -> Result<Batch> {
    let mut common = Vec::new();
    let mut further = Vec::new();
    let mut scribble = Vec::new();
    let mut dense = Some(Vec::new());
    let mut hw = None;
    for &(idx, s) in samples {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(setup.train.seed, epoch, idx as u64));
        let view = apply_common(s, &setup.common, &mut rng)?;
        let beta = apply_further(&view.image, &setup.further, &mut rng)?;
        let shape = view.shape();
        if *hw.get_or_insert(shape) != shape {
            return Err(Error::invalid("training samples must share one size"));
        }
        common.extend_from_slice(view.image.as_slice());
        further.extend_from_slice(beta.as_slice());
        scribble.extend_from_slice(view.scribble.as_slice());
        match (&mut dense, &view.gt_mask) {
            (Some(d), Some(g)) => d.extend_from_slice(g.as_slice()),
            _ => dense = None,
        }
    }
    let (h, w) = hw.ok_or_else(|| Error::invalid("empty batch"))?;
    let n = samples.len();
    Ok(Batch {
        common: Tensor::from_vec(n, 1, h, w, common),
        further: Tensor::from_vec(n, 1, h, w, further),
        scribble,
        dense,
    })
}

fn add_scaled(dst: &mut Tensor, src: &Tensor, s: f64) {
    for (d, v) in dst.data.iter_mut().zip(&src.data) {
        *d += s * v;
    }
}

fn non_finite(term: &str, step: usize) -> Error {
    Error::NonFinite {
        term: term.into(),
        step: Some(step),
    }
}

/// Loss and gradients of one step without touching the parameters.
/// Mutates batch-norm running statistics and the memory bank.
pub fn compute_gradients(state: &mut TrainState, batch: &Batch, setup: &TrainSetup, epoch: usize) -> Result<(LossBreakdown, Grads)> {
    let cfg = &setup.train;
    let variant = cfg.variant;
    let step = state.step;
    let weights = &cfg.loss;
    let r_t = losses::warmup_factor(epoch, weights.warmup_epochs, weights.eta)?;
    let mut grads = state.model.params().zeros_like();
    let mut parts = LossParts::default();

    let (out_c, cache_c) = state.model.forward(&batch.common, Mode::Train)?;
    let cache_c = cache_c.expect("train mode keeps a cache");
    if !out_c.logits.all_finite() {
        return Err(non_finite("logits", step));
    }
    let logits = &out_c.logits;

    let mut d_logits;
    let mut d_hidden = None;
    if variant.fully_supervised() {
        let dense = batch
            .dense
            .as_ref()
            .ok_or_else(|| Error::invalid("fully supervised training needs dense masks"))?;
        let (ce, g) = losses::cross_entropy_grad(logits, dense)?;
        parts.pce = ce;
        d_logits = g;
        if variant == Variant::FullsupCeDice {
            let (dl, gd) = losses::soft_dice_loss_grad(logits, dense)?;
            parts.pce += dl;
            d_logits.add_assign(&gd);
        }
    } else {
        let (pce, g) = losses::partial_cross_entropy_grad(logits, &batch.scribble)?;
        parts.pce = pce;
        d_logits = g;
        if variant.uses_entropy() {
            let (ent, g) = losses::entropy_regularization_grad(logits)?;
            parts.ent = ent;
            add_scaled(&mut d_logits, &g, r_t);
        }
        if variant.uses_memory() {
            let z = &out_c.hidden;
            if cfg.bank_order == BankOrder::UpdateThenLoss {
                let means = state.bank.all_class_means(z, &batch.scribble)?;
                state.bank.update(&means)?;
            }
            let gz = state.model.head_g(z)?;
            let (aux, g) = losses::auxiliary_loss_grad(&gz, &batch.scribble)?;
            parts.aux = aux;
            let mut g = g;
            g.scale(weights.lambda_aux);
            d_hidden = Some(state.model.head_g_backward(z, &g, &mut grads));

            let k = state.bank.num_classes();
            let bank_rows = state.bank.as_slice().to_vec();
            let bank_logits = state.model.predict_head_g(&bank_rows, k)?;
            let (m, gm) = losses::memory_loss_grad(&bank_logits, k)?;
            parts.m = m;
            let gm: Vec<f64> = gm.iter().map(|v| v * weights.lambda_mem).collect();
            state.model.predict_head_g_backward(&bank_rows, k, &gm, &mut grads);
            if cfg.bank_order == BankOrder::LossThenUpdate {
                let means = state.bank.all_class_means(z, &batch.scribble)?;
                state.bank.update(&means)?;
            }
        }
        if variant.uses_consistency() {
            let mode = if cfg.further_updates_bn_stats { Mode::Train } else { Mode::TrainFrozenStats };
            let (out_f, cache_f) = state.model.forward(&batch.further, mode)?;
            let cache_f = cache_f.expect("train mode keeps a cache");
            if cache_f.param_version() != cache_c.param_version() {
                return Err(Error::invalid("siamese branches saw different parameter versions"));
            }
            if !out_f.logits.all_finite() {
                return Err(non_finite("logits_further", step));
            }
            let cg = losses::consistency_regularization_grad(logits, &out_f.logits, cfg.stop_gradient)?;
            parts.cr = cg.value;
            if let Some(dc) = &cg.d_common {
                add_scaled(&mut d_logits, dc, r_t);
            }
            let mut df = cg.d_further;
            df.scale(r_t);
            state.model.backward(&cache_f, Some(&df), None, &mut grads);
        }
    }

    let breakdown = losses::total_loss(parts, weights, epoch).map_err(|e| match e {
        Error::NonFinite { term, .. } => Error::NonFinite { term, step: Some(step) },
        other => other,
    })?;
    state.model.backward(&cache_c, Some(&d_logits), d_hidden.as_ref(), &mut grads);
    if !grads.all_finite() {
        return Err(non_finite("gradient", step));
    }
    Ok((breakdown, grads))
}

/// One optimization step on a prepared batch.
pub fn train_step(state: &mut TrainState, batch: &Batch, setup: &TrainSetup, epoch: usize) -> Result<LossBreakdown> {
    let (breakdown, grads) = compute_gradients(state, batch, setup, epoch)?;
    let scale = lr_scale(epoch, setup.train.num_epochs, setup.train.lr_power)?;
    state.optimizer.update(state.model.params_mut(), &grads, scale)?;
    state.step += 1;
    Ok(breakdown)
}

/// Runs epoch `state.epoch` over `train` and appends its log rows.
pub fn run_epoch(state: &mut TrainState, train: &[&ImageSample], setup: &TrainSetup) -> Result<LogRow> {
    if train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    let epoch = state.epoch;
    if epoch >= setup.train.num_epochs {
        return Err(Error::invalid(format!("epoch {epoch} beyond num_epochs {}", setup.train.num_epochs)));
    }
    let scale = lr_scale(epoch, setup.train.num_epochs, setup.train.lr_power)?;
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(stream_seed(setup.train.seed, epoch, SHUFFLE_STREAM)));
    let mut sum = [0.0; 6];
    let mut count = 0usize;
    let mut r_t = 0.0;
    for chunk in order.chunks(setup.train.batch_size) {
        let items: Vec<(usize, &ImageSample)> = chunk.iter().map(|&i| (i, train[i])).collect();
        let batch = make_batch(&items, setup, epoch)?;
        let b = train_step(state, &batch, setup, epoch)?;
        state.step_log.push(LogRow::new(epoch, state.step, &b, scale));
        for (acc, v) in sum.iter_mut().zip([b.pce, b.cr, b.ent, b.aux, b.m, b.total]) {
            *acc += v;
        }
        r_t = b.r_t;
        count += 1;
    }
    let n = count as f64;
    let mean = LossBreakdown {
        pce: sum[0] / n,
        cr: sum[1] / n,
        ent: sum[2] / n,
        aux: sum[3] / n,
        m: sum[4] / n,
        total: sum[5] / n,
        r_t,
    };
    let row = LogRow::new(epoch, state.step, &mean, scale);
    state.epoch_log.push(row);
    state.epoch += 1;
    log::info!(
        "epoch {epoch}: total {:.5} pce {:.5} cr {:.5} ent {:.5} aux {:.5} m {:.5} r_t {:.4} lr_scale {:.4}",
        mean.total,
        mean.pce,
        mean.cr,
        mean.ent,
        mean.aux,
        mean.m,
        r_t,
        scale
    );
    Ok(row)
}

/// Output files of one fold.
#[derive(Debug, Clone)]
pub struct FoldOutcome {
    pub fold: usize,
    pub train_patients: Vec<String>,
    pub test_patients: Vec<String>,
    pub state: TrainState,
    pub eval: EvalResult,
    pub dir: Option<PathBuf>,
}

pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const EPOCH_LOG: &str = "metrics.csv";
pub const STEP_LOG: &str = "steps.csv";
pub const EVAL_CSV: &str = "eval.csv";

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes both metric logs into `dir`.
pub fn write_logs(state: &TrainState, dir: &Path) -> Result<()> {
    write_file(&dir.join(EPOCH_LOG), &log_csv(&state.epoch_log))?;
    write_file(&dir.join(STEP_LOG), &log_csv(&state.step_log))
}

/// Trains from `state` until `num_epochs`, saving the lowest-pce epoch as
/// the best checkpoint and the final weights as the last one when `dir`
/// is given.
pub fn train_to_end(state: &mut TrainState, train: &[&ImageSample], setup: &TrainSetup, dir: Option<&Path>) -> Result<()> {
    let mut best = state
        .epoch_log
        .iter()
        .map(|r| r.pce)
        .fold(f64::INFINITY, f64::min);
    while state.epoch < setup.train.num_epochs {
        let row = run_epoch(state, train, setup)?;
        if let Some(dir) = dir {
            if row.pce < best {
                best = row.pce;
                checkpoint::save(&dir.join(BEST_CHECKPOINT), setup, state)?;
            }
            checkpoint::save(&dir.join(LAST_CHECKPOINT), setup, state)?;
            write_logs(state, dir)?;
        }
    }
    Ok(())
}

/// Trains fold `fold` on the other folds' patients and evaluates the
/// final weights on the held-out patients.
pub fn fit_fold(dataset: &[ImageSample], folds: &FoldSplit, fold: usize, setup: &TrainSetup, out_dir: Option<&Path>) -> Result<FoldOutcome> {
    setup.validate()?;
    let test_patients = folds.held_out(fold)?.to_vec();
    let train_patients = folds.training(fold)?;
    if train_patients.iter().any(|p| test_patients.contains(p)) {
        return Err(Error::invalid("training and held-out patients overlap"));
    }
    let train: Vec<&ImageSample> = dataset.iter().filter(|s| train_patients.contains(&s.patient_id)).collect();
    if train.is_empty() {
        return Err(Error::invalid(format!("fold {fold} has an empty training split")));
    }
    if let Some(bad) = dataset.iter().find(|s| s.num_classes() != setup.backbone.num_classes) {
        return Err(Error::invalid(format!(
            "sample of patient {} has {} classes, backbone expects {}",
            bad.patient_id,
            bad.num_classes(),
            setup.backbone.num_classes
        )));
    }
    let dir = match out_dir {
        Some(d) => {
            let dir = d.join(format!("fold{fold}"));
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            Some(dir)
        }
        None => None,
    };
    let mut state = TrainState::new(setup)?;
    train_to_end(&mut state, &train, setup, dir.as_deref())?;
    let eval = evaluate_model(&mut state.model, dataset, &test_patients, fold)?;
    if let Some(dir) = &dir {
        eval.write_csv(&dir.join(EVAL_CSV))?;
    }
    Ok(FoldOutcome {
        fold,
        train_patients,
        test_patients,
        state,
        eval,
        dir,
    })
}

/// Runs [`fit_fold`] for every fold in `which` (all folds when `None`).
pub fn fit(dataset: &[ImageSample], folds: &FoldSplit, setup: &TrainSetup, out_dir: Option<&Path>, which: Option<&[usize]>) -> Result<Vec<FoldOutcome>> {
    let all: Vec<usize> = (0..folds.num_folds()).collect();
    which
        .unwrap_or(&all)
        .iter()
        .map(|&f| fit_fold(dataset, folds, f, setup, out_dir))
        .collect()
}
