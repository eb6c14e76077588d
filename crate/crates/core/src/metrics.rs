//! Dice and HD95, per-patient evaluation, and report rendering.
//!
//! Patients are the unit of evaluation: slice masks of one patient are
//! pooled before a metric is computed. HD95 pools the in-slice surface
//! distances of all slices; a slice where exactly one of the two masks is
//! empty contributes no distances and is counted instead.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::zscore;
use crate::backbone::{Backbone, Mode};
use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::nn::Tensor;

fn same_shape<A, B>(a: &Grid<A>, b: &Grid<B>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::invalid(format!("mask shapes differ: {:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

/// `2|A∩B| / (|A|+|B|)`, 1 when both masks are empty.
pub fn dice(pred: &Grid<bool>, gt: &Grid<bool>) -> Result<f64> {
    same_shape(pred, gt)?;
    let (inter, sum) = overlap_counts(pred, gt);
    Ok(dice_from_counts(inter, sum))
}

fn overlap_counts(pred: &Grid<bool>, gt: &Grid<bool>) -> (usize, usize) {
    let mut inter = 0;
    let mut sum = 0;
    for (&p, &g) in pred.as_slice().iter().zip(gt.as_slice()) {
        inter += usize::from(p && g);
        sum += usize::from(p) + usize::from(g);
    }
    (inter, sum)
}

fn dice_from_counts(inter: usize, sum: usize) -> f64 {
    if sum == 0 {
        1.0
    } else {
        2.0 * inter as f64 / sum as f64
    }
}

/// Mask pixels with a 4-neighbor outside the mask or on the image border.
pub fn surface(mask: &Grid<bool>) -> Grid<bool> {
    let (rows, cols) = mask.shape();
    Grid::from_fn(rows, cols, |r, c| {
        if !mask.value(r, c) {
            return false;
        }
        if r == 0 || c == 0 || r + 1 == rows || c + 1 == cols {
            return true;
        }
        !(mask.value(r - 1, c) && mask.value(r + 1, c) && mask.value(r, c - 1) && mask.value(r, c + 1))
    })
}

/// Exact 1D squared distance transform (lower envelope of parabolas) with
/// sample spacing `step`. `f` holds squared distances or infinity.
fn dt_1d(f: &[f64], step: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let s2 = step * step;
    let key = |q: usize| f[q] + s2 * (q * q) as f64;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            let Some(&last) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = (key(q) - key(last)) / (2.0 * s2 * (q - last) as f64);
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (p, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < p as f64 {
            k += 1;
        }
        let d = p as f64 - v[k] as f64;
        *o = s2 * d * d + f[v[k]];
    }
}

/// Squared Euclidean distance (in mm²) from every pixel to the nearest
/// `true` pixel of `sites`; infinity when there is none.
pub fn squared_distance_map(sites: &Grid<bool>, spacing: (f64, f64)) -> Grid<f64> {
    let (rows, cols) = sites.shape();
    let mut tmp = Grid::from_fn(rows, cols, |r, c| if sites.value(r, c) { 0.0 } else { f64::INFINITY });
    let (mut v, mut z) = (Vec::new(), Vec::new());
    // Columns first, then rows.
    let mut col = vec![0.0; rows];
    let mut col_out = vec![0.0; rows];
    for c in 0..cols {
        for r in 0..rows {
            col[r] = tmp.value(r, c);
        }
        dt_1d(&col, spacing.0, &mut col_out, &mut v, &mut z);
        for r in 0..rows {
            tmp.set(r, c, col_out[r]);
        }
    }
    let mut out = Grid::filled(rows, cols, 0.0);
    for r in 0..rows {
        let src = &tmp.as_slice()[r * cols..(r + 1) * cols];
        let dst = &mut out.as_mut_slice()[r * cols..(r + 1) * cols];
        dt_1d(src, spacing.1, dst, &mut v, &mut z);
    }
    out
}

/// Distances from each surface pixel of `from` to the surface of `to`.
fn directed_surface_distances(from: &Grid<bool>, to_dist: &Grid<f64>) -> Vec<f64> {
    from.as_slice()
        .iter()
        .zip(to_dist.as_slice())
        .filter(|(&s, _)| s)
        .map(|(_, &d2)| d2.sqrt())
        .collect()
}

/// Percentile with linear interpolation between order statistics.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    values.sort_by(f64::total_cmp);
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Directed surface distances between two same-slice masks, both ways.
/// `None` when exactly one mask is empty.
fn slice_distances(pred: &Grid<bool>, gt: &Grid<bool>, spacing: (f64, f64)) -> Option<(Vec<f64>, Vec<f64>)> {
    let pe = pred.as_slice().iter().any(|&v| v);
    let ge = gt.as_slice().iter().any(|&v| v);
    match (pe, ge) {
        (false, false) => Some((Vec::new(), Vec::new())),
        (true, true) => {
            let (sp, sg) = (surface(pred), surface(gt));
            let dg = squared_distance_map(&sg, spacing);
            let dp = squared_distance_map(&sp, spacing);
            Some((directed_surface_distances(&sp, &dg), directed_surface_distances(&sg, &dp)))
        }
        _ => None,
    }
}

/// Symmetric 95th-percentile surface distance in mm: the larger of the two
/// directed percentiles. 0 when both masks are empty, `None` (undefined)
/// when exactly one is.
pub fn hd95(pred: &Grid<bool>, gt: &Grid<bool>, spacing: (f64, f64)) -> Result<Option<f64>> {
    same_shape(pred, gt)?;
    check_spacing(spacing)?;
    Ok(slice_distances(pred, gt, spacing).map(|(mut a, mut b)| symmetric_p95(&mut a, &mut b)))
}

fn symmetric_p95(a: &mut [f64], b: &mut [f64]) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 0.0;
    }
    percentile(a, 95.0).max(percentile(b, 95.0))
}

fn check_spacing(spacing: (f64, f64)) -> Result<()> {
    if !(spacing.0 > 0.0 && spacing.1 > 0.0) {
        return Err(Error::invalid("spacing must be positive"));
    }
    Ok(())
}

/// Metrics of one class for one patient, pooled over its slices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub fold: usize,
    pub patient_id: String,
    pub class: usize,
    pub dsc: f64,
    /// `None` when undefined (exactly one of the pooled masks is empty).
    pub hd95: Option<f64>,
    /// Slices whose in-slice distances were skipped because exactly one
    /// mask was empty there.
    pub one_sided_slices: usize,
}

/// Pools slice masks of one patient and one class.
pub fn patient_metrics(pairs: &[(Grid<bool>, Grid<bool>)], spacing: (f64, f64)) -> Result<(f64, Option<f64>, usize)> {
    check_spacing(spacing)?;
    let (mut inter, mut sum) = (0, 0);
    let (mut ab, mut ba) = (Vec::new(), Vec::new());
    let mut one_sided = 0;
    for (pred, gt) in pairs {
        same_shape(pred, gt)?;
        let (i, s) = overlap_counts(pred, gt);
        inter += i;
        sum += s;
        match slice_distances(pred, gt, spacing) {
            Some((a, b)) => {
                ab.extend(a);
                ba.extend(b);
            }
            None => one_sided += 1,
        }
    }
    let dsc = dice_from_counts(inter, sum);
    let hd = if ab.is_empty() && ba.is_empty() {
        // No slice had both masks: both empty everywhere, or only one-sided.
        (one_sided == 0).then_some(0.0)
    } else {
        Some(symmetric_p95(&mut ab, &mut ba))
    };
    Ok((dsc, hd, one_sided))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    /// Sample standard deviation (n − 1 denominator; 0 for one entry).
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Summary { mean, sd, n })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: usize,
    pub dsc: Option<Summary>,
    pub hd95: Option<Summary>,
    pub hd95_undefined: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub cases: Vec<CaseMetrics>,
    /// Foreground classes only.
    pub per_class: Vec<ClassSummary>,
    /// Over all defined foreground (patient, class) entries.
    pub overall: ClassSummary,
    /// Patients skipped because some slice lacked a dense mask.
    pub skipped_patients: usize,
}

impl EvalResult {
    /// Summaries recomputed from `cases`.
    pub fn from_cases(cases: Vec<CaseMetrics>, num_classes: usize, skipped_patients: usize) -> Self {
        let summarize = |filter: &dyn Fn(&CaseMetrics) -> bool, class: usize| {
            let sel: Vec<&CaseMetrics> = cases.iter().filter(|c| filter(c)).collect();
            let d: Vec<f64> = sel.iter().map(|c| c.dsc).collect();
            let h: Vec<f64> = sel.iter().filter_map(|c| c.hd95).collect();
            ClassSummary {
                class,
                dsc: Summary::of(&d),
                hd95: Summary::of(&h),
                hd95_undefined: sel.iter().filter(|c| c.hd95.is_none()).count(),
            }
        };
        let per_class = (1..num_classes).map(|k| summarize(&|c| c.class == k, k)).collect();
        let overall = summarize(&|c| c.class >= 1, 0);
        EvalResult {
            cases,
            per_class,
            overall,
            skipped_patients,
        }
    }

    pub fn mean_dsc(&self) -> f64 {
        self.overall.dsc.as_ref().map_or(f64::NAN, |s| s.mean)
    }

    /// Concatenates the cases of several folds and recomputes summaries.
    pub fn merge(results: &[EvalResult], num_classes: usize) -> Self {
        let cases = results.iter().flat_map(|r| r.cases.iter().cloned()).collect();
        let skipped = results.iter().map(|r| r.skipped_patients).sum();
        Self::from_cases(cases, num_classes, skipped)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|source| Error::Json { path: path.to_path_buf(), source })?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// One row per case followed by one summary row per class and overall.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,fold,patient_id,class,dsc,dsc_sd,hd95,hd95_sd,n,hd95_undefined\n");
        for c in &self.cases {
            let hd = c.hd95.map(|v| v.to_string()).unwrap_or_else(|| "UNDEFINED".into());
            let _ = writeln!(s, "case,{},{},{},{},,{},,1,{}", c.fold, c.patient_id, c.class, c.dsc, hd, u8::from(c.hd95.is_none()));
        }
        let fmt = |o: &Option<Summary>| o.as_ref().map_or((String::new(), String::new()), |s| (s.mean.to_string(), s.sd.to_string()));
        for (label, cs) in self.per_class.iter().map(|c| (c.class.to_string(), c)).chain(std::iter::once(("all".to_string(), &self.overall))) {
            let (dm, dsd) = fmt(&cs.dsc);
            let (hm, hsd) = fmt(&cs.hd95);
            let n = cs.dsc.as_ref().map_or(0, |s| s.n);
            let _ = writeln!(s, "summary,,,{label},{dm},{dsd},{hm},{hsd},{n},{}", cs.hd95_undefined);
        }
        s
    }

    /// `MEAN(SD)` table with one row per foreground class and an average
    /// row.
    pub fn render_table(&self, class_names: &[String]) -> String {
        let name = |k: usize| class_names.get(k).cloned().unwrap_or_else(|| format!("class {k}"));
        let cell = |s: &Option<Summary>| s.as_ref().map_or("-".to_string(), |s| format!("{:.1}({:.1})", s.mean, s.sd));
        let pct = |s: &Option<Summary>| {
            s.as_ref().map(|s| Summary {
                mean: 100.0 * s.mean,
                sd: 100.0 * s.sd,
                n: s.n,
            })
        };
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:>14} {:>14} {:>10}", "class", "DSC (%)", "HD95 (mm)", "undefined");
        let rows = self.per_class.iter().map(|c| (name(c.class), c)).chain(std::iter::once(("Avg".to_string(), &self.overall)));
        for (label, c) in rows {
            let _ = writeln!(out, "{:<16} {:>14} {:>14} {:>10}", label, cell(&pct(&c.dsc)), cell(&c.hd95), c.hd95_undefined);
        }
        if self.skipped_patients > 0 {
            let _ = writeln!(out, "skipped patients without dense masks: {}", self.skipped_patients);
        }
        let _ = writeln!(out, "HD95 pools in-slice surface distances per patient");
        out
    }
}

/// z-scores each image and returns the argmax label map from an
/// inference-mode forward, in batches of `batch_size`.
pub fn predict(model: &mut Backbone, samples: &[&ImageSample], batch_size: usize) -> Result<Vec<Grid<u8>>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let (h, w) = chunk[0].shape();
        if chunk.iter().any(|s| s.shape() != (h, w)) {
            return Err(Error::invalid("prediction batch mixes image sizes"));
        }
        let mut data = Vec::with_capacity(chunk.len() * h * w);
        for s in chunk {
            data.extend_from_slice(zscore(&s.image).as_slice());
        }
        let x = Tensor::from_vec(chunk.len(), 1, h, w, data);
        let (outputs, _) = model.forward(&x, Mode::Eval)?;
        let logits = outputs.logits;
        let (k, hw) = (logits.c, logits.plane());
        for n in 0..chunk.len() {
            let l = logits.sample(n);
            let labels = (0..hw)
                .map(|i| {
                    let mut best = 0;
                    for c in 1..k {
                        if l[c * hw + i] > l[best * hw + i] {
                            best = c;
                        }
                    }
                    best as u8
                })
                .collect();
            out.push(Grid::from_vec(h, w, labels)?);
        }
    }
    Ok(out)
}

/// Per-patient, per-foreground-class metrics of predicted label maps.
/// Patients with any slice lacking a dense mask are skipped and counted.
pub fn evaluate_predictions(samples: &[&ImageSample], predictions: &[Grid<u8>], num_classes: usize, fold: usize) -> Result<EvalResult> {
    if samples.len() != predictions.len() {
        return Err(Error::invalid("one prediction per sample required"));
    }
    let mut by_patient: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        by_patient.entry(s.patient_id.as_str()).or_default().push(i);
    }
    let mut cases = Vec::new();
    let mut skipped = 0;
    for (pid, idxs) in by_patient {
        if idxs.iter().any(|&i| samples[i].gt_mask.is_none()) {
            log::warn!("patient {pid}: missing dense mask, skipped");
            skipped += 1;
            continue;
        }
        let spacing = samples[idxs[0]].spacing;
        if idxs.iter().any(|&i| samples[i].spacing != spacing) {
            return Err(Error::invalid(format!("patient {pid} mixes slice spacings")));
        }
        for k in 1..num_classes as u8 {
            let pairs: Vec<(Grid<bool>, Grid<bool>)> = idxs
                .iter()
                .map(|&i| {
                    let gt = samples[i].gt_mask.as_ref().expect("checked above");
                    (predictions[i].map(|&v| v == k), gt.map(|&v| v == k))
                })
                .collect();
            let (dsc, hd, one_sided) = patient_metrics(&pairs, spacing)?;
            cases.push(CaseMetrics {
                fold,
                patient_id: pid.to_string(),
                class: k as usize,
                dsc,
                hd95: hd,
                one_sided_slices: one_sided,
            });
        }
    }
    Ok(EvalResult::from_cases(cases, num_classes, skipped))
}

/// Predicts and evaluates the slices of `patients` (held-out fold).
pub fn evaluate_model(model: &mut Backbone, dataset: &[ImageSample], patients: &[String], fold: usize) -> Result<EvalResult> {
    let selected: Vec<&ImageSample> = dataset.iter().filter(|s| patients.contains(&s.patient_id)).collect();
    if selected.is_empty() {
        return Err(Error::invalid("no slices belong to the evaluated patients"));
    }
    let k = model.config().num_classes;
    if selected.iter().any(|s| s.num_classes() != k) {
        return Err(Error::invalid(format!("model predicts {k} classes, dataset disagrees")));
    }
    let preds = predict(model, &selected, 16)?;
    evaluate_predictions(&selected, &preds, k, fold)
}
