use crate::error::Result;
use crate::grid::Grid;

use super::{DatasetSpec, ImageSample, ScribbleLabel, UNLABELED};

/// Source coordinate (in pixels) of output index `o` when resizing
/// `n_in` samples to `n_out` with half-pixel centers.
#[inline]
fn source_coord(o: usize, n_in: usize, n_out: usize) -> f64 {
    (o as f64 + 0.5) * (n_in as f64 / n_out as f64) - 0.5
}

fn bilinear_resize(img: &Grid<f64>, rows: usize, cols: usize) -> Grid<f64> {
    let (ir, ic) = img.shape();
    if (ir, ic) == (rows, cols) {
        return img.clone();
    }
    let taps = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let s = source_coord(o, n_in, n_out).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let tr = taps(ir, rows);
    let tc = taps(ic, cols);
    Grid::from_fn(rows, cols, |r, c| {
        let (r0, r1, lr) = tr[r];
        let (c0, c1, lc) = tc[c];
        let top = img.value(r0, c0) * (1.0 - lc) + img.value(r0, c1) * lc;
        let bot = img.value(r1, c0) * (1.0 - lc) + img.value(r1, c1) * lc;
        top * (1.0 - lr) + bot * lr
    })
}

fn nearest_resize(labels: &Grid<u8>, rows: usize, cols: usize) -> Grid<u8> {
    let (ir, ic) = labels.shape();
    if (ir, ic) == (rows, cols) {
        return labels.clone();
    }
    let idx = |o: usize, n_in: usize, n_out: usize| -> usize {
        (((o as f64 + 0.5) * (n_in as f64 / n_out as f64)).floor() as usize).min(n_in - 1)
    };
    Grid::from_fn(rows, cols, |r, c| labels.value(idx(r, ir, rows), idx(c, ic, cols)))
}

/// Resamples a sample to `target_spacing`: bilinear for the image, nearest
/// neighbor for scribble and mask. The new size is the physical extent
/// divided by the target spacing, rounded.
pub fn resample(sample: &ImageSample, target_spacing: (f64, f64)) -> Result<ImageSample> {
    sample.validate()?;
    let (rows, cols) = sample.shape();
    let new_rows = ((rows as f64 * sample.spacing.0 / target_spacing.0).round() as usize).max(1);
    let new_cols = ((cols as f64 * sample.spacing.1 / target_spacing.1).round() as usize).max(1);
    let image = bilinear_resize(&sample.image, new_rows, new_cols);
    let scribble = ScribbleLabel::new(
        nearest_resize(sample.scribble.labels(), new_rows, new_cols),
        sample.num_classes(),
    )?;
    let gt_mask = sample.gt_mask.as_ref().map(|g| nearest_resize(g, new_rows, new_cols));
    ImageSample::new(image, scribble, gt_mask, sample.patient_id.clone(), target_spacing)
}

/// Offset mapping target index `t` to source index `t + offset` along one
/// axis of length `src` centered into length `dst`.
pub(crate) fn center_offset(src: usize, dst: usize) -> isize {
    if src >= dst {
        ((src - dst) / 2) as isize
    } else {
        -(((dst - src) / 2) as isize)
    }
}

/// Symmetric center crop or pad of a grid to `(rows, cols)`, filling new
/// pixels with `fill`. When the difference is odd, the extra row/column is
/// cropped from (or padded at) the end.
pub fn center_crop_or_pad<T: Copy>(grid: &Grid<T>, rows: usize, cols: usize, fill: T) -> Grid<T> {
    let (sr, sc) = grid.shape();
    let (or, oc) = (center_offset(sr, rows), center_offset(sc, cols));
    Grid::from_fn(rows, cols, |r, c| {
        grid.at(r as isize + or, c as isize + oc).copied().unwrap_or(fill)
    })
}

/// Resample to the target spacing, then center-crop/pad to the target
/// size. Images pad with 0, scribbles with UNLABELED, masks with
/// background.
pub fn preprocess(sample: &ImageSample, spec: &DatasetSpec) -> Result<ImageSample> {
    spec.validate()?;
    let resampled = resample(sample, spec.target_spacing)?;
    let (rows, cols) = spec.target_size;
    let image = center_crop_or_pad(&resampled.image, rows, cols, 0.0);
    let scribble = ScribbleLabel::new(
        center_crop_or_pad(resampled.scribble.labels(), rows, cols, UNLABELED),
        resampled.num_classes(),
    )?;
    let gt_mask = resampled
        .gt_mask
        .as_ref()
        .map(|g| center_crop_or_pad(g, rows, cols, 0u8));
    ImageSample::new(image, scribble, gt_mask, resampled.patient_id, spec.target_spacing)
}
