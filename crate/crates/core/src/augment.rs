//! The two augmentation families: ω (intensity normalization, geometry,
//! noise, random crop/pad) and β (brightness, contrast, gamma).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{ImageSample, ScribbleLabel, UNLABELED};
use crate::error::{Error, Result};
use crate::grid::Grid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CommonAugmentConfig {
    pub zoom_prob: f64,
    pub zoom_range: (f64, f64),
    pub elastic_prob: f64,
    /// Control points per axis of the displacement grid.
    pub elastic_grid: usize,
    /// Standard deviation of control-point displacements, in pixels.
    pub elastic_sigma: f64,
    pub rotation_prob: f64,
    /// Rotation angle range in degrees.
    pub rotation_range: (f64, f64),
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub noise_prob: f64,
    /// Range of the noise standard deviation (in z-score units).
    pub noise_sigma_range: (f64, f64),
    /// Output size; `None` keeps the input size.
    pub crop_pad_to: Option<(usize, usize)>,
}

impl Default for CommonAugmentConfig {
    fn default() -> Self {
        CommonAugmentConfig {
            zoom_prob: 0.2,
            zoom_range: (0.85, 1.25),
            elastic_prob: 0.2,
            elastic_grid: 3,
            elastic_sigma: 4.0,
            rotation_prob: 0.2,
            rotation_range: (-30.0, 30.0),
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            noise_prob: 0.15,
            noise_sigma_range: (0.0, 0.1),
            crop_pad_to: None,
        }
    }
}

impl CommonAugmentConfig {
    /// Every transform disabled: only z-score normalization and crop/pad.
    pub fn identity() -> Self {
        CommonAugmentConfig {
            zoom_prob: 0.0,
            elastic_prob: 0.0,
            rotation_prob: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            noise_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("zoom_prob", self.zoom_prob),
            ("elastic_prob", self.elastic_prob),
            ("rotation_prob", self.rotation_prob),
            ("hflip_prob", self.hflip_prob),
            ("vflip_prob", self.vflip_prob),
            ("noise_prob", self.noise_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::invalid(format!("{name} = {p} is not a probability")));
            }
        }
        let ranges = [
            ("zoom_range", self.zoom_range),
            ("rotation_range", self.rotation_range),
            ("noise_sigma_range", self.noise_sigma_range),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!("{name} ({lo}, {hi}) is not ordered")));
            }
        }
        if self.zoom_range.0 <= 0.0 {
            return Err(Error::invalid("zoom_range must be positive"));
        }
        if self.noise_sigma_range.0 < 0.0 {
            return Err(Error::invalid("noise_sigma_range must be non-negative"));
        }
        if self.elastic_grid < 2 {
            return Err(Error::invalid("elastic_grid needs at least 2 control points per axis"));
        }
        if !(self.elastic_sigma >= 0.0 && self.elastic_sigma.is_finite()) {
            return Err(Error::invalid("elastic_sigma must be non-negative"));
        }
        if let Some((r, c)) = self.crop_pad_to {
            if r == 0 || c == 0 {
                return Err(Error::invalid("crop_pad_to components must be positive"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FurtherAugmentConfig {
    /// Strength δ in `[0, 1]`; 0 disables β.
    pub strength: f64,
    /// Probability of applying each of the three operations.
    pub prob: f64,
}

impl Default for FurtherAugmentConfig {
    fn default() -> Self {
        FurtherAugmentConfig { strength: 1.0, prob: 0.8 }
    }
}

impl FurtherAugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.strength) {
            return Err(Error::invalid(format!("augmentation strength {} outside [0, 1]", self.strength)));
        }
        if !(0.0..=1.0).contains(&self.prob) {
            return Err(Error::invalid(format!("further prob {} is not a probability", self.prob)));
        }
        Ok(())
    }

    /// Half-width `0.8·δ` of every sampled magnitude range.
    pub fn half_width(&self) -> f64 {
        0.8 * self.strength
    }
}

/// Zero mean, unit variance. A constant image maps to zeros.
pub fn zscore(image: &Grid<f64>) -> Grid<f64> {
    let n = image.len().max(1) as f64;
    let mean = image.as_slice().iter().sum::<f64>() / n;
    let var = image.as_slice().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std > 0.0 {
        image.map(|v| (v - mean) / std)
    } else {
        image.map(|v| v - mean)
    }
}

pub fn brightness(image: &Grid<f64>, shift: f64) -> Grid<f64> {
    image.map(|v| v + shift)
}

/// Multiplies by `scale`, then clips to the input's own min–max range.
pub fn contrast(image: &Grid<f64>, scale: f64) -> Grid<f64> {
    let (lo, hi) = min_max(image);
    image.map(|v| (v * scale).clamp(lo, hi))
}

/// Min–max normalizes to `[0, 1]`, then raises to `gamma`. A constant
/// image maps to zeros.
pub fn gamma(image: &Grid<f64>, gamma: f64) -> Grid<f64> {
    let (lo, hi) = min_max(image);
    let range = hi - lo;
    if range > 0.0 {
        image.map(|v| ((v - lo) / range).powf(gamma))
    } else {
        image.map(|_| 0.0)
    }
}

fn min_max(image: &Grid<f64>) -> (f64, f64) {
    image
        .as_slice()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// β: brightness, contrast and gamma in sequence, each with probability
/// `cfg.prob`.
pub fn apply_further<R: Rng + ?Sized>(image: &Grid<f64>, cfg: &FurtherAugmentConfig, rng: &mut R) -> Result<Grid<f64>> {
    cfg.validate()?;
    if image.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("further augmentation needs a finite image"));
    }
    if cfg.strength == 0.0 {
        return Ok(image.clone());
    }
    let h = cfg.half_width();
    let mut out = image.clone();
    if rng.random_bool(cfg.prob) {
        out = brightness(&out, rng.random_range(-h..=h));
    }
    if rng.random_bool(cfg.prob) {
        out = contrast(&out, rng.random_range(1.0 - h..=1.0 + h));
    }
    if rng.random_bool(cfg.prob) {
        out = gamma(&out, rng.random_range(1.0 - h..=1.0 + h));
    }
    Ok(out)
}

/// Composite inverse spatial map: output pixel → source coordinate.
struct SpatialMap {
    rows: usize,
    cols: usize,
    zoom: f64,
    /// Control-point displacements `(dr, dc)` on a `g × g` grid.
    elastic: Option<(usize, Vec<(f64, f64)>)>,
    angle: f64,
    hflip: bool,
    vflip: bool,
}

impl SpatialMap {
    fn is_identity(&self) -> bool {
        self.zoom == 1.0 && self.elastic.is_none() && self.angle == 0.0 && !self.hflip && !self.vflip
    }

    fn displacement(&self, r: f64, c: f64) -> (f64, f64) {
        let Some((g, pts)) = &self.elastic else {
            return (0.0, 0.0);
        };
        let g = *g;
        let to_grid = |x: f64, n: usize| {
            let t = if n > 1 { x / (n - 1) as f64 * (g - 1) as f64 } else { 0.0 };
            let t = t.clamp(0.0, (g - 1) as f64);
            let i0 = (t.floor() as usize).min(g - 2);
            (i0, t - i0 as f64)
        };
        let (i0, fr) = to_grid(r, self.rows);
        let (j0, fc) = to_grid(c, self.cols);
        let p = |i: usize, j: usize| pts[i * g + j];
        let lerp = |a: (f64, f64), b: (f64, f64), t: f64| (a.0 + (b.0 - a.0) * t, a.1 + (b.1 - a.1) * t);
        let top = lerp(p(i0, j0), p(i0, j0 + 1), fc);
        let bot = lerp(p(i0 + 1, j0), p(i0 + 1, j0 + 1), fc);
        lerp(top, bot, fr)
    }

    /// Source coordinate of output pixel `(r, c)`. Forward order is zoom,
    /// elastic, rotation, flips; this undoes them in reverse.
    fn source(&self, r: usize, c: usize) -> (f64, f64) {
        let (cr, cc) = ((self.rows as f64 - 1.0) / 2.0, (self.cols as f64 - 1.0) / 2.0);
        let mut y = r as f64;
        let mut x = c as f64;
        if self.vflip {
            y = self.rows as f64 - 1.0 - y;
        }
        if self.hflip {
            x = self.cols as f64 - 1.0 - x;
        }
        if self.angle != 0.0 {
            let (s, co) = self.angle.sin_cos();
            let (dy, dx) = (y - cr, x - cc);
            y = cr + co * dy + s * dx;
            x = cc - s * dy + co * dx;
        }
        let (dy, dx) = self.displacement(y, x);
        y += dy;
        x += dx;
        if self.zoom != 1.0 {
            y = cr + (y - cr) / self.zoom;
            x = cc + (x - cc) / self.zoom;
        }
        (y, x)
    }
}

fn sample_bilinear(img: &Grid<f64>, y: f64, x: f64, fill: f64) -> f64 {
    let (rows, cols) = img.shape();
    if y < -0.5 || x < -0.5 || y > rows as f64 - 0.5 || x > cols as f64 - 0.5 {
        return fill;
    }
    let y = y.clamp(0.0, (rows - 1) as f64);
    let x = x.clamp(0.0, (cols - 1) as f64);
    let (r0, c0) = (y.floor() as usize, x.floor() as usize);
    let (r1, c1) = ((r0 + 1).min(rows - 1), (c0 + 1).min(cols - 1));
    let (fy, fx) = (y - r0 as f64, x - c0 as f64);
    let top = img.value(r0, c0) * (1.0 - fx) + img.value(r0, c1) * fx;
    let bot = img.value(r1, c0) * (1.0 - fx) + img.value(r1, c1) * fx;
    top * (1.0 - fy) + bot * fy
}

fn sample_nearest(labels: &Grid<u8>, y: f64, x: f64, fill: u8) -> u8 {
    labels.at(y.round() as isize, x.round() as isize).copied().unwrap_or(fill)
}

fn warp(sample: &ImageSample, image: &Grid<f64>, map: &SpatialMap) -> (Grid<f64>, Grid<u8>, Option<Grid<u8>>) {
    let (rows, cols) = (map.rows, map.cols);
    let coords: Vec<(f64, f64)> = (0..rows).flat_map(|r| (0..cols).map(move |c| (r, c))).map(|(r, c)| map.source(r, c)).collect();
    let at = |r: usize, c: usize| coords[r * cols + c];
    let img = Grid::from_fn(rows, cols, |r, c| {
        let (y, x) = at(r, c);
        sample_bilinear(image, y, x, 0.0)
    });
    let scr = Grid::from_fn(rows, cols, |r, c| {
        let (y, x) = at(r, c);
        sample_nearest(sample.scribble.labels(), y, x, UNLABELED)
    });
    let gt = sample.gt_mask.as_ref().map(|g| {
        Grid::from_fn(rows, cols, |r, c| {
            let (y, x) = at(r, c);
            sample_nearest(g, y, x, 0)
        })
    });
    (img, scr, gt)
}

fn shifted_window<T: Copy>(grid: &Grid<T>, rows: usize, cols: usize, off: (isize, isize), fill: T) -> Grid<T> {
    Grid::from_fn(rows, cols, |r, c| grid.at(r as isize + off.0, c as isize + off.1).copied().unwrap_or(fill))
}

/// Offset of a random crop (source larger) or random pad (source smaller)
/// along one axis.
fn window_offset<R: Rng + ?Sized>(src: usize, dst: usize, rng: &mut R) -> isize {
    if src >= dst {
        rng.random_range(0..=src - dst) as isize
    } else {
        -(rng.random_range(0..=dst - src) as isize)
    }
}

/// ω: z-score, then zoom, elastic deformation, rotation and flips (one
/// combined resampling, bilinear for the image and nearest for labels),
/// Gaussian noise, and a random crop or pad to `cfg.crop_pad_to`.
pub fn apply_common<R: Rng + ?Sized>(sample: &ImageSample, cfg: &CommonAugmentConfig, rng: &mut R) -> Result<ImageSample> {
    cfg.validate()?;
    sample.validate()?;
    let (rows, cols) = sample.shape();
    let normalized = zscore(&sample.image);

    let mut map = SpatialMap {
        rows,
        cols,
        zoom: 1.0,
        elastic: None,
        angle: 0.0,
        hflip: false,
        vflip: false,
    };
    if rng.random_bool(cfg.zoom_prob) {
        map.zoom = sample_range(rng, cfg.zoom_range);
    }
    if rng.random_bool(cfg.elastic_prob) {
        let g = cfg.elastic_grid;
        let normal = Normal::new(0.0, cfg.elastic_sigma).map_err(|e| Error::invalid(e.to_string()))?;
        let pts = (0..g * g).map(|_| (normal.sample(rng), normal.sample(rng))).collect();
        map.elastic = Some((g, pts));
    }
    if rng.random_bool(cfg.rotation_prob) {
        map.angle = sample_range(rng, cfg.rotation_range).to_radians();
    }
    map.hflip = rng.random_bool(cfg.hflip_prob);
    map.vflip = rng.random_bool(cfg.vflip_prob);

    let (mut image, mut scribble, mut gt) = if map.is_identity() {
        (normalized, sample.scribble.labels().clone(), sample.gt_mask.clone())
    } else {
        warp(sample, &normalized, &map)
    };

    if rng.random_bool(cfg.noise_prob) {
        let sigma = sample_range(rng, cfg.noise_sigma_range);
        if sigma > 0.0 {
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            for v in image.as_mut_slice() {
                *v += normal.sample(rng);
            }
        }
    }

    let (tr, tc) = cfg.crop_pad_to.unwrap_or((rows, cols));
    if (tr, tc) != (rows, cols) {
        let off = (window_offset(rows, tr, rng), window_offset(cols, tc, rng));
        image = shifted_window(&image, tr, tc, off, 0.0);
        scribble = shifted_window(&scribble, tr, tc, off, UNLABELED);
        gt = gt.map(|g| shifted_window(&g, tr, tc, off, 0u8));
    }

    ImageSample::new(
        image,
        ScribbleLabel::new(scribble, sample.num_classes())?,
        gt,
        sample.patient_id.clone(),
        sample.spacing,
    )
}

fn sample_range<R: Rng + ?Sized>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..=hi)
    }
}
