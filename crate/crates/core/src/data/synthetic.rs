use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::scribble::{synthesize_scribbles_with, BACKGROUND_COVERAGE};

use super::ImageSample;

pub const SYNTHETIC_CLASSES: usize = 3;
pub const SYNTHETIC_CLASS_NAMES: [&str; 3] = ["background", "disk", "ring"];

/// Shape and intensity ranges of the synthetic benchmark. Intensities are
/// whole numbers so images survive a 16-bit PNG round trip unchanged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    /// Disk semi-major axis range, as a fraction of the shorter image side.
    pub disk_axis: (f64, f64),
    /// Minor/major axis ratio range of the disk.
    pub disk_aspect: (f64, f64),
    /// Ring width range, as a fraction of the shorter image side.
    pub ring_width: (f64, f64),
    /// Maximum center offset from the image center, same units.
    pub center_jitter: f64,
    pub background_level: (f64, f64),
    pub ring_level: (f64, f64),
    pub disk_level: (f64, f64),
    pub noise_sigma: (f64, f64),
    /// Amplitude of a smooth additive bias field.
    pub bias_amplitude: f64,
    pub spacing: (f64, f64),
    /// Fraction of background pixels kept in the background scribble.
    pub background_scribble_coverage: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            disk_axis: (0.15, 0.2),
            disk_aspect: (0.3, 0.4),
            ring_width: (0.11, 0.16),
            center_jitter: 0.09,
            background_level: (250.0, 350.0),
            ring_level: (480.0, 560.0),
            disk_level: (640.0, 760.0),
            noise_sigma: (60.0, 90.0),
            bias_amplitude: 80.0,
            spacing: (1.5, 1.5),
            background_scribble_coverage: BACKGROUND_COVERAGE,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("disk_axis", self.disk_axis),
            ("disk_aspect", self.disk_aspect),
            ("ring_width", self.ring_width),
            ("background_level", self.background_level),
            ("ring_level", self.ring_level),
            ("disk_level", self.disk_level),
            ("noise_sigma", self.noise_sigma),
        ];
        for (name, (lo, hi)) in ranges {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi && lo >= 0.0) {
                return Err(Error::invalid(format!("synthetic range `{name}` ({lo}, {hi}) is not ordered")));
            }
        }
        if self.disk_axis.0 <= 0.0 || self.disk_aspect.0 <= 0.0 || self.disk_aspect.1 > 1.0 {
            return Err(Error::invalid("disk axis and aspect must be positive, aspect at most 1"));
        }
        if self.spacing.0 <= 0.0 || self.spacing.1 <= 0.0 {
            return Err(Error::invalid("synthetic spacing must be positive"));
        }
        if !(self.background_scribble_coverage > 0.0 && self.background_scribble_coverage <= 1.0) {
            return Err(Error::invalid("background_scribble_coverage must lie in (0, 1]"));
        }
        let reach = self.disk_axis.1 + self.ring_width.1 + self.center_jitter;
        if reach >= 0.5 {
            return Err(Error::invalid("disk plus ring plus jitter does not fit in the image"));
        }
        Ok(())
    }
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

struct PatientStyle {
    axis: f64,
    aspect: f64,
    width: f64,
    levels: [f64; 3],
    sigma: f64,
}

/// Elliptical distance: below 1 inside the ellipse with semi-axes `(a, b)`
/// rotated by `theta`.
fn ellipse_radius(dr: f64, dc: f64, a: f64, b: f64, theta: f64) -> f64 {
    let (s, c) = theta.sin_cos();
    let u = dc * c + dr * s;
    let v = -dc * s + dr * c;
    (u / a).powi(2) + (v / b).powi(2)
}

/// Generates `n_patients × images_per_patient` samples: a filled ellipse
/// (class 1) inside an elliptical ring (class 2) on a noisy, bias-shaded
/// background (class 0). Scribbles come from
/// [`synthesize_scribbles_with`].
pub fn generate_synthetic_dataset(
    n_patients: usize,
    images_per_patient: usize,
    size: (usize, usize),
    seed: u64,
) -> Result<Vec<ImageSample>> {
    generate_synthetic_dataset_with(n_patients, images_per_patient, size, seed, &SyntheticParams::default())
}

pub fn generate_synthetic_dataset_with(
    n_patients: usize,
    images_per_patient: usize,
    size: (usize, usize),
    seed: u64,
    params: &SyntheticParams,
) -> Result<Vec<ImageSample>> {
    if n_patients < 5 {
        return Err(Error::invalid(format!("need at least 5 patients for five folds, got {n_patients}")));
    }
    if images_per_patient == 0 {
        return Err(Error::invalid("images_per_patient must be positive"));
    }
    if size.0 < 32 || size.1 < 32 {
        return Err(Error::invalid(format!("synthetic size {size:?} below 32x32")));
    }
    params.validate()?;
    let (rows, cols) = size;
    let side = rows.min(cols) as f64;
    let mut out = Vec::with_capacity(n_patients * images_per_patient);
    for p in 0..n_patients {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(p as u64 + 1);
        let style = PatientStyle {
            axis: uniform(&mut rng, params.disk_axis) * side,
            aspect: uniform(&mut rng, params.disk_aspect),
            width: uniform(&mut rng, params.ring_width) * side,
            levels: [
                uniform(&mut rng, params.background_level),
                uniform(&mut rng, params.disk_level),
                uniform(&mut rng, params.ring_level),
            ],
            sigma: uniform(&mut rng, params.noise_sigma),
        };
        let patient_id = format!("patient{p:03}");
        for s in 0..images_per_patient {
            let (image, gt) = render_slice(&mut rng, &style, rows, cols, side, params);
            let scribble = synthesize_scribbles_with(
                &gt,
                SYNTHETIC_CLASSES,
                seed ^ ((p * images_per_patient + s) as u64),
                params.background_scribble_coverage,
            )?;
            out.push(ImageSample::new(image, scribble, Some(gt), patient_id.clone(), params.spacing)?);
        }
    }
    Ok(out)
}

fn render_slice(
    rng: &mut ChaCha8Rng,
    style: &PatientStyle,
    rows: usize,
    cols: usize,
    side: f64,
    params: &SyntheticParams,
) -> (Grid<f64>, Grid<u8>) {
    // Per-slice variation around the patient's anatomy.
    let jitter = params.center_jitter * side;
    let cr = (rows as f64 - 1.0) / 2.0 + rng.random_range(-jitter..=jitter);
    let cc = (cols as f64 - 1.0) / 2.0 + rng.random_range(-jitter..=jitter);
    let a = style.axis * rng.random_range(0.9..1.1);
    let b = a * style.aspect;
    let w = style.width * rng.random_range(0.9..1.1);
    let theta = rng.random_range(0.0..std::f64::consts::PI);
    let bias_phase: (f64, f64) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let bias_freq = rng.random_range(0.5..1.5) * std::f64::consts::PI / side;
    let noise = Normal::new(0.0, style.sigma).expect("sigma is finite and non-negative");

    let gt = Grid::from_fn(rows, cols, |r, c| {
        let (dr, dc) = (r as f64 - cr, c as f64 - cc);
        if ellipse_radius(dr, dc, a, b, theta) <= 1.0 {
            1
        } else if ellipse_radius(dr, dc, a + w, b + w, theta) <= 1.0 {
            2
        } else {
            0
        }
    });
    let image = Grid::from_fn(rows, cols, |r, c| {
        let bias = params.bias_amplitude
            * ((r as f64 * bias_freq + bias_phase.0).sin() * (c as f64 * bias_freq + bias_phase.1).cos());
        let v = style.levels[gt.value(r, c) as usize] + bias + noise.sample(rng);
        v.round().clamp(0.0, u16::MAX as f64)
    });
    (image, gt)
}
