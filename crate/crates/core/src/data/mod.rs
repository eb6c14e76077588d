//! Dataset model: samples, scribble labels, preprocessing, synthetic data,
//! fold splitting, and the on-disk dataset layout.

mod folds;
pub mod io;
mod preprocess;
mod synthetic;

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

pub use folds::{split_folds, FoldSplit};
pub use preprocess::{center_crop_or_pad, preprocess, resample};
pub use synthetic::{
    generate_synthetic_dataset, generate_synthetic_dataset_with, SyntheticParams, SYNTHETIC_CLASSES,
    SYNTHETIC_CLASS_NAMES,
};

/// Label value of pixels carrying no supervision.
pub const UNLABELED: u8 = 255;

/// Per-pixel scribble labels over `num_classes` classes (background is
/// class 0); every other pixel is [`UNLABELED`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScribbleLabel {
    labels: Grid<u8>,
    num_classes: usize,
}

impl ScribbleLabel {
    pub fn new(labels: Grid<u8>, num_classes: usize) -> Result<Self> {
        if !(2..=UNLABELED as usize).contains(&num_classes) {
            return Err(Error::invalid(format!("num_classes {num_classes} out of range")));
        }
        if let Some(&bad) = labels
            .as_slice()
            .iter()
            .find(|&&v| v != UNLABELED && v as usize >= num_classes)
        {
            return Err(Error::invalid(format!(
                "scribble value {bad} is neither a class below {num_classes} nor UNLABELED"
            )));
        }
        Ok(ScribbleLabel { labels, num_classes })
    }

    pub fn unlabeled(rows: usize, cols: usize, num_classes: usize) -> Result<Self> {
        Self::new(Grid::filled(rows, cols, UNLABELED), num_classes)
    }

    pub fn labels(&self) -> &Grid<u8> {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn shape(&self) -> (usize, usize) {
        self.labels.shape()
    }

    pub fn as_slice(&self) -> &[u8] {
        self.labels.as_slice()
    }

    /// One-hot target of a pixel, or the zero vector when unlabeled.
    pub fn one_hot(&self, r: usize, c: usize) -> Vec<f64> {
        let mut v = vec![0.0; self.num_classes];
        let l = self.labels.value(r, c);
        if l != UNLABELED {
            v[l as usize] = 1.0;
        }
        v
    }

    pub fn count(&self, class: u8) -> usize {
        self.labels.as_slice().iter().filter(|&&v| v == class).count()
    }

    pub fn labeled_count(&self) -> usize {
        self.labels.as_slice().iter().filter(|&&v| v != UNLABELED).count()
    }
}

/// One 2D grayscale slice with its scribbles and optional dense mask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageSample {
    pub image: Grid<f64>,
    pub scribble: ScribbleLabel,
    pub gt_mask: Option<Grid<u8>>,
    pub patient_id: String,
    /// Physical pixel spacing `(row_mm, col_mm)`.
    pub spacing: (f64, f64),
}

impl ImageSample {
    pub fn new(
        image: Grid<f64>,
        scribble: ScribbleLabel,
        gt_mask: Option<Grid<u8>>,
        patient_id: impl Into<String>,
        spacing: (f64, f64),
    ) -> Result<Self> {
        let s = ImageSample {
            image,
            scribble,
            gt_mask,
            patient_id: patient_id.into(),
            spacing,
        };
        s.validate()?;
        Ok(s)
    }

    /// Builds a sample from an image given with an explicit shape; anything
    /// but a 2D shape is rejected.
    pub fn from_array(
        shape: &[usize],
        data: Vec<f64>,
        scribble: ScribbleLabel,
        gt_mask: Option<Grid<u8>>,
        patient_id: impl Into<String>,
        spacing: (f64, f64),
    ) -> Result<Self> {
        if shape.len() != 2 {
            return Err(Error::invalid(format!(
                "expected a 2D image, got {} dimensions",
                shape.len()
            )));
        }
        let image = Grid::from_vec(shape[0], shape[1], data)?;
        Self::new(image, scribble, gt_mask, patient_id, spacing)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.image.shape();
        if self.scribble.shape() != shape {
            return Err(Error::invalid(format!(
                "scribble shape {:?} differs from image shape {:?}",
                self.scribble.shape(),
                shape
            )));
        }
        if let Some(gt) = &self.gt_mask {
            if gt.shape() != shape {
                return Err(Error::invalid(format!(
                    "gt mask shape {:?} differs from image shape {:?}",
                    gt.shape(),
                    shape
                )));
            }
            let k = self.scribble.num_classes();
            if let Some(&bad) = gt.as_slice().iter().find(|&&v| v as usize >= k) {
                return Err(Error::invalid(format!("gt value {bad} out of range for {k} classes")));
            }
        }
        let (r, c) = self.spacing;
        if !(r > 0.0 && c > 0.0 && r.is_finite() && c.is_finite()) {
            return Err(Error::invalid(format!("spacing ({r}, {c}) must be strictly positive")));
        }
        Ok(())
    }

    pub fn num_classes(&self) -> usize {
        self.scribble.num_classes()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.image.shape()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub root_path: PathBuf,
    /// Target spacing `(row_mm, col_mm)`.
    pub target_spacing: (f64, f64),
    /// Target size `(rows, cols)`.
    pub target_size: (usize, usize),
    pub num_classes: usize,
    pub class_names: Vec<String>,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let (sr, sc) = self.target_spacing;
        if !(sr > 0.0 && sc > 0.0) {
            return Err(Error::invalid("target_spacing components must be positive"));
        }
        if self.target_size.0 == 0 || self.target_size.1 == 0 {
            return Err(Error::invalid("target_size components must be positive"));
        }
        if self.num_classes < 2 {
            return Err(Error::invalid("num_classes must be at least 2"));
        }
        if !self.class_names.is_empty() && self.class_names.len() != self.num_classes {
            return Err(Error::invalid(format!(
                "{} class names given for {} classes",
                self.class_names.len(),
                self.num_classes
            )));
        }
        Ok(())
    }
}

/// Distinct patient ids in first-appearance order.
pub fn patient_ids(samples: &[ImageSample]) -> Vec<String> {
    let mut seen = std::collections::BTreeSet::new();
    samples
        .iter()
        .filter(|s| seen.insert(s.patient_id.clone()))
        .map(|s| s.patient_id.clone())
        .collect()
}
