//! On-disk dataset layout: `<root>/<patient>/<slice>_img.png` (16-bit),
//! `_scrib.png` and `_gt.png` (8-bit class indices, 255 = unlabeled), plus a
//! `dataset.json` manifest.

use std::fs;
use std::path::{Path, PathBuf};

use image::{ImageBuffer, ImageReader, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;

use super::{ImageSample, ScribbleLabel};

pub const MANIFEST_FILE: &str = "dataset.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SliceEntry {
    pub patient_id: String,
    pub slice_idx: usize,
    pub spacing: (f64, f64),
    pub has_gt: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub num_classes: usize,
    pub class_names: Vec<String>,
    pub slices: Vec<SliceEntry>,
}

pub fn image_path(root: &Path, patient_id: &str, slice_idx: usize) -> PathBuf {
    root.join(patient_id).join(format!("{slice_idx:04}_img.png"))
}

pub fn scribble_path(root: &Path, patient_id: &str, slice_idx: usize) -> PathBuf {
    root.join(patient_id).join(format!("{slice_idx:04}_scrib.png"))
}

pub fn gt_path(root: &Path, patient_id: &str, slice_idx: usize) -> PathBuf {
    root.join(patient_id).join(format!("{slice_idx:04}_gt.png"))
}

fn check_patient_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id != "."
        && id != ".."
        && id.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(format!("patient id `{id}` is not a safe directory name")))
    }
}

pub fn write_u16_png(path: &Path, grid: &Grid<f64>) -> Result<()> {
    let mut raw = Vec::with_capacity(grid.len());
    for &v in grid.as_slice() {
        if !(v.fract() == 0.0 && (0.0..=u16::MAX as f64).contains(&v)) {
            return Err(Error::invalid(format!(
                "intensity {v} cannot be stored losslessly in a 16-bit PNG ({})",
                path.display()
            )));
        }
        raw.push(v as u16);
    }
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(grid.cols() as u32, grid.rows() as u32, raw).expect("buffer length matches");
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn write_u8_png(path: &Path, grid: &Grid<u8>) -> Result<()> {
    let buf: ImageBuffer<Luma<u8>, Vec<u8>> =
        ImageBuffer::from_raw(grid.cols() as u32, grid.rows() as u32, grid.as_slice().to_vec())
            .expect("buffer length matches");
    buf.save(path).map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

fn decode(path: &Path) -> Result<image::DynamicImage> {
    let reader = ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.decode().map_err(|source| Error::Image { path: path.to_path_buf(), source })
}

pub fn read_u16_png(path: &Path) -> Result<Grid<f64>> {
    match decode(path)? {
        image::DynamicImage::ImageLuma16(b) => {
            let (w, h) = b.dimensions();
            Grid::from_vec(h as usize, w as usize, b.into_raw().into_iter().map(f64::from).collect())
        }
        image::DynamicImage::ImageLuma8(b) => {
            let (w, h) = b.dimensions();
            Grid::from_vec(h as usize, w as usize, b.into_raw().into_iter().map(f64::from).collect())
        }
        other => Err(Error::invalid(format!(
            "{}: expected a grayscale image, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn read_u8_png(path: &Path) -> Result<Grid<u8>> {
    match decode(path)? {
        image::DynamicImage::ImageLuma8(b) => {
            let (w, h) = b.dimensions();
            Grid::from_vec(h as usize, w as usize, b.into_raw())
        }
        other => Err(Error::invalid(format!(
            "{}: expected an 8-bit label map, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

pub fn read_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json { path: path.clone(), source })?;
    if m.num_classes < 2 {
        return Err(Error::invalid(format!("{}: num_classes must be at least 2", path.display())));
    }
    Ok(m)
}

pub fn write_manifest(root: &Path, manifest: &Manifest) -> Result<()> {
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(manifest).map_err(|source| Error::Json { path: path.clone(), source })?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

/// Writes samples under `root`, numbering slices per patient in input
/// order.
pub fn write_dataset(root: &Path, samples: &[ImageSample], class_names: &[String]) -> Result<Manifest> {
    let num_classes = samples
        .first()
        .map(ImageSample::num_classes)
        .ok_or_else(|| Error::invalid("cannot write an empty dataset"))?;
    if !class_names.is_empty() && class_names.len() != num_classes {
        return Err(Error::invalid("class_names length differs from num_classes"));
    }
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut counters = std::collections::BTreeMap::<&str, usize>::new();
    let mut slices = Vec::with_capacity(samples.len());
    for s in samples {
        if s.num_classes() != num_classes {
            return Err(Error::invalid("samples disagree on num_classes"));
        }
        check_patient_id(&s.patient_id)?;
        let idx = counters.entry(&s.patient_id).or_insert(0);
        let slice_idx = *idx;
        *idx += 1;
        let dir = root.join(&s.patient_id);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_u16_png(&image_path(root, &s.patient_id, slice_idx), &s.image)?;
        write_u8_png(&scribble_path(root, &s.patient_id, slice_idx), s.scribble.labels())?;
        if let Some(gt) = &s.gt_mask {
            write_u8_png(&gt_path(root, &s.patient_id, slice_idx), gt)?;
        }
        slices.push(SliceEntry {
            patient_id: s.patient_id.clone(),
            slice_idx,
            spacing: s.spacing,
            has_gt: s.gt_mask.is_some(),
        });
    }
    let manifest = Manifest {
        num_classes,
        class_names: class_names.to_vec(),
        slices,
    };
    write_manifest(root, &manifest)?;
    Ok(manifest)
}

pub fn read_sample(root: &Path, entry: &SliceEntry, num_classes: usize) -> Result<ImageSample> {
    check_patient_id(&entry.patient_id)?;
    let (pid, idx) = (entry.patient_id.as_str(), entry.slice_idx);
    let image = read_u16_png(&image_path(root, pid, idx))?;
    let scribble = ScribbleLabel::new(read_u8_png(&scribble_path(root, pid, idx))?, num_classes)?;
    let gt = if entry.has_gt {
        Some(read_u8_png(&gt_path(root, pid, idx))?)
    } else {
        None
    };
    ImageSample::new(image, scribble, gt, pid, entry.spacing)
}

pub fn read_dataset(root: &Path) -> Result<(Manifest, Vec<ImageSample>)> {
    let manifest = read_manifest(root)?;
    let samples = manifest
        .slices
        .iter()
        .map(|e| read_sample(root, e, manifest.num_classes))
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, samples))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_dataset;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut data = generate_synthetic_dataset(5, 2, (32, 40), 3).unwrap();
        data[1].gt_mask = None;
        let names = vec!["bg".to_string(), "disk".into(), "ring".into()];
        write_dataset(dir.path(), &data, &names).unwrap();
        let (m, back) = read_dataset(dir.path()).unwrap();
        assert_eq!(m.class_names, names);
        assert_eq!(back, data);
    }

    #[test]
    fn rejects_lossy_intensity() {
        let dir = tempfile::tempdir().unwrap();
        let g = Grid::filled(2, 2, 0.5);
        assert!(write_u16_png(&dir.path().join("x.png"), &g).is_err());
    }

    #[test]
    fn rejects_unsafe_patient_id() {
        assert!(check_patient_id("../x").is_err());
        assert!(check_patient_id("patient_01").is_ok());
    }
}
