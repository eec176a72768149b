//! Core data carriers: CT volumes, 2D slice samples, and subject-level splits.

use ndarray::{Array2, Array3};

use crate::error::{CoreError, Result};

/// A 3D scalar volume with per-subject metadata, optionally paired with a
/// voxel-aligned binary mask.
#[derive(Debug, Clone)]
pub struct CtVolume {
    /// Voxel data, depth x height x width.
    pub voxels: Array3<f64>,
    /// Physical voxel spacing in mm, (z, y, x).
    pub spacing: (f64, f64, f64),
    pub subject_id: String,
    /// Binary lesion mask aligned with `voxels` when present.
    pub mask: Option<Array3<u8>>,
}

impl CtVolume {
    pub fn new(
        voxels: Array3<f64>,
        spacing: (f64, f64, f64),
        subject_id: impl Into<String>,
        mask: Option<Array3<u8>>,
    ) -> Result<Self> {
        if voxels.is_empty() {
            return Err(CoreError::degenerate("volume has no voxels"));
        }
        if spacing.0 <= 0.0 || spacing.1 <= 0.0 || spacing.2 <= 0.0 {
            return Err(CoreError::validation("voxel spacing must be positive"));
        }
        if let Some(m) = &mask {
            if m.dim() != voxels.dim() {
                return Err(CoreError::shape(format!(
                    "mask shape {:?} does not match volume shape {:?}",
                    m.dim(),
                    voxels.dim()
                )));
            }
        }
        Ok(CtVolume {
            voxels,
            spacing,
            subject_id: subject_id.into(),
            mask,
        })
    }

    pub fn num_slices(&self) -> usize {
        self.voxels.dim().0
    }

    /// Extract slice `index` as a [`SliceSample`], carrying the mask slice when present.
    pub fn slice(&self, index: usize) -> Result<SliceSample> {
        let (d, _, _) = self.voxels.dim();
        if index >= d {
            return Err(CoreError::shape(format!(
                "slice index {index} out of range for volume with {d} slices"
            )));
        }
        let image = self.voxels.index_axis(ndarray::Axis(0), index).to_owned();
        let mask = self
            .mask
            .as_ref()
            .map(|m| m.index_axis(ndarray::Axis(0), index).to_owned());
        SliceSample::new(image, mask, self.subject_id.clone(), index)
    }

    /// All slices of the volume, in depth order.
    pub fn slices(&self) -> Result<Vec<SliceSample>> {
        (0..self.num_slices()).map(|i| self.slice(i)).collect()
    }
}

/// A normalized 2D image in `[0, 1]` with an optional ground-truth mask.
#[derive(Debug, Clone)]
pub struct SliceSample {
    /// Image values, height x width, expected in `[0, 1]` after subject normalization.
    pub image: Array2<f64>,
    /// Binary mask with the image's spatial shape, values in `{0, 1}`.
    pub mask: Option<Array2<u8>>,
    pub subject_id: String,
    pub slice_index: usize,
}

impl SliceSample {
    pub fn new(
        image: Array2<f64>,
        mask: Option<Array2<u8>>,
        subject_id: impl Into<String>,
        slice_index: usize,
    ) -> Result<Self> {
        if let Some(m) = &mask {
            if m.dim() != image.dim() {
                return Err(CoreError::shape(format!(
                    "mask shape {:?} does not match image shape {:?}",
                    m.dim(),
                    image.dim()
                )));
            }
            if m.iter().any(|&v| v > 1) {
                return Err(CoreError::validation("mask values must be 0 or 1"));
            }
        }
        Ok(SliceSample {
            image,
            mask,
            subject_id: subject_id.into(),
            slice_index,
        })
    }

    /// True when the mask is present and contains at least one lesion pixel.
    pub fn has_lesion(&self) -> bool {
        self.mask
            .as_ref()
            .map(|m| m.iter().any(|&v| v != 0))
            .unwrap_or(false)
    }
}

/// Subject-level dataset split. No subject appears in more than one part.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubjectSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

/// Split subject ids into train/val/test by the given fractions, shuffled by `seed`.
///
/// Fractions apply to the shuffled list in order; the test part takes the
/// remainder so every subject lands in exactly one split.
pub fn split_subjects(
    subject_ids: &[String],
    train_frac: f64,
    val_frac: f64,
    seed: u64,
) -> Result<SubjectSplit> {
    if !(0.0..=1.0).contains(&train_frac) || !(0.0..=1.0).contains(&val_frac) {
        return Err(CoreError::config("split fractions must be in [0, 1]"));
    }
    if train_frac + val_frac > 1.0 + 1e-12 {
        return Err(CoreError::config("train + val fractions exceed 1"));
    }
    let mut ids: Vec<String> = subject_ids.to_vec();
    ids.sort();
    ids.dedup();
    let mut rng = crate::rng::seeded(seed);
    use rand::seq::SliceRandom;
    ids.shuffle(&mut rng);
    let n = ids.len();
    let n_train = (n as f64 * train_frac).round() as usize;
    let n_val = (n as f64 * val_frac).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);
    Ok(SubjectSplit {
        train: ids[..n_train].to_vec(),
        val: ids[n_train..n_train + n_val].to_vec(),
        test: ids[n_train + n_val..].to_vec(),
    })
}
