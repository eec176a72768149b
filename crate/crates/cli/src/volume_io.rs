//! Dataset directory ingestion.
//!
//! Layout contract:
//!
//! ```text
//! dataset/
//!   images/<subject>.nii[.gz]   or   images/<subject>/<slice>.png
//!   masks/<subject>.nii[.gz]    or   masks/<subject>/<slice>.png   (optional)
//! ```
//!
//! A subject's mask file/directory pairs by name. PNG slices are sorted by
//! filename; 8- or 16-bit grayscale values map onto [0, intensity range].

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mimic_core::data::CtVolume;
use ndarray::Array3;

use crate::nifti::read_nifti;

fn subject_name(path: &Path) -> String {
    let name = path.file_name().unwrap_or_default().to_string_lossy();
    name.trim_end_matches(".nii.gz")
        .trim_end_matches(".nii")
        .to_string()
}

fn read_png_gray(path: &Path) -> Result<ndarray::Array2<f64>> {
    let img = image::open(path).with_context(|| format!("reading {}", path.display()))?;
    let gray = img.to_luma16();
    let (w, h) = (gray.width() as usize, gray.height() as usize);
    let mut out = ndarray::Array2::<f64>::zeros((h, w));
    for (x, y, p) in gray.enumerate_pixels() {
        out[[y as usize, x as usize]] = p.0[0] as f64;
    }
    Ok(out)
}

fn load_png_dir(dir: &Path) -> Result<Array3<f64>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("listing {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    files.sort();
    if files.is_empty() {
        bail!("{}: no PNG slices found", dir.display());
    }
    let first = read_png_gray(&files[0])?;
    let (h, w) = first.dim();
    let mut vox = Array3::<f64>::zeros((files.len(), h, w));
    vox.index_axis_mut(ndarray::Axis(0), 0).assign(&first);
    for (i, f) in files.iter().enumerate().skip(1) {
        let img = read_png_gray(f)?;
        if img.dim() != (h, w) {
            bail!(
                "{}: slice shape {:?} differs from {:?}",
                f.display(),
                img.dim(),
                (h, w)
            );
        }
        vox.index_axis_mut(ndarray::Axis(0), i).assign(&img);
    }
    Ok(vox)
}

/// Load one subject volume (NIfTI file or PNG directory), pairing the mask
/// from `mask_path` when present.
pub fn load_volume(
    image_path: &Path,
    mask_path: Option<&Path>,
    subject_id: &str,
) -> Result<CtVolume> {
    let (voxels, spacing) = if image_path.is_dir() {
        (load_png_dir(image_path)?, (1.0, 1.0, 1.0))
    } else {
        let v = read_nifti(image_path)?;
        (v.voxels, v.spacing)
    };
    let mask = match mask_path {
        Some(mp) if mp.exists() => {
            let raw = if mp.is_dir() {
                load_png_dir(mp)?
            } else {
                read_nifti(mp)?.voxels
            };
            if raw.dim() != voxels.dim() {
                bail!(
                    "{}: mask shape {:?} does not match volume shape {:?}",
                    mp.display(),
                    raw.dim(),
                    voxels.dim()
                );
            }
            Some(raw.mapv(|v| (v > 0.5) as u8))
        }
        _ => None,
    };
    CtVolume::new(voxels, spacing, subject_id, mask)
        .with_context(|| format!("constructing volume from {}", image_path.display()))
}

/// Load every subject under `root` (see the module docs for the layout).
/// `require_masks` rejects subjects without a paired mask.
pub fn load_dataset(root: &Path, require_masks: bool) -> Result<Vec<CtVolume>> {
    let images = root.join("images");
    let masks = root.join("masks");
    if !images.is_dir() {
        bail!("{}: expected an images/ subdirectory", root.display());
    }
    let mut entries: Vec<PathBuf> = std::fs::read_dir(&images)
        .with_context(|| format!("listing {}", images.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_dir()
                || p.to_string_lossy().ends_with(".nii")
                || p.to_string_lossy().ends_with(".nii.gz")
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        bail!("{}: no volumes found", images.display());
    }
    let mut out = Vec::with_capacity(entries.len());
    for img in entries {
        let subject = subject_name(&img);
        let mask_candidates = if img.is_dir() {
            vec![masks.join(&subject)]
        } else {
            vec![
                masks.join(format!("{subject}.nii.gz")),
                masks.join(format!("{subject}.nii")),
            ]
        };
        let mask_path = mask_candidates.iter().find(|p| p.exists());
        if require_masks && mask_path.is_none() {
            bail!("subject '{subject}': no mask found under {}", masks.display());
        }
        out.push(load_volume(&img, mask_path.map(|p| p.as_path()), &subject)?);
    }
    Ok(out)
}

/// Write volumes out in the dataset layout (gzipped NIfTI).
pub fn write_dataset(root: &Path, volumes: &[CtVolume]) -> Result<()> {
    for vol in volumes {
        let img = root.join("images").join(format!("{}.nii.gz", vol.subject_id));
        crate::nifti::write_nifti_f32(&img, &vol.voxels, vol.spacing)?;
        if let Some(mask) = &vol.mask {
            let mp = root.join("masks").join(format!("{}.nii.gz", vol.subject_id));
            crate::nifti::write_nifti_u8(&mp, mask, vol.spacing)?;
        }
    }
    Ok(())
}
