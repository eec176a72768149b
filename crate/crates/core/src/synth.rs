//! Deterministic synthetic lesion volumes: textured backgrounds with
//! elliptical "lesions" of distinct intensity, masks exact by construction.
//!
//! The generator is the desk-scale verification substrate; the CLI wraps it
//! to write dataset directories.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::CtVolume;
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_subjects: usize,
    pub slices_per_subject: usize,
    /// Inclusive range of lesions per slice.
    pub lesion_count_range: (usize, usize),
    /// Lesion semi-axis range in pixels.
    pub lesion_radius_range: (f64, f64),
    /// Standard deviation of the additive pixel noise.
    pub texture_noise_level: f64,
    /// Square slice side length.
    pub image_size: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            n_subjects: 20,
            slices_per_subject: 6,
            lesion_count_range: (1, 3),
            lesion_radius_range: (4.0, 10.0),
            texture_noise_level: 0.03,
            image_size: 64,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    fn validate(&self) -> Result<()> {
        if self.n_subjects == 0 || self.slices_per_subject == 0 || self.image_size == 0 {
            return Err(CoreError::config("synthetic spec dimensions must be positive"));
        }
        if self.lesion_count_range.0 > self.lesion_count_range.1 {
            return Err(CoreError::config("lesion count range is empty"));
        }
        if self.lesion_radius_range.0 > self.lesion_radius_range.1
            || self.lesion_radius_range.0 <= 0.0
        {
            return Err(CoreError::config("lesion radius range is invalid"));
        }
        if 2.0 * (self.lesion_radius_range.1 + 2.0) >= self.image_size as f64 {
            return Err(CoreError::config(format!(
                "image size {} cannot fit lesions of radius up to {}",
                self.image_size, self.lesion_radius_range.1
            )));
        }
        Ok(())
    }
}

/// One rendered lesion: a rotated ellipse.
struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    theta: f64,
}

impl Ellipse {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.theta.sin_cos();
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        (u / self.rx) * (u / self.rx) + (v / self.ry) * (v / self.ry) <= 1.0
    }
}

/// Smooth low-frequency background texture from a few random sinusoids.
fn texture(size: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let mut waves = Vec::new();
    for _ in 0..4 {
        let fy = rng.random_range(0.5..3.0) * std::f64::consts::TAU / size as f64;
        let fx = rng.random_range(0.5..3.0) * std::f64::consts::TAU / size as f64;
        let phase = rng.random_range(0.0..std::f64::consts::TAU);
        let amp = rng.random_range(0.02..0.06);
        waves.push((fy, fx, phase, amp));
    }
    Array2::from_shape_fn((size, size), |(y, x)| {
        waves
            .iter()
            .map(|&(fy, fx, ph, a)| a * (fy * y as f64 + fx * x as f64 + ph).sin())
            .sum()
    })
}

fn render_slice(
    spec: &SyntheticSpec,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array2<u8>) {
    let s = spec.image_size;
    let bg_level = rng.random_range(0.25..0.4);
    let lesion_level = rng.random_range(0.7..0.85);
    let tex = texture(s, rng);

    let n_lesions = rng.random_range(spec.lesion_count_range.0..=spec.lesion_count_range.1);
    let margin = spec.lesion_radius_range.1 + 2.0;
    let lesions: Vec<Ellipse> = (0..n_lesions)
        .map(|_| Ellipse {
            cy: rng.random_range(margin..(s as f64 - margin)),
            cx: rng.random_range(margin..(s as f64 - margin)),
            ry: rng.random_range(spec.lesion_radius_range.0..=spec.lesion_radius_range.1),
            rx: rng.random_range(spec.lesion_radius_range.0..=spec.lesion_radius_range.1),
            theta: rng.random_range(0.0..std::f64::consts::PI),
        })
        .collect();

    let mut image = Array2::<f64>::zeros((s, s));
    let mut mask = Array2::<u8>::zeros((s, s));
    for y in 0..s {
        for x in 0..s {
            let inside = lesions.iter().any(|e| e.contains(y as f64, x as f64));
            let base = if inside { lesion_level } else { bg_level };
            let noise = rng.random_range(-1.0..1.0) * spec.texture_noise_level;
            image[[y, x]] = (base + tex[[y, x]] + noise).clamp(0.0, 1.0);
            mask[[y, x]] = inside as u8;
        }
    }
    (image, mask)
}

/// Generate the synthetic subjects as in-memory volumes (HU-like intensity
/// scale with per-subject offsets, so subject normalization is meaningful).
pub fn generate(spec: &SyntheticSpec) -> Result<Vec<CtVolume>> {
    spec.validate()?;
    let mut rng = crate::rng::seeded(spec.seed);
    let s = spec.image_size;
    let mut volumes = Vec::with_capacity(spec.n_subjects);
    for subject in 0..spec.n_subjects {
        let offset = rng.random_range(-80.0..80.0);
        let scale = rng.random_range(350.0..450.0);
        let mut voxels = Array3::<f64>::zeros((spec.slices_per_subject, s, s));
        let mut mask = Array3::<u8>::zeros((spec.slices_per_subject, s, s));
        for d in 0..spec.slices_per_subject {
            let (img, m) = render_slice(spec, &mut rng);
            voxels
                .index_axis_mut(ndarray::Axis(0), d)
                .assign(&img.mapv(|v| v * scale + offset));
            mask.index_axis_mut(ndarray::Axis(0), d).assign(&m);
        }
        volumes.push(CtVolume::new(
            voxels,
            (5.0, 1.0, 1.0),
            format!("synth{subject:03}"),
            Some(mask),
        )?);
    }
    Ok(volumes)
}
