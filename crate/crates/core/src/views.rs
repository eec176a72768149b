//! Frequency-domain multi-view generation.
//!
//! 2D slices are normalized per subject, cut into p x p patches, transformed
//! with an orthonormal 2D DCT-II, and flattened frequency-by-frequency into a
//! p^2-channel coefficient cube. Each channel is one "view" of the slice: a
//! spatial map (over patches) of a single frequency coefficient. A final
//! frequency-wise normalization maps every channel into [0, 1].

use ndarray::{Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::data::{CtVolume, SliceSample};
use crate::error::{CoreError, Result};

/// Ordering of the p^2 frequency channels within a cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ChannelOrder {
    /// JPEG-style zigzag: channel index grows with spatial frequency, so the
    /// low-frequency views form a contiguous prefix.
    Zigzag,
    /// Row-major coefficient order (i * p + j).
    RowMajor,
}

impl ChannelOrder {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "zigzag" => Ok(ChannelOrder::Zigzag),
            "row-major" | "rowmajor" => Ok(ChannelOrder::RowMajor),
            other => Err(CoreError::config(format!(
                "unknown channel order '{other}' (expected 'zigzag' or 'row-major')"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ChannelOrder::Zigzag => "zigzag",
            ChannelOrder::RowMajor => "row-major",
        }
    }

    /// Map channel index -> coefficient position (i, j) for patch size `p`.
    pub fn positions(&self, p: usize) -> Vec<(usize, usize)> {
        match self {
            ChannelOrder::RowMajor => (0..p * p).map(|k| (k / p, k % p)).collect(),
            ChannelOrder::Zigzag => zigzag_positions(p),
        }
    }
}

/// Coefficient positions in JPEG zigzag order for a p x p block: anti-diagonals
/// of increasing i + j, direction alternating per diagonal.
fn zigzag_positions(p: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(p * p);
    for s in 0..(2 * p - 1) {
        if s % 2 == 0 {
            // walk up-right: i decreasing
            let i_start = s.min(p - 1);
            let i_end = s.saturating_sub(p - 1);
            let mut i = i_start;
            loop {
                out.push((i, s - i));
                if i == i_end {
                    break;
                }
                i -= 1;
            }
        } else {
            // walk down-left: i increasing
            let i_start = s.saturating_sub(p - 1);
            let i_end = s.min(p - 1);
            for i in i_start..=i_end {
                out.push((i, s - i));
            }
        }
    }
    out
}

/// A p^2-channel frequency-view tensor for one slice.
#[derive(Debug, Clone)]
pub struct DctCube {
    /// Coefficients, (p^2 channels) x (H/p) x (W/p).
    pub coefficients: Array3<f64>,
    pub patch_size: usize,
    pub channel_order: ChannelOrder,
}

impl DctCube {
    pub fn num_views(&self) -> usize {
        self.coefficients.dim().0
    }
}

/// Per-subject min-max normalization; optionally drops lesion-free slices.
///
/// The subject's global min maps to 0 and max to 1. With `drop_lesion_free`
/// set (training mode), slices whose mask is all zero are removed; this
/// requires masks to be present.
pub fn subject_normalize(volume: &CtVolume, drop_lesion_free: bool) -> Result<CtVolume> {
    if volume.voxels.is_empty() {
        return Err(CoreError::degenerate("empty volume"));
    }
    if drop_lesion_free && volume.mask.is_none() {
        return Err(CoreError::config(
            "drop_lesion_free requires masks to be present",
        ));
    }
    let mut min = f64::INFINITY;
    let mut max = f64::NEG_INFINITY;
    for &v in volume.voxels.iter() {
        if !v.is_finite() {
            return Err(CoreError::validation("volume contains non-finite values"));
        }
        min = min.min(v);
        max = max.max(v);
    }
    if max == min {
        return Err(CoreError::degenerate(format!(
            "constant volume (min == max == {min}) cannot be min-max normalized"
        )));
    }
    let scale = 1.0 / (max - min);
    let mut voxels = volume.voxels.mapv(|v| (v - min) * scale);
    let mut mask = volume.mask.clone();

    if drop_lesion_free {
        let m = mask.as_ref().unwrap();
        let keep: Vec<usize> = (0..voxels.dim().0)
            .filter(|&i| m.index_axis(Axis(0), i).iter().any(|&v| v != 0))
            .collect();
        if keep.is_empty() {
            return Err(CoreError::degenerate(
                "no slices with lesions remain after filtering",
            ));
        }
        voxels = voxels.select(Axis(0), &keep);
        mask = Some(m.select(Axis(0), &keep));
    }

    CtVolume::new(voxels, volume.spacing, volume.subject_id.clone(), mask)
}

/// Orthonormal DCT-II basis matrix for size p: `B[k][n] = a(k) cos(pi (2n+1) k / 2p)`
/// with `a(0) = sqrt(1/p)` and `a(k) = sqrt(2/p)` otherwise.
fn dct_basis(p: usize) -> Array2<f64> {
    let mut b = Array2::<f64>::zeros((p, p));
    let norm0 = (1.0 / p as f64).sqrt();
    let norm = (2.0 / p as f64).sqrt();
    for k in 0..p {
        let a = if k == 0 { norm0 } else { norm };
        for n in 0..p {
            b[[k, n]] = a * (std::f64::consts::PI * (2 * n + 1) as f64 * k as f64
                / (2.0 * p as f64))
                .cos();
        }
    }
    b
}

fn check_patch(patch: &Array2<f64>) -> Result<usize> {
    let (h, w) = patch.dim();
    if h != w || h == 0 {
        return Err(CoreError::shape(format!(
            "patch must be square and nonempty, got {h}x{w}"
        )));
    }
    if patch.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::validation("patch contains non-finite values"));
    }
    Ok(h)
}

/// Orthonormal 2D DCT-II of a square patch. Invertible via [`patch_idct`];
/// a constant patch of value c yields a single DC coefficient `p * c`.
pub fn patch_dct(patch: &Array2<f64>) -> Result<Array2<f64>> {
    let p = check_patch(patch)?;
    let b = dct_basis(p);
    Ok(b.dot(patch).dot(&b.t()))
}

/// Inverse of [`patch_dct`].
pub fn patch_idct(coeffs: &Array2<f64>) -> Result<Array2<f64>> {
    let p = check_patch(coeffs)?;
    let b = dct_basis(p);
    Ok(b.t().dot(coeffs).dot(&b))
}

/// Build the pre-normalization coefficient cube for a slice.
///
/// Channel k holds coefficient `order.positions(p)[k]` of every patch, laid
/// out spatially over the (H/p) x (W/p) patch grid.
pub fn build_dct_cube(sample: &SliceSample, p: usize, order: ChannelOrder) -> Result<DctCube> {
    dct_cube_of_image(&sample.image, p, order)
}

/// Cube construction on a bare image; see [`build_dct_cube`].
pub fn dct_cube_of_image(image: &Array2<f64>, p: usize, order: ChannelOrder) -> Result<DctCube> {
    if p == 0 {
        return Err(CoreError::config("patch size must be positive"));
    }
    let (h, w) = image.dim();
    if h % p != 0 || w % p != 0 {
        return Err(CoreError::shape(format!(
            "image dims {h}x{w} are not divisible by patch size {p}"
        )));
    }
    let (gh, gw) = (h / p, w / p);
    let positions = order.positions(p);
    let basis = dct_basis(p);
    let mut cube = Array3::<f64>::zeros((p * p, gh, gw));
    for by in 0..gh {
        for bx in 0..gw {
            let patch = image.slice(ndarray::s![by * p..(by + 1) * p, bx * p..(bx + 1) * p]);
            let coeffs = basis.dot(&patch).dot(&basis.t());
            for (k, &(i, j)) in positions.iter().enumerate() {
                cube[[k, by, bx]] = coeffs[[i, j]];
            }
        }
    }
    Ok(DctCube {
        coefficients: cube,
        patch_size: p,
        channel_order: order,
    })
}

/// Per-channel min/max statistics, used for dataset-global normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ChannelStats {
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl ChannelStats {
    /// Accumulate stats over a set of cubes (all with the same channel count).
    pub fn from_cubes<'a>(cubes: impl IntoIterator<Item = &'a DctCube>) -> Result<Self> {
        let mut stats: Option<ChannelStats> = None;
        for cube in cubes {
            let c = cube.coefficients.dim().0;
            let s = stats.get_or_insert_with(|| ChannelStats {
                min: vec![f64::INFINITY; c],
                max: vec![f64::NEG_INFINITY; c],
            });
            if s.min.len() != c {
                return Err(CoreError::shape("cubes have differing channel counts"));
            }
            for (k, ch) in cube.coefficients.axis_iter(Axis(0)).enumerate() {
                for &v in ch.iter() {
                    s.min[k] = s.min[k].min(v);
                    s.max[k] = s.max[k].max(v);
                }
            }
        }
        stats.ok_or_else(|| CoreError::degenerate("no cubes provided"))
    }
}

/// Frequency-wise normalization: each channel independently min-max mapped to
/// [0, 1]. Constant channels map to all zeros.
pub fn freq_normalize(cube: &DctCube) -> DctCube {
    let mut out = cube.clone();
    for mut ch in out.coefficients.axis_iter_mut(Axis(0)) {
        let mut min = f64::INFINITY;
        let mut max = f64::NEG_INFINITY;
        for &v in ch.iter() {
            min = min.min(v);
            max = max.max(v);
        }
        normalize_channel(&mut ch, min, max);
    }
    out
}

/// Frequency-wise normalization against precomputed dataset-global channel
/// stats instead of the cube's own extrema. Values are clamped to [0, 1].
pub fn freq_normalize_global(cube: &DctCube, stats: &ChannelStats) -> Result<DctCube> {
    let c = cube.coefficients.dim().0;
    if stats.min.len() != c || stats.max.len() != c {
        return Err(CoreError::shape(format!(
            "stats cover {} channels, cube has {c}",
            stats.min.len()
        )));
    }
    let mut out = cube.clone();
    for (k, mut ch) in out.coefficients.axis_iter_mut(Axis(0)).enumerate() {
        normalize_channel(&mut ch, stats.min[k], stats.max[k]);
        ch.mapv_inplace(|v| v.clamp(0.0, 1.0));
    }
    Ok(out)
}

fn normalize_channel(ch: &mut ndarray::ArrayViewMut2<'_, f64>, min: f64, max: f64) {
    if max > min {
        let scale = 1.0 / (max - min);
        ch.mapv_inplace(|v| (v - min) * scale);
    } else {
        ch.fill(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::Array2;
    use rand::Rng;

    fn random_patch(p: usize, seed: u64) -> Array2<f64> {
        let mut rng = crate::rng::seeded(seed);
        Array2::from_shape_fn((p, p), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn constant_patch_has_only_dc() {
        let patch = Array2::from_elem((8, 8), 0.37);
        let coeffs = patch_dct(&patch).unwrap();
        assert_abs_diff_eq!(coeffs[[0, 0]], 8.0 * 0.37, epsilon = 1e-12);
        for ((i, j), &v) in coeffs.indexed_iter() {
            if (i, j) != (0, 0) {
                assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn round_trip_all_patch_sizes() {
        for (s, &p) in [2usize, 4, 8, 16, 32].iter().enumerate() {
            let patch = random_patch(p, 100 + s as u64);
            let rec = patch_idct(&patch_dct(&patch).unwrap()).unwrap();
            let max_err = (&rec - &patch).iter().fold(0.0f64, |a, v| a.max(v.abs()));
            assert!(max_err < 1e-6, "p={p} max_err={max_err}");
        }
    }

    #[test]
    fn parseval_energy_by_direct_summation() {
        // Independent oracle: sum the squares on both sides directly.
        let patch = random_patch(8, 7);
        let coeffs = patch_dct(&patch).unwrap();
        let mut pixel_energy = 0.0;
        for &v in patch.iter() {
            pixel_energy += v * v;
        }
        let mut coeff_energy = 0.0;
        for &v in coeffs.iter() {
            coeff_energy += v * v;
        }
        assert!((pixel_energy - coeff_energy).abs() / pixel_energy < 1e-6);
    }

    #[test]
    fn rejects_non_square_patch() {
        let patch = Array2::<f64>::zeros((4, 6));
        assert!(patch_dct(&patch).is_err());
    }

    #[test]
    fn cube_shapes() {
        let img = Array2::from_elem((256, 256), 0.5);
        let s = SliceSample::new(img, None, "s", 0).unwrap();
        let cube = build_dct_cube(&s, 8, ChannelOrder::Zigzag).unwrap();
        assert_eq!(cube.coefficients.dim(), (64, 32, 32));
        let cube16 = build_dct_cube(&s, 16, ChannelOrder::Zigzag).unwrap();
        assert_eq!(cube16.coefficients.dim(), (256, 16, 16));
    }

    #[test]
    fn indivisible_dims_rejected() {
        let img = Array2::from_elem((100, 100), 0.5);
        let s = SliceSample::new(img, None, "s", 0).unwrap();
        assert!(build_dct_cube(&s, 8, ChannelOrder::Zigzag).is_err());
    }

    #[test]
    fn constant_image_only_dc_channel() {
        let img = Array2::from_elem((32, 32), 0.25);
        let s = SliceSample::new(img, None, "s", 0).unwrap();
        for order in [ChannelOrder::Zigzag, ChannelOrder::RowMajor] {
            let cube = build_dct_cube(&s, 8, order).unwrap();
            // DC is channel 0 in both orders.
            for (k, ch) in cube.coefficients.axis_iter(Axis(0)).enumerate() {
                for &v in ch.iter() {
                    if k == 0 {
                        assert_abs_diff_eq!(v, 8.0 * 0.25, epsilon = 1e-12);
                    } else {
                        assert_abs_diff_eq!(v, 0.0, epsilon = 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn dc_channel_is_p_times_patch_mean() {
        // The observation the frequency-attention literature builds on:
        // coefficient (0,0) equals p * patch mean.
        let mut rng = crate::rng::seeded(11);
        let img = Array2::from_shape_fn((64, 64), |_| rng.random_range(0.0..1.0));
        let s = SliceSample::new(img.clone(), None, "s", 0).unwrap();
        let p = 8;
        let cube = build_dct_cube(&s, p, ChannelOrder::Zigzag).unwrap();
        for by in 0..8 {
            for bx in 0..8 {
                let patch = img.slice(ndarray::s![by * p..(by + 1) * p, bx * p..(bx + 1) * p]);
                let mean = patch.sum() / (p * p) as f64;
                assert_abs_diff_eq!(
                    cube.coefficients[[0, by, bx]],
                    p as f64 * mean,
                    epsilon = 1e-9
                );
            }
        }
    }

    #[test]
    fn zigzag_order_is_frequency_sorted_prefix() {
        let pos = zigzag_positions(4);
        assert_eq!(pos.len(), 16);
        assert_eq!(pos[0], (0, 0));
        // i + j never decreases along the order.
        for w in pos.windows(2) {
            assert!(w[1].0 + w[1].1 >= w[0].0 + w[0].1);
        }
        // Standard 4x4 zigzag start.
        assert_eq!(&pos[..6], &[(0, 0), (0, 1), (1, 0), (2, 0), (1, 1), (0, 2)]);
        // Every position appears exactly once.
        let mut sorted = pos.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), 16);
    }

    #[test]
    fn freq_normalize_examples() {
        let mut cube = DctCube {
            coefficients: Array3::zeros((2, 1, 3)),
            patch_size: 8,
            channel_order: ChannelOrder::Zigzag,
        };
        cube.coefficients[[0, 0, 0]] = -4.0;
        cube.coefficients[[0, 0, 1]] = 0.0;
        cube.coefficients[[0, 0, 2]] = 4.0;
        // channel 1 constant
        cube.coefficients[[1, 0, 0]] = 3.0;
        cube.coefficients[[1, 0, 1]] = 3.0;
        cube.coefficients[[1, 0, 2]] = 3.0;
        let fned = freq_normalize(&cube);
        assert_eq!(
            fned.coefficients.index_axis(Axis(0), 0).to_owned(),
            ndarray::arr2(&[[0.0, 0.5, 1.0]])
        );
        assert_eq!(
            fned.coefficients.index_axis(Axis(0), 1).to_owned(),
            ndarray::arr2(&[[0.0, 0.0, 0.0]])
        );
    }

    #[test]
    fn subject_normalize_maps_to_unit_range() {
        let vox = ndarray::Array3::from_shape_fn((2, 2, 2), |(d, h, w)| {
            -1000.0 + 1400.0 * ((d * 4 + h * 2 + w) as f64 / 7.0)
        });
        let vol = CtVolume::new(vox, (1.0, 1.0, 1.0), "s", None).unwrap();
        let out = subject_normalize(&vol, false).unwrap();
        let min = out.voxels.iter().fold(f64::INFINITY, |a, &v| a.min(v));
        let max = out.voxels.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
        assert_abs_diff_eq!(min, 0.0);
        assert_abs_diff_eq!(max, 1.0);
        // idempotent on an already-normalized volume
        let again = subject_normalize(&out, false).unwrap();
        assert_eq!(again.voxels, out.voxels);
    }

    #[test]
    fn subject_normalize_drops_lesion_free_slices() {
        let vox = ndarray::Array3::from_shape_fn((10, 2, 2), |(d, _, _)| d as f64);
        let mut mask = ndarray::Array3::<u8>::zeros((10, 2, 2));
        for d in 0..10 {
            if ![2, 5, 7].contains(&d) {
                mask[[d, 0, 0]] = 1;
            }
        }
        let vol = CtVolume::new(vox, (1.0, 1.0, 1.0), "s", Some(mask)).unwrap();
        let out = subject_normalize(&vol, true).unwrap();
        assert_eq!(out.num_slices(), 7);
        // all retained slices have lesions
        assert!(out.slices().unwrap().iter().all(|s| s.has_lesion()));
    }

    #[test]
    fn subject_normalize_error_cases() {
        let vox = ndarray::Array3::from_elem((2, 2, 2), 5.0);
        let vol = CtVolume::new(vox.clone(), (1.0, 1.0, 1.0), "s", None).unwrap();
        assert!(matches!(
            subject_normalize(&vol, false),
            Err(CoreError::Degenerate(_))
        ));
        let varied = ndarray::Array3::from_shape_fn((2, 2, 2), |(d, _, _)| d as f64);
        let vol2 = CtVolume::new(varied, (1.0, 1.0, 1.0), "s", None).unwrap();
        assert!(matches!(
            subject_normalize(&vol2, true),
            Err(CoreError::Config(_))
        ));
    }

    #[test]
    fn cube_construction_is_deterministic() {
        let mut rng = crate::rng::seeded(3);
        let img = Array2::from_shape_fn((64, 64), |_| rng.random_range(0.0..1.0));
        let s = SliceSample::new(img, None, "s", 0).unwrap();
        let a = freq_normalize(&build_dct_cube(&s, 8, ChannelOrder::Zigzag).unwrap());
        let b = freq_normalize(&build_dct_cube(&s, 8, ChannelOrder::Zigzag).unwrap());
        assert_eq!(a.coefficients, b.coefficients);
    }
}
