//! Segmentation metrics: Dice similarity, mean IoU, and the boundary
//! distances HD95 and ASD.
//!
//! Boundary distances use an exact Euclidean distance transform (Felzenszwalb
//! two-pass), sampled at the other mask's boundary; the test suite checks it
//! against an exhaustive pairwise oracle.

use ndarray::Array2;

use crate::error::{CoreError, Result};

/// Surface-distance outcome for one mask pair. Pairs with exactly one empty
/// mask are undefined and excluded from aggregation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SurfaceDistances {
    Defined { hd95: f64, asd: f64 },
    Undefined,
}

/// Aggregated evaluation over a set of slices.
#[derive(Debug, Clone)]
pub struct MetricReport {
    pub dsc: f64,
    pub miou: f64,
    /// Mean HD95 over slices where it is defined.
    pub hd95: f64,
    /// Mean ASD over slices where it is defined.
    pub asd: f64,
    /// Slices skipped for surface distances (exactly one empty mask).
    pub undefined_surface_count: usize,
    /// Per-slice rows: (label, dsc, miou, surface distances).
    pub per_slice: Vec<(String, f64, f64, SurfaceDistances)>,
}

fn check_shapes(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<()> {
    if pred.dim() != gt.dim() {
        return Err(CoreError::shape(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        )));
    }
    Ok(())
}

/// Dice similarity coefficient 2|A n B| / (|A| + |B|); 1.0 when both empty.
pub fn dsc(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut inter = 0usize;
    let mut a = 0usize;
    let mut b = 0usize;
    for (&p, &g) in pred.iter().zip(gt.iter()) {
        let (p, g) = ((p != 0) as usize, (g != 0) as usize);
        inter += p & g;
        a += p;
        b += g;
    }
    if a + b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (a + b) as f64)
}

/// Mean IoU over the background and lesion classes; a class empty in both
/// masks contributes 1.0.
pub fn miou(pred: &Array2<u8>, gt: &Array2<u8>) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut iou_sum = 0.0;
    for class in 0..2u8 {
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            let pc = ((p != 0) as u8) == class;
            let gc = ((g != 0) as u8) == class;
            inter += (pc && gc) as usize;
            union += (pc || gc) as usize;
        }
        iou_sum += if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        };
    }
    Ok(iou_sum / 2.0)
}

/// Boundary pixels under 4-connectivity erosion: foreground pixels with at
/// least one 4-neighbor outside the mask (image border counts as outside).
pub fn boundary_pixels(mask: &Array2<u8>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if mask[[y, x]] == 0 {
                continue;
            }
            let on_border = y == 0 || x == 0 || y == h - 1 || x == w - 1;
            let interior = !on_border
                && mask[[y - 1, x]] != 0
                && mask[[y + 1, x]] != 0
                && mask[[y, x - 1]] != 0
                && mask[[y, x + 1]] != 0;
            if !interior {
                out.push((y, x));
            }
        }
    }
    out
}

/// HD95 and ASD between two masks with anisotropic pixel spacing (sy, sx).
///
/// Directed distances from each boundary to the other are pooled; HD95 is the
/// 95th percentile (linear interpolation) and ASD the mean of the pooled set.
/// Both masks empty gives (0, 0); exactly one empty is undefined.
pub fn surface_distances(
    pred: &Array2<u8>,
    gt: &Array2<u8>,
    spacing: (f64, f64),
) -> Result<SurfaceDistances> {
    check_shapes(pred, gt)?;
    if spacing.0 <= 0.0 || spacing.1 <= 0.0 {
        return Err(CoreError::validation("spacing must be positive"));
    }
    let pred_empty = pred.iter().all(|&v| v == 0);
    let gt_empty = gt.iter().all(|&v| v == 0);
    if pred_empty && gt_empty {
        return Ok(SurfaceDistances::Defined { hd95: 0.0, asd: 0.0 });
    }
    if pred_empty != gt_empty {
        return Ok(SurfaceDistances::Undefined);
    }

    let bp = boundary_pixels(pred);
    let bg = boundary_pixels(gt);
    let dt_gt = boundary_edt(gt, spacing);
    let dt_pred = boundary_edt(pred, spacing);

    let mut pooled: Vec<f64> = Vec::with_capacity(bp.len() + bg.len());
    for &(y, x) in &bp {
        pooled.push(dt_gt[[y, x]]);
    }
    for &(y, x) in &bg {
        pooled.push(dt_pred[[y, x]]);
    }
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
    let hd95 = percentile_linear(&pooled, 0.95);
    Ok(SurfaceDistances::Defined { hd95, asd })
}

/// Percentile with linear interpolation on a sorted slice.
fn percentile_linear(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Exact Euclidean distance (with spacing) from every pixel to the nearest
/// boundary pixel of `mask`, via the Felzenszwalb-Huttenlocher transform on
/// squared distances.
fn boundary_edt(mask: &Array2<u8>, spacing: (f64, f64)) -> Array2<f64> {
    let (h, w) = mask.dim();
    let boundary = boundary_pixels(mask);
    let mut sq = Array2::<f64>::from_elem((h, w), f64::INFINITY);
    for &(y, x) in &boundary {
        sq[[y, x]] = 0.0;
    }
    // column pass then row pass of the 1D squared-distance transform
    let (sy, sx) = spacing;
    let mut tmp = Array2::<f64>::zeros((h, w));
    for x in 0..w {
        let col: Vec<f64> = (0..h).map(|y| sq[[y, x]]).collect();
        let d = dt_1d(&col, sy);
        for y in 0..h {
            tmp[[y, x]] = d[y];
        }
    }
    let mut out = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        let row: Vec<f64> = (0..w).map(|x| tmp[[y, x]]).collect();
        let d = dt_1d(&row, sx);
        for x in 0..w {
            out[[y, x]] = d[x].sqrt();
        }
    }
    out
}

/// 1D squared distance transform with sample pitch `step` (lower envelope of
/// parabolas). Infinite inputs are clamped to a huge finite value, which
/// dominates every realistic squared distance on a 2D image grid.
fn dt_1d(f: &[f64], step: f64) -> Vec<f64> {
    const BIG: f64 = 1e20;
    let n = f.len();
    let f: Vec<f64> = f.iter().map(|&v| v.min(BIG)).collect();
    if n == 1 {
        return f;
    }
    let pos = |i: usize| i as f64 * step;
    let intersect = |q: usize, p: usize| -> f64 {
        let (xq, xp) = (pos(q), pos(p));
        ((f[q] + xq * xq) - (f[p] + xp * xp)) / (2.0 * (xq - xp))
    };
    let mut d = vec![0.0; n];
    let mut v = vec![0usize; n];
    let mut z = vec![0.0f64; n + 1];
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    for q in 1..n {
        let mut s = intersect(q, v[k]);
        while k > 0 && s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    let mut k2 = 0usize;
    for q in 0..n {
        let xq = pos(q);
        while z[k2 + 1] < xq {
            k2 += 1;
        }
        let xr = pos(v[k2]);
        d[q] = (xq - xr) * (xq - xr) + f[v[k2]];
    }
    d
}

/// Aggregate per-slice metrics into a report. `pairs` yields
/// (label, prediction, ground truth).
pub fn evaluate_slices<'a>(
    pairs: impl IntoIterator<Item = (String, &'a Array2<u8>, &'a Array2<u8>)>,
    spacing: (f64, f64),
) -> Result<MetricReport> {
    let mut per_slice = Vec::new();
    let mut dsc_sum = 0.0;
    let mut miou_sum = 0.0;
    let mut hd_sum = 0.0;
    let mut asd_sum = 0.0;
    let mut defined = 0usize;
    let mut undefined = 0usize;
    for (label, pred, gt) in pairs {
        let d = dsc(pred, gt)?;
        let m = miou(pred, gt)?;
        let s = surface_distances(pred, gt, spacing)?;
        match s {
            SurfaceDistances::Defined { hd95, asd } => {
                hd_sum += hd95;
                asd_sum += asd;
                defined += 1;
            }
            SurfaceDistances::Undefined => undefined += 1,
        }
        dsc_sum += d;
        miou_sum += m;
        per_slice.push((label, d, m, s));
    }
    let n = per_slice.len();
    if n == 0 {
        return Err(CoreError::validation("no slices to evaluate"));
    }
    Ok(MetricReport {
        dsc: dsc_sum / n as f64,
        miou: miou_sum / n as f64,
        hd95: if defined > 0 { hd_sum / defined as f64 } else { 0.0 },
        asd: if defined > 0 { asd_sum / defined as f64 } else { 0.0 },
        undefined_surface_count: undefined,
        per_slice,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::arr2;
    use proptest::prelude::*;

    fn square(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Array2<u8> {
        let mut m = Array2::<u8>::zeros((h, w));
        for y in y0..(y0 + side).min(h) {
            for x in x0..(x0 + side).min(w) {
                m[[y, x]] = 1;
            }
        }
        m
    }

    /// Exhaustive pairwise oracle for directed boundary distances.
    fn surface_brute(pred: &Array2<u8>, gt: &Array2<u8>, spacing: (f64, f64)) -> (f64, f64) {
        let bp = boundary_pixels(pred);
        let bg = boundary_pixels(gt);
        let dist = |a: &(usize, usize), b: &(usize, usize)| {
            let dy = (a.0 as f64 - b.0 as f64) * spacing.0;
            let dx = (a.1 as f64 - b.1 as f64) * spacing.1;
            (dy * dy + dx * dx).sqrt()
        };
        let mut pooled = Vec::new();
        for a in &bp {
            pooled.push(
                bg.iter()
                    .map(|b| dist(a, b))
                    .fold(f64::INFINITY, f64::min),
            );
        }
        for b in &bg {
            pooled.push(
                bp.iter()
                    .map(|a| dist(b, a))
                    .fold(f64::INFINITY, f64::min),
            );
        }
        pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let asd = pooled.iter().sum::<f64>() / pooled.len() as f64;
        (percentile_linear(&pooled, 0.95), asd)
    }

    #[test]
    fn dsc_identity_disjoint_halves() {
        let a = square(16, 16, 4, 4, 8);
        assert_abs_diff_eq!(dsc(&a, &a).unwrap(), 1.0);
        let b = square(16, 16, 0, 0, 2);
        let c = square(16, 16, 10, 10, 2);
        assert_abs_diff_eq!(dsc(&b, &c).unwrap(), 0.0);
        // pred = left half of an 8-wide gt square: 2 * (N/2) / (N/2 + N) = 2/3
        let gt = square(16, 16, 4, 4, 8);
        let mut pred = Array2::<u8>::zeros((16, 16));
        for y in 4..12 {
            for x in 4..8 {
                pred[[y, x]] = 1;
            }
        }
        assert_abs_diff_eq!(dsc(&pred, &gt).unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        // both empty -> 1 by convention
        let e = Array2::<u8>::zeros((4, 4));
        assert_abs_diff_eq!(dsc(&e, &e).unwrap(), 1.0);
    }

    #[test]
    fn miou_cases() {
        let a = square(16, 16, 4, 4, 8);
        assert_abs_diff_eq!(miou(&a, &a).unwrap(), 1.0);
        let e = Array2::<u8>::zeros((8, 8));
        assert_abs_diff_eq!(miou(&e, &e).unwrap(), 1.0);
        // half-overlap: verify against direct pixel counting
        let gt = square(16, 16, 4, 4, 8);
        let mut pred = Array2::<u8>::zeros((16, 16));
        for y in 4..12 {
            for x in 4..8 {
                pred[[y, x]] = 1;
            }
        }
        // lesion: inter 32, union 64 -> 0.5
        // background: inter 256-64=192, union 256-32=224
        let want = (32.0 / 64.0 + 192.0 / 224.0) / 2.0;
        assert_abs_diff_eq!(miou(&pred, &gt).unwrap(), want, epsilon = 1e-12);
    }

    #[test]
    fn surface_identity_and_conventions() {
        let a = square(16, 16, 4, 4, 6);
        match surface_distances(&a, &a, (1.0, 1.0)).unwrap() {
            SurfaceDistances::Defined { hd95, asd } => {
                assert_abs_diff_eq!(hd95, 0.0);
                assert_abs_diff_eq!(asd, 0.0);
            }
            _ => panic!("identity must be defined"),
        }
        let e = Array2::<u8>::zeros((16, 16));
        assert_eq!(
            surface_distances(&e, &e, (1.0, 1.0)).unwrap(),
            SurfaceDistances::Defined { hd95: 0.0, asd: 0.0 }
        );
        assert_eq!(
            surface_distances(&a, &e, (1.0, 1.0)).unwrap(),
            SurfaceDistances::Undefined
        );
    }

    #[test]
    fn offset_squares_match_brute_force() {
        for k in 1..5usize {
            let a = square(24, 24, 6, 6, 5);
            let b = square(24, 24, 6, 6 + k, 5);
            let got = surface_distances(&a, &b, (1.0, 1.0)).unwrap();
            let (hd_want, asd_want) = surface_brute(&a, &b, (1.0, 1.0));
            match got {
                SurfaceDistances::Defined { hd95, asd } => {
                    assert_abs_diff_eq!(hd95, hd_want, epsilon = 1e-9);
                    assert_abs_diff_eq!(asd, asd_want, epsilon = 1e-9);
                }
                _ => panic!("offset squares must be defined"),
            }
        }
    }

    #[test]
    fn spacing_homogeneity() {
        let a = square(20, 20, 3, 3, 6);
        let b = square(20, 20, 8, 9, 7);
        let one = surface_distances(&a, &b, (1.0, 1.0)).unwrap();
        let two = surface_distances(&a, &b, (2.0, 2.0)).unwrap();
        match (one, two) {
            (
                SurfaceDistances::Defined { hd95: h1, asd: a1 },
                SurfaceDistances::Defined { hd95: h2, asd: a2 },
            ) => {
                assert_abs_diff_eq!(h2, 2.0 * h1, epsilon = 1e-9);
                assert_abs_diff_eq!(a2, 2.0 * a1, epsilon = 1e-9);
            }
            _ => panic!("defined expected"),
        }
    }

    #[test]
    fn shape_mismatch_errors() {
        let a = Array2::<u8>::zeros((4, 4));
        let b = Array2::<u8>::zeros((4, 5));
        assert!(dsc(&a, &b).is_err());
        assert!(miou(&a, &b).is_err());
        assert!(surface_distances(&a, &b, (1.0, 1.0)).is_err());
    }

    #[test]
    fn boundary_of_plus_shape() {
        let m = arr2(&[
            [0, 1, 0],
            [1, 1, 1],
            [0, 1, 0],
        ])
        .mapv(|v: i32| v as u8);
        // the four arms touch background; the center is 4-connected interior
        assert_eq!(boundary_pixels(&m).len(), 4);
        // 3x3 fully set: the ring touches the image border, the center is interior
        let full = Array2::<u8>::from_elem((3, 3), 1);
        assert_eq!(boundary_pixels(&full).len(), 8);
        // 5x5 fully set: the 3x3 interior erodes away, leaving the ring
        let full5 = Array2::<u8>::from_elem((5, 5), 1);
        assert_eq!(boundary_pixels(&full5).len(), 16);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        /// dsc symmetry, translation invariance of overlap metrics, and
        /// agreement of EDT distances with the exhaustive oracle on random
        /// small masks.
        #[test]
        fn random_masks_agree_with_oracle(seed in 0u64..500) {
            let mut rng = crate::rng::seeded(seed);
            use rand::Rng;
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let mut m = Array2::<u8>::zeros((12, 12));
                let n = rng.random_range(1..4);
                for _ in 0..n {
                    let y = rng.random_range(0..9);
                    let x = rng.random_range(0..9);
                    let s = rng.random_range(1..4);
                    for yy in y..(y + s).min(12) {
                        for xx in x..(x + s).min(12) {
                            m[[yy, xx]] = 1;
                        }
                    }
                }
                m
            };
            let a = mk(&mut rng);
            let b = mk(&mut rng);
            prop_assume!(a.iter().any(|&v| v != 0) && b.iter().any(|&v| v != 0));

            prop_assert!((dsc(&a,&b).unwrap() - dsc(&b,&a).unwrap()).abs() < 1e-12);

            let got = surface_distances(&a, &b, (1.0, 1.0)).unwrap();
            let (hd_want, asd_want) = surface_brute(&a, &b, (1.0, 1.0));
            match got {
                SurfaceDistances::Defined { hd95, asd } => {
                    prop_assert!((hd95 - hd_want).abs() < 1e-9);
                    prop_assert!((asd - asd_want).abs() < 1e-9);
                    // hd95 never exceeds the exact Hausdorff distance
                    let bp = boundary_pixels(&a);
                    let bg = boundary_pixels(&b);
                    let d = |p: &(usize,usize), q: &(usize,usize)| {
                        let dy = p.0 as f64 - q.0 as f64;
                        let dx = p.1 as f64 - q.1 as f64;
                        (dy*dy + dx*dx).sqrt()
                    };
                    let h_ab = bp.iter().map(|p| bg.iter().map(|q| d(p,q))
                        .fold(f64::INFINITY, f64::min)).fold(0.0, f64::max);
                    let h_ba = bg.iter().map(|q| bp.iter().map(|p| d(q,p))
                        .fold(f64::INFINITY, f64::min)).fold(0.0, f64::max);
                    prop_assert!(hd95 <= h_ab.max(h_ba) + 1e-9);
                }
                _ => prop_assert!(false, "nonempty masks must be defined"),
            }
        }

        /// Rigid translation leaves all metrics unchanged.
        #[test]
        fn translation_invariance(dy in 0usize..4, dx in 0usize..4) {
            let a = square(20, 20, 4, 4, 5);
            let b = square(20, 20, 6, 5, 4);
            let at = square(20, 20, 4 + dy, 4 + dx, 5);
            let bt = square(20, 20, 6 + dy, 5 + dx, 4);
            prop_assert!((dsc(&a,&b).unwrap() - dsc(&at,&bt).unwrap()).abs() < 1e-12);
            prop_assert!((miou(&a,&b).unwrap() - miou(&at,&bt).unwrap()).abs() < 1e-12);
            let s1 = surface_distances(&a, &b, (1.0, 1.0)).unwrap();
            let s2 = surface_distances(&at, &bt, (1.0, 1.0)).unwrap();
            match (s1, s2) {
                (SurfaceDistances::Defined { hd95: h1, asd: a1 },
                 SurfaceDistances::Defined { hd95: h2, asd: a2 }) => {
                    prop_assert!((h1 - h2).abs() < 1e-9);
                    prop_assert!((a1 - a2).abs() < 1e-9);
                }
                _ => prop_assert!(false),
            }
        }
    }
}
