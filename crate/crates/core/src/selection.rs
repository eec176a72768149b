//! MI-based dynamic view selection: rank views by their estimated dependence
//! with the latent representation and keep the top sigma fraction.
//!
//! Selection is recomputed from fresh estimates every epoch by the training
//! loop; rankings must never be cached across epochs.

use ndarray::{Array2, Array3};

use crate::error::{CoreError, Result};
use crate::info::MiEstimator;

/// Number of views kept for fraction `sigma` out of `n_views`:
/// `max(1, ceil(n_views * sigma))`.
pub fn selection_count(n_views: usize, sigma: f64) -> Result<usize> {
    if !(sigma > 0.0 && sigma <= 1.0) {
        return Err(CoreError::config(format!(
            "sigma must be in (0, 1], got {sigma}"
        )));
    }
    if n_views == 0 {
        return Err(CoreError::config("need at least one view"));
    }
    Ok(((n_views as f64 * sigma).ceil() as usize).clamp(1, n_views))
}

/// Per-sample ranking of views by MI estimate, descending, with the selected
/// prefix. Ties break toward the lower view index (lower frequency).
#[derive(Debug, Clone)]
pub struct MiRanking {
    /// (view index, MI estimate), sorted descending by estimate.
    pub scores: Vec<(usize, f64)>,
    /// View indices of the selected prefix, `max(1, ceil(J * sigma))` long.
    pub selected: Vec<usize>,
}

impl MiRanking {
    /// Rank raw per-view scores (index = view) and select the top fraction.
    pub fn from_scores(scores: &[f64], sigma: f64) -> Result<Self> {
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(CoreError::numeric("non-finite MI estimate in ranking"));
        }
        let m = selection_count(scores.len(), sigma)?;
        let mut ranked: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
        ranked.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap()
                .then_with(|| a.0.cmp(&b.0))
        });
        let selected = ranked[..m].iter().map(|&(i, _)| i).collect();
        Ok(MiRanking {
            scores: ranked,
            selected,
        })
    }

    pub fn num_views(&self) -> usize {
        self.scores.len()
    }

    /// Estimates of the selected views, in ranking order.
    pub fn selected_estimates(&self) -> Vec<f64> {
        self.scores[..self.selected.len()]
            .iter()
            .map(|&(_, e)| e)
            .collect()
    }
}

/// Rank views for every sample of a batch with the estimator in evaluation
/// mode. `latents` is (B, u_dim); `views` is (B, J, v_dim).
pub fn rank_views(
    latents: &Array2<f64>,
    views: &Array3<f64>,
    estimator: &MiEstimator,
    sigma: f64,
) -> Result<Vec<MiRanking>> {
    let (b, j, _) = views.dim();
    if b == 0 || j == 0 {
        return Err(CoreError::config("empty batch or no views"));
    }
    selection_count(j, sigma)?;
    let scores = estimator.pointwise_scores(latents, views)?;
    rank_views_scored(&scores, sigma)
}

/// Rank already-computed per-sample, per-view scores (rows = samples).
pub fn rank_views_scored(scores: &Array2<f64>, sigma: f64) -> Result<Vec<MiRanking>> {
    (0..scores.nrows())
        .map(|i| MiRanking::from_scores(scores.row(i).as_slice().unwrap(), sigma))
        .collect()
}

/// Collapse per-sample rankings into one batch-level ranking by averaging
/// per-view estimates. Used for the per-epoch selected set and histograms.
pub fn aggregate_ranking(rankings: &[MiRanking], sigma: f64) -> Result<MiRanking> {
    if rankings.is_empty() {
        return Err(CoreError::validation("empty ranking batch"));
    }
    let j = rankings[0].num_views();
    if rankings.iter().any(|r| r.num_views() != j) {
        return Err(CoreError::shape("rankings cover differing view counts"));
    }
    let mut mean = vec![0.0; j];
    for r in rankings {
        for &(view, est) in &r.scores {
            mean[view] += est / rankings.len() as f64;
        }
    }
    MiRanking::from_scores(&mean, sigma)
}

/// The MI loss over a batch of rankings: the negated mean of the selected
/// views' estimates (per sample, then across the batch). Minimizing it
/// maximizes the selected views' mutual information.
pub fn mi_loss(rankings: &[MiRanking]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(CoreError::validation("empty ranking batch"));
    }
    let mut total = 0.0;
    for r in rankings {
        let sel = r.selected_estimates();
        if sel.is_empty() {
            return Err(CoreError::validation("ranking with empty selection"));
        }
        total += sel.iter().sum::<f64>() / sel.len() as f64;
    }
    Ok(-total / rankings.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn selection_count_examples() {
        // paper defaults: 64 views at sigma 0.2 keep 13
        assert_eq!(selection_count(64, 0.2).unwrap(), 13);
        assert_eq!(selection_count(64, 0.1).unwrap(), 7);
        assert_eq!(selection_count(64, 1.0).unwrap(), 64);
        // floor of one
        assert_eq!(selection_count(4, 0.01).unwrap(), 1);
        assert!(selection_count(64, 0.0).is_err());
        assert!(selection_count(64, 1.5).is_err());
    }

    #[test]
    fn ties_break_toward_low_frequency() {
        let scores = vec![0.5; 8];
        let r = MiRanking::from_scores(&scores, 0.25).unwrap();
        assert_eq!(r.selected, vec![0, 1]);
        assert_eq!(r.scores[0], (0, 0.5));
    }

    #[test]
    fn ranking_sorts_descending() {
        let scores = vec![0.1, 0.9, 0.4, 0.9];
        let r = MiRanking::from_scores(&scores, 0.5).unwrap();
        assert_eq!(r.scores[0], (1, 0.9)); // tie with 3 -> lower index first
        assert_eq!(r.scores[1], (3, 0.9));
        assert_eq!(r.selected, vec![1, 3]);
    }

    #[test]
    fn mi_loss_examples() {
        let r = MiRanking {
            scores: vec![(0, 0.5), (1, 0.3)],
            selected: vec![0, 1],
        };
        assert_abs_diff_eq!(mi_loss(&[r.clone()]).unwrap(), -0.4, epsilon = 1e-12);

        let zeros = MiRanking {
            scores: vec![(0, 0.0), (1, 0.0)],
            selected: vec![0, 1],
        };
        assert_abs_diff_eq!(mi_loss(&[zeros]).unwrap(), 0.0, epsilon = 1e-12);

        let a = MiRanking {
            scores: vec![(0, 0.5), (1, 0.3)],
            selected: vec![0, 1],
        };
        let b = MiRanking {
            scores: vec![(1, 0.3), (0, 0.1)],
            selected: vec![1, 0],
        };
        assert_abs_diff_eq!(mi_loss(&[a, b]).unwrap(), -0.3, epsilon = 1e-12);

        assert!(mi_loss(&[]).is_err());
    }

    #[test]
    fn mi_loss_decreases_when_selected_estimate_rises() {
        let base = MiRanking::from_scores(&[0.5, 0.4, 0.1], 0.5).unwrap();
        let boosted = MiRanking::from_scores(&[0.7, 0.4, 0.1], 0.5).unwrap();
        assert!(mi_loss(&[boosted]).unwrap() < mi_loss(&[base]).unwrap());
    }

    proptest! {
        /// Selection at a smaller sigma is a subset of a larger sigma's.
        #[test]
        fn monotone_sigma(scores in proptest::collection::vec(-5.0f64..5.0, 2..40),
                          s1 in 0.05f64..0.5, s2 in 0.5f64..1.0) {
            let r1 = MiRanking::from_scores(&scores, s1).unwrap();
            let r2 = MiRanking::from_scores(&scores, s2).unwrap();
            let set2: std::collections::HashSet<_> = r2.selected.iter().collect();
            prop_assert!(r1.selected.iter().all(|v| set2.contains(v)));
        }

        /// Permuting views permutes the selected indices correspondingly
        /// (strict scores so tie-breaks cannot interfere).
        #[test]
        fn permutation_equivariance(n in 3usize..20, seed in 0u64..1000) {
            let mut rng = crate::rng::seeded(seed);
            use rand::seq::SliceRandom;
            use rand::Rng;
            let mut scores: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
            scores.shuffle(&mut rng);
            let sigma = rng.random_range(0.1..1.0);
            let r = MiRanking::from_scores(&scores, sigma).unwrap();

            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rng);
            // view at new position i is the old view perm[i]
            let permuted: Vec<f64> = (0..n).map(|i| scores[perm[i]]).collect();
            let rp = MiRanking::from_scores(&permuted, sigma).unwrap();
            // positions selected under permutation map back to the originals
            let back: std::collections::HashSet<usize> =
                rp.selected.iter().map(|&i| perm[i]).collect();
            let orig: std::collections::HashSet<usize> =
                r.selected.iter().copied().collect();
            prop_assert_eq!(back, orig);
        }
    }
}
