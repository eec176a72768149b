//! Contrastive losses over projected embeddings: single-view (memory bank),
//! two-view (symmetric InfoNCE), and selected-multi-view with an optional
//! semi-supervised mask term.
//!
//! Similarities are temperature-scaled cosine, d(u, v) = exp(cos(u, v) / tau).
//! All losses are negated log-ratios, so they are nonnegative and minimizing
//! them raises the positive pair's share.

use ndarray::{Array2, Array3, ArrayView1, Axis};
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::nn::layers::Activation;
use crate::nn::{Mlp, ParamGroup, ParamStore, Tape, Var};

/// Large constant subtracted from logits to exclude a candidate from a
/// softmax denominator.
const EXCLUDE: f64 = 1e9;

/// Self-supervised or semi-supervised (mask-aware) operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastiveMode {
    SelfSupervised,
    SemiSupervised,
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(CoreError::config(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Temperature-scaled similarity d(u, v) = exp(cos(u, v) / tau).
///
/// Errors on zero-norm vectors (norms below the 1e-12 floor).
pub fn similarity(u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    if u.len() != v.len() {
        return Err(CoreError::shape("embedding dims differ"));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu < 1e-12 || nv < 1e-12 {
        return Err(CoreError::numeric("zero-norm embedding in similarity"));
    }
    let dot: f64 = u.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv) / tau).exp())
}

/// Single-view contrastive loss from a positive score and a memory bank of
/// negative scores: `-ln(d_pos / (d_pos + sum(bank)))`.
pub fn single_view_loss(positive_score: f64, bank: &[f64]) -> Result<f64> {
    if bank.is_empty() {
        return Err(CoreError::validation("empty memory bank"));
    }
    if positive_score <= 0.0 || bank.iter().any(|&s| s < 0.0) {
        return Err(CoreError::validation(
            "scores must be positive (exponentiated similarities)",
        ));
    }
    let denom = positive_score + bank.iter().sum::<f64>();
    Ok(-(positive_score / denom).ln())
}

fn validate_batch(v: &Array2<f64>, what: &str) -> Result<()> {
    for row in v.rows() {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-12 {
            return Err(CoreError::numeric(format!("zero-norm row in {what}")));
        }
    }
    Ok(())
}

/// Symmetric two-view InfoNCE (Eq.-7-style): both views anchor in turn,
/// positives are index-matched rows, negatives are the cross-index rows.
/// Returns the sum of the two per-anchor-averaged directions.
pub fn two_view_loss(view1: &Array2<f64>, view2: &Array2<f64>, tau: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let v1 = tape.input2(view1);
    let v2 = tape.input2(view2);
    let loss = two_view_loss_graph(&mut tape, v1, v2, tau)?;
    Ok(tape.scalar(loss))
}

/// Graph form of [`two_view_loss`] for use inside training graphs.
pub fn two_view_loss_graph(tape: &mut Tape, view1: Var, view2: Var, tau: f64) -> Result<Var> {
    check_tau(tau)?;
    let (b1, d1) = dims2(tape, view1)?;
    let (b2, d2) = dims2(tape, view2)?;
    if b1 != b2 || d1 != d2 {
        return Err(CoreError::shape(format!(
            "view batches must match: ({b1},{d1}) vs ({b2},{d2})"
        )));
    }
    if b1 < 2 {
        return Err(CoreError::validation(
            "two-view loss needs batch size >= 2 for negatives",
        ));
    }
    let n1 = tape.row_normalize(view1);
    let n2 = tape.row_normalize(view2);
    let n2t = tape.transpose2(n2);
    let cos12 = tape.matmul(n1, n2t); // (b, b)
    let logits12 = tape.mul_scalar(cos12, 1.0 / tau);
    let d1 = info_nce_rows(tape, logits12, &identity_targets(b1));
    let logits21 = tape.transpose2(logits12);
    let d2 = info_nce_rows(tape, logits21, &identity_targets(b1));
    Ok(tape.add(d1, d2))
}

fn identity_targets(b: usize) -> Vec<usize> {
    (0..b).collect()
}

/// Mean over rows of `lse(logits_row) - logits_row[target]`.
fn info_nce_rows(tape: &mut Tape, logits: Var, targets: &[usize]) -> Var {
    let lse = tape.log_sum_exp_rows(logits);
    let pos = tape.take_per_row(logits, targets);
    let gap = tape.sub(lse, pos);
    tape.mean(gap)
}

fn dims2(tape: &Tape, v: Var) -> Result<(usize, usize)> {
    let s = tape.value(v).shape();
    if s.len() != 2 {
        return Err(CoreError::shape("expected a 2D embedding batch"));
    }
    Ok((s[0], s[1]))
}

/// Selected-multi-view contrastive loss.
///
/// For every sample j and selected view i, two InfoNCE directions are summed:
/// the latent anchors against all samples' selected-view embeddings (own
/// views other than i excluded), and the view anchors against all latents.
/// The total is averaged over the B*M (sample, view) pairs. Semi-supervised
/// mode adds a symmetric latent/mask-embedding term with cross-sample
/// negatives.
pub fn multiview_loss(
    latents: &Array2<f64>,
    selected_views: &Array3<f64>,
    masks: Option<&Array2<f64>>,
    mode: ContrastiveMode,
    tau: f64,
) -> Result<f64> {
    validate_batch(latents, "latents")?;
    if let Some(m) = masks {
        validate_batch(m, "mask embeddings")?;
    }
    let mut tape = Tape::new();
    let l = tape.input2(latents);
    let (b, m, d) = selected_views.dim();
    let flat = selected_views
        .to_shape((b * m, d))
        .map_err(|e| CoreError::shape(e.to_string()))?
        .to_owned();
    validate_batch(&flat, "view embeddings")?;
    let v = tape.input2(&flat);
    let mk = masks.map(|ma| tape.input2(ma));
    let loss = multiview_loss_graph(&mut tape, l, v, m, mk, mode, tau)?;
    Ok(tape.scalar(loss))
}

/// Graph form of [`multiview_loss`]. `views_flat` is (B*M, d), sample-major
/// (row j*M + i is view i of sample j).
pub fn multiview_loss_graph(
    tape: &mut Tape,
    latents: Var,
    views_flat: Var,
    views_per_sample: usize,
    masks: Option<Var>,
    mode: ContrastiveMode,
    tau: f64,
) -> Result<Var> {
    check_tau(tau)?;
    let (b, d) = dims2(tape, latents)?;
    let (bm, dv) = dims2(tape, views_flat)?;
    let m = views_per_sample;
    if m == 0 || bm != b * m || dv != d {
        return Err(CoreError::shape(format!(
            "views must be (B*M, d) = ({}, {d}), got ({bm}, {dv})",
            b * m
        )));
    }
    if b < 2 {
        return Err(CoreError::validation(
            "multi-view loss needs batch size >= 2 for negatives",
        ));
    }
    match (mode, masks.is_some()) {
        (ContrastiveMode::SemiSupervised, false) => {
            return Err(CoreError::config(
                "semi-supervised mode requires mask embeddings",
            ));
        }
        (ContrastiveMode::SelfSupervised, true) => {
            return Err(CoreError::config(
                "mask embeddings provided but mode is self-supervised",
            ));
        }
        _ => {}
    }

    let ln = tape.row_normalize(latents);
    let vn = tape.row_normalize(views_flat);

    // latent -> views direction, one InfoNCE row per (sample, view) pair
    let vnt = tape.transpose2(vn);
    let cos_lv = tape.matmul(ln, vnt); // (b, b*m)
    let logits_lv = tape.mul_scalar(cos_lv, 1.0 / tau);
    // replicate latent row j for each of its m pairs
    let mut rep = Array2::<f64>::zeros((b * m, b));
    for j in 0..b {
        for i in 0..m {
            rep[[j * m + i, j]] = 1.0;
        }
    }
    let rep_v = tape.input2(&rep);
    let expanded = tape.matmul(rep_v, logits_lv); // (b*m, b*m)
    // exclude the anchor's own other views from the denominator
    let mut mask = Array2::<f64>::zeros((b * m, b * m));
    for j in 0..b {
        for i in 0..m {
            let row = j * m + i;
            for other in 0..m {
                if other != i {
                    mask[[row, j * m + other]] = -EXCLUDE;
                }
            }
        }
    }
    let mask_v = tape.input2(&mask);
    let masked = tape.add(expanded, mask_v);
    let targets_lv: Vec<usize> = (0..b * m).collect(); // positive = own column
    let dir_lv = info_nce_rows(tape, masked, &targets_lv);

    // views -> latent direction: candidates are the B latents
    let lnt = tape.transpose2(ln);
    let cos_vl = tape.matmul(vn, lnt); // (b*m, b)
    let logits_vl = tape.mul_scalar(cos_vl, 1.0 / tau);
    let targets_vl: Vec<usize> = (0..b * m).map(|r| r / m).collect();
    let dir_vl = info_nce_rows(tape, logits_vl, &targets_vl);

    let mut total = tape.add(dir_lv, dir_vl);

    if let Some(mask_emb) = masks {
        let (bm2, dm) = dims2(tape, mask_emb)?;
        if bm2 != b || dm != d {
            return Err(CoreError::shape(format!(
                "mask embeddings must be ({b}, {d}), got ({bm2}, {dm})"
            )));
        }
        let semi = two_view_loss_graph(tape, latents, mask_emb, tau)?;
        total = tape.add(total, semi);
    }
    Ok(total)
}

/// Three-linear-layer projection head mapping flattened feature maps to an
/// embedding vector. Separate instances serve the latent, view, and mask
/// branches; all share the output width.
#[derive(Debug, Clone)]
pub struct ProjectionHead {
    mlp: Mlp,
    pub in_dim: usize,
    pub out_dim: usize,
}

/// Default projection widths: flatten -> 512 -> 256 -> 128.
pub const HEAD_WIDTHS: [usize; 3] = [512, 256, 128];

impl ProjectionHead {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::with_widths(store, name, in_dim, &HEAD_WIDTHS, group, rng)
    }

    /// Head with custom layer widths (the last entry is the embedding dim).
    pub fn with_widths(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        widths: &[usize],
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(!widths.is_empty());
        let mut dims = vec![in_dim];
        dims.extend_from_slice(widths);
        let mlp = Mlp::new(store, name, &dims, Activation::Relu, group, rng);
        ProjectionHead {
            mlp,
            in_dim,
            out_dim: *widths.last().unwrap(),
        }
    }

    /// Project a (n, in_dim) batch to (n, out_dim).
    pub fn fwd(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        self.mlp.fwd(tape, store, x)
    }
}

/// Embedding-input gradient of a loss builder, for gradient checks and small
/// experiments: returns (loss, d loss / d latents).
pub fn multiview_loss_grad_latents(
    latents: &Array2<f64>,
    selected_views: &Array3<f64>,
    tau: f64,
) -> Result<(f64, Array2<f64>)> {
    let mut tape = Tape::new();
    let l = tape.input2(latents);
    let (b, m, d) = selected_views.dim();
    let flat = selected_views.to_shape((b * m, d)).unwrap().to_owned();
    let v = tape.input2(&flat);
    let loss = multiview_loss_graph(
        &mut tape,
        l,
        v,
        m,
        None,
        ContrastiveMode::SelfSupervised,
        tau,
    )?;
    let grads = tape.backward(loss);
    let g = grads
        .wrt(l)
        .ok_or_else(|| CoreError::numeric("latents got no gradient"))?
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .map_err(|e| CoreError::shape(e.to_string()))?;
    Ok((tape.scalar(loss), g))
}

/// Average the selected view embeddings of each sample (helper for logging).
pub fn mean_selected_view(views: &Array3<f64>) -> Array2<f64> {
    views.mean_axis(Axis(1)).unwrap()
}
