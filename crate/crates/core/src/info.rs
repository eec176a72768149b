//! Information metrics: exact discrete entropy/MI oracles, and a neural MI
//! estimator (Donsker-Varadhan bound with a trainable critic).
//!
//! All values are in nats; [`nats_to_bits`] converts for display.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::nn::layers::Activation;
use crate::nn::{Adam, Embedding, Mlp, ParamGroup, ParamStore, Tape, Var};

const PROB_TOL: f64 = 1e-9;
/// Critic outputs are clipped here before exponentiation; a pure overflow
/// guard, never reached by a sanely trained critic.
const CRITIC_CLIP: f64 = 30.0;

pub fn nats_to_bits(nats: f64) -> f64 {
    nats / std::f64::consts::LN_2
}

// ---------------------------------------------------------------------------
// Discrete oracles
// ---------------------------------------------------------------------------

/// A validated joint probability table p(x, y), rows indexing x.
#[derive(Debug, Clone)]
pub struct DiscreteJoint {
    table: Array2<f64>,
}

impl DiscreteJoint {
    pub fn new(table: Array2<f64>) -> Result<Self> {
        if table.is_empty() {
            return Err(CoreError::validation("empty joint table"));
        }
        if table.iter().any(|&p| p < 0.0 || !p.is_finite()) {
            return Err(CoreError::validation(
                "joint table entries must be finite and nonnegative",
            ));
        }
        let total: f64 = table.sum();
        if (total - 1.0).abs() > PROB_TOL {
            return Err(CoreError::validation(format!(
                "joint table sums to {total}, expected 1"
            )));
        }
        Ok(DiscreteJoint { table })
    }

    pub fn table(&self) -> &Array2<f64> {
        &self.table
    }

    pub fn transposed(&self) -> DiscreteJoint {
        DiscreteJoint {
            table: self.table.t().as_standard_layout().to_owned(),
        }
    }

    /// Marginal over x (row sums).
    pub fn marginal_x(&self) -> Vec<f64> {
        self.table.sum_axis(Axis(1)).to_vec()
    }

    /// Marginal over y (column sums).
    pub fn marginal_y(&self) -> Vec<f64> {
        self.table.sum_axis(Axis(0)).to_vec()
    }
}

/// Shannon entropy of a probability vector, in nats, with 0 ln 0 := 0.
pub fn discrete_entropy(marginal: &[f64]) -> Result<f64> {
    if marginal.is_empty() {
        return Err(CoreError::validation("empty distribution"));
    }
    if marginal.iter().any(|&p| p < 0.0 || !p.is_finite()) {
        return Err(CoreError::validation(
            "probabilities must be finite and nonnegative",
        ));
    }
    let total: f64 = marginal.iter().sum();
    if (total - 1.0).abs() > PROB_TOL {
        return Err(CoreError::validation(format!(
            "distribution sums to {total}, expected 1"
        )));
    }
    Ok(marginal
        .iter()
        .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
        .sum())
}

/// Conditional entropy H(X|Y) of a joint table, in nats.
pub fn discrete_conditional_entropy(joint: &DiscreteJoint) -> f64 {
    let py = joint.marginal_y();
    let mut h = 0.0;
    for ((_, y), &pxy) in joint.table.indexed_iter() {
        if pxy > 0.0 {
            h -= pxy * (pxy / py[y]).ln();
        }
    }
    h
}

/// Exact mutual information of a discrete joint by direct double sum, nats.
///
/// Equals `H(X) - H(X|Y)`; both routes are exercised by tests.
pub fn discrete_mi_oracle(joint: &DiscreteJoint) -> f64 {
    let px = joint.marginal_x();
    let py = joint.marginal_y();
    let mut mi = 0.0;
    for ((x, y), &pxy) in joint.table.indexed_iter() {
        if pxy > 0.0 {
            mi += pxy * (pxy / (px[x] * py[y])).ln();
        }
    }
    mi
}

// ---------------------------------------------------------------------------
// Neural estimator
// ---------------------------------------------------------------------------

/// Critic and training hyperparameters for the neural estimator.
#[derive(Debug, Clone)]
pub struct MineConfig {
    /// Hidden width of the critic MLP.
    pub hidden: usize,
    /// Number of hidden layers.
    pub hidden_layers: usize,
    /// Width of the learned view-index embedding (shared-critic mode).
    pub view_embed_dim: usize,
    /// Critic learning rate.
    pub lr: f64,
    /// Decay of the moving average used in the bias-corrected gradient.
    pub ema_decay: f64,
    pub seed: u64,
}

impl Default for MineConfig {
    fn default() -> Self {
        MineConfig {
            hidden: 128,
            hidden_layers: 2,
            view_embed_dim: 16,
            lr: 1e-3,
            ema_decay: 0.99,
            seed: 0,
        }
    }
}

/// Whether an estimator call may update the critic.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMode {
    Train,
    Eval,
}

/// The critic network T(u, v) mapping embedding pairs to a scalar score.
///
/// In shared mode a learned view-index embedding is concatenated to the pair,
/// so one critic serves every frequency view.
#[derive(Debug, Clone)]
pub struct MineCritic {
    mlp: Mlp,
    view_embed: Option<Embedding>,
    pub u_dim: usize,
    pub v_dim: usize,
    pub n_views: usize,
}

/// Mutable estimator state: per-view EMA of the marginal expectation and the
/// number of gradient steps taken.
#[derive(Debug, Clone)]
pub struct MineState {
    pub ema_denominator: Vec<f64>,
    pub step: u64,
}

impl MineState {
    pub fn new(n_views: usize) -> Self {
        MineState {
            ema_denominator: vec![0.0; n_views],
            step: 0,
        }
    }
}

impl MineCritic {
    /// Plain pair critic (single implicit view).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        u_dim: usize,
        v_dim: usize,
        cfg: &MineConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::build(store, name, u_dim, v_dim, 1, false, cfg, rng)
    }

    /// Shared critic over `n_views` views, conditioned on a view embedding.
    pub fn with_views(
        store: &mut ParamStore,
        name: &str,
        u_dim: usize,
        v_dim: usize,
        n_views: usize,
        cfg: &MineConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self::build(store, name, u_dim, v_dim, n_views, true, cfg, rng)
    }

    #[allow(clippy::too_many_arguments)]
    fn build(
        store: &mut ParamStore,
        name: &str,
        u_dim: usize,
        v_dim: usize,
        n_views: usize,
        conditioned: bool,
        cfg: &MineConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let embed = if conditioned {
            Some(Embedding::new(
                store,
                &format!("{name}.view_embed"),
                n_views,
                cfg.view_embed_dim,
                ParamGroup::Critic,
                rng,
            ))
        } else {
            None
        };
        let in_dim = u_dim + v_dim + embed.as_ref().map(|e| e.dim).unwrap_or(0);
        let mut dims = vec![in_dim];
        dims.extend(std::iter::repeat(cfg.hidden).take(cfg.hidden_layers));
        dims.push(1);
        let mlp = Mlp::new(
            store,
            &format!("{name}.critic"),
            &dims,
            Activation::Elu,
            ParamGroup::Critic,
            rng,
        );
        MineCritic {
            mlp,
            view_embed: embed,
            u_dim,
            v_dim,
            n_views,
        }
    }

    /// Critic scores for rows of (u, v[, view]) as a length-n graph node.
    pub fn scores(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        u: Var,
        v: Var,
        views: Option<&[usize]>,
    ) -> Var {
        let mut parts = vec![u, v];
        if let Some(embed) = &self.view_embed {
            let idx = views.expect("view-conditioned critic needs view indices");
            parts.push(embed.fwd(tape, store, idx));
        }
        let x = tape.concat_axis1(&parts);
        let t = self.mlp.fwd(tape, store, x); // (n, 1)
        let n = tape.value(t).shape()[0];
        tape.reshape(t, &[n])
    }
}

/// Clip then exponentiate a score vector on the tape (overflow guard).
fn exp_clipped(tape: &mut Tape, t: Var) -> Var {
    let c = tape.clip(t, -CRITIC_CLIP, CRITIC_CLIP);
    tape.exp(c)
}

impl Tape {
    /// Elementwise clamp composed from relu, so gradients vanish outside the
    /// range instead of exploding.
    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        // x - relu(x - hi) + relu(lo - x)
        let over = self.add_scalar(x, -hi);
        let over = self.relu(over);
        let neg = self.neg(x);
        let under = self.add_scalar(neg, lo);
        let under = self.relu(under);
        let a = self.sub(x, over);
        self.add(a, under)
    }
}

/// Self-contained neural MI estimator: critic, state, and optimizer.
///
/// The estimate is the Donsker-Varadhan bound
/// `E_joint[T] - ln E_marginal[e^T]`; training uses the standard
/// moving-average correction of the marginal term's gradient.
#[derive(Debug)]
pub struct MiEstimator {
    pub store: ParamStore,
    pub critic: MineCritic,
    pub state: MineState,
    opt: Adam,
    pub cfg: MineConfig,
}

impl MiEstimator {
    pub fn new(u_dim: usize, v_dim: usize, cfg: MineConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::seeded(cfg.seed);
        let critic = MineCritic::new(&mut store, "mi", u_dim, v_dim, &cfg, &mut rng);
        let opt = Adam::for_group(&store, ParamGroup::Critic, 0.0);
        MiEstimator {
            store,
            critic,
            state: MineState::new(1),
            opt,
            cfg,
        }
    }

    pub fn with_views(u_dim: usize, v_dim: usize, n_views: usize, cfg: MineConfig) -> Self {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::seeded(cfg.seed);
        let critic =
            MineCritic::with_views(&mut store, "mi", u_dim, v_dim, n_views, &cfg, &mut rng);
        let opt = Adam::for_group(&store, ParamGroup::Critic, 0.0);
        MiEstimator {
            store,
            critic,
            state: MineState::new(n_views),
            opt,
            cfg,
        }
    }

    fn check_batch(&self, pairs: (&Array2<f64>, &Array2<f64>)) -> Result<()> {
        let (u, v) = pairs;
        if u.nrows() < 2 || v.nrows() < 2 {
            return Err(CoreError::validation(
                "batch size must be at least 2 (marginal shuffle undefined)",
            ));
        }
        if u.ncols() != self.critic.u_dim || v.ncols() != self.critic.v_dim {
            return Err(CoreError::shape(format!(
                "embedding dims ({}, {}) do not match critic ({}, {})",
                u.ncols(),
                v.ncols(),
                self.critic.u_dim,
                self.critic.v_dim
            )));
        }
        Ok(())
    }

    /// Donsker-Varadhan estimate on explicit joint and marginal sample pairs.
    ///
    /// In `Train` mode the critic advances one bias-corrected gradient step;
    /// `Eval` leaves all state untouched.
    pub fn mine_estimate(
        &mut self,
        pairs_joint: (&Array2<f64>, &Array2<f64>),
        pairs_marginal: (&Array2<f64>, &Array2<f64>),
        mode: EstimatorMode,
    ) -> Result<f64> {
        self.check_batch(pairs_joint)?;
        self.check_batch(pairs_marginal)?;
        if pairs_joint.0.nrows() != pairs_joint.1.nrows()
            || pairs_marginal.0.nrows() != pairs_marginal.1.nrows()
        {
            return Err(CoreError::shape("paired batches must have equal rows"));
        }

        let mut tape = Tape::new();
        let uj = tape.input2(pairs_joint.0);
        let vj = tape.input2(pairs_joint.1);
        let um = tape.input2(pairs_marginal.0);
        let vm = tape.input2(pairs_marginal.1);
        let tj = self.critic.scores(&mut tape, &self.store, uj, vj, None);
        let tm = self.critic.scores(&mut tape, &self.store, um, vm, None);

        let estimate = dv_value(tape.value(tj), tape.value(tm));

        if mode == EstimatorMode::Train {
            let mean_tj = tape.mean(tj);
            let e_tm = exp_clipped(&mut tape, tm);
            let mean_etm = tape.mean(e_tm);
            // moving-average denominator for the corrected gradient
            let batch_mean = tape.scalar(mean_etm);
            let ema = if self.state.step == 0 {
                batch_mean
            } else {
                self.cfg.ema_decay * self.state.ema_denominator[0]
                    + (1.0 - self.cfg.ema_decay) * batch_mean
            };
            self.state.ema_denominator[0] = ema;
            self.state.step += 1;

            let corrected = tape.mul_scalar(mean_etm, 1.0 / ema);
            let gap = tape.sub(mean_tj, corrected);
            let loss = tape.neg(gap);
            let grads = tape.backward(loss);
            self.store.zero_grads();
            grads.accumulate_params(&tape, &mut self.store);
            self.opt.step(&mut self.store, self.cfg.lr);
        }

        if !estimate.is_finite() {
            return Err(CoreError::numeric("MI estimate is not finite"));
        }
        Ok(estimate)
    }

    /// Convenience trainer: repeatedly draws minibatches from aligned samples
    /// `(u, v)`, shuffling v within the batch for the marginal term.
    pub fn fit(
        &mut self,
        u: &Array2<f64>,
        v: &Array2<f64>,
        steps: usize,
        batch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<()> {
        if u.nrows() != v.nrows() {
            return Err(CoreError::shape("u and v must have equal rows"));
        }
        let n = u.nrows();
        if batch < 2 || n < 2 {
            return Err(CoreError::validation("need at least 2 samples"));
        }
        for _ in 0..steps {
            let idx: Vec<usize> = (0..batch).map(|_| rng.random_range(0..n)).collect();
            let shift = 1 + rng.random_range(0..batch - 1);
            let uj = select_rows(u, &idx);
            let vj = select_rows(v, &idx);
            // marginal: pair u_i with v from a rotated batch position
            let midx: Vec<usize> = (0..batch).map(|k| idx[(k + shift) % batch]).collect();
            let vm = select_rows(v, &midx);
            self.mine_estimate((&uj, &vj), (&uj, &vm), EstimatorMode::Train)?;
        }
        Ok(())
    }

    /// Evaluation-mode estimate over full sample sets, v shuffled by rotation.
    pub fn evaluate(&mut self, u: &Array2<f64>, v: &Array2<f64>) -> Result<f64> {
        if u.nrows() != v.nrows() || u.nrows() < 2 {
            return Err(CoreError::validation("need at least 2 aligned samples"));
        }
        let n = u.nrows();
        let midx: Vec<usize> = (0..n).map(|k| (k + n / 2) % n).collect();
        let vm = select_rows(v, &midx);
        self.mine_estimate((u, v), (u, &vm), EstimatorMode::Eval)
    }

    /// One training step of the view-conditioned critic over all views of a
    /// batch. `views` is (batch, n_views, v_dim). Returns the mean per-view
    /// DV estimate.
    pub fn train_step_views(
        &mut self,
        latents: &Array2<f64>,
        views: &Array3<f64>,
        rng: &mut ChaCha8Rng,
    ) -> Result<f64> {
        critic_step_views(
            &self.critic,
            &mut self.state,
            &mut self.store,
            &mut self.opt,
            &self.cfg,
            latents,
            views,
            rng,
        )
    }

    /// Per-sample, per-view dependency scores in evaluation mode.
    pub fn pointwise_scores(
        &self,
        latents: &Array2<f64>,
        views: &Array3<f64>,
    ) -> Result<Array2<f64>> {
        pointwise_scores_with(&self.critic, &self.state, &self.store, latents, views)
    }
}

/// One bias-corrected DV step of a view-conditioned critic living in `store`.
/// Marginals pair each latent with the views of a batch-rotated sample.
/// Returns the mean per-view DV estimate.
#[allow(clippy::too_many_arguments)]
pub fn critic_step_views(
    critic: &MineCritic,
    state: &mut MineState,
    store: &mut ParamStore,
    opt: &mut Adam,
    cfg: &MineConfig,
    latents: &Array2<f64>,
    views: &Array3<f64>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let (b, j, _vd) = views.dim();
    if b < 2 {
        return Err(CoreError::validation("batch size must be at least 2"));
    }
    if j != critic.n_views {
        return Err(CoreError::shape(format!(
            "expected {} views, got {j}",
            critic.n_views
        )));
    }
    let shift = 1 + rng.random_range(0..b - 1);
    let (uj, vj, views_j) = flatten_view_pairs(latents, views, None);
    let (um, vm, views_m) = flatten_view_pairs(latents, views, Some(shift));

    let mut tape = Tape::new();
    let ujv = tape.input2(&uj);
    let vjv = tape.input2(&vj);
    let umv = tape.input2(&um);
    let vmv = tape.input2(&vm);
    let tj = critic.scores(&mut tape, store, ujv, vjv, Some(&views_j));
    let tm = critic.scores(&mut tape, store, umv, vmv, Some(&views_m));

    // per-view EMA update from current marginal means
    let e_tm = exp_clipped(&mut tape, tm);
    let etm_vals = tape.value(e_tm).clone();
    let mut per_view_mean = vec![0.0; j];
    for (r, &val) in etm_vals.iter().enumerate() {
        per_view_mean[views_m[r]] += val / b as f64;
    }
    for (view, &m) in per_view_mean.iter().enumerate() {
        state.ema_denominator[view] = if state.step == 0 {
            m
        } else {
            cfg.ema_decay * state.ema_denominator[view] + (1.0 - cfg.ema_decay) * m
        };
    }
    state.step += 1;

    // surrogate: mean over views of (mean_joint T - mean_marg e^T / ema_view)
    let mean_tj = tape.mean(tj);
    let weights: Array1<f64> = views_m
        .iter()
        .map(|&view| 1.0 / (b as f64 * j as f64 * state.ema_denominator[view]))
        .collect();
    let w = tape.input(weights.into_dyn());
    let weighted = tape.mul(e_tm, w);
    let marg = tape.sum(weighted);
    let gap = tape.sub(mean_tj, marg);
    let loss = tape.neg(gap);
    let grads = tape.backward(loss);
    store.zero_grads();
    grads.accumulate_params(&tape, store);
    opt.step(store, cfg.lr);

    // report the mean per-view DV estimate
    let tj_vals = tape.value(tj);
    let tm_vals = tape.value(tm);
    let mut est = 0.0;
    for view in 0..j {
        let tjv: Vec<f64> = (0..b).map(|i| tj_vals[i * j + view]).collect();
        let tmv: Vec<f64> = (0..b).map(|i| tm_vals[i * j + view]).collect();
        est += dv_from_slices(&tjv, &tmv) / j as f64;
    }
    Ok(est)
}

/// Per-sample, per-view dependency scores `T(u_i, v_ij) - ln ema_j` with the
/// critic in evaluation mode. Averaged over a batch these approximate the
/// per-view DV estimates; per sample they order views for selection.
pub fn pointwise_scores_with(
    critic: &MineCritic,
    state: &MineState,
    store: &ParamStore,
    latents: &Array2<f64>,
    views: &Array3<f64>,
) -> Result<Array2<f64>> {
    let (b, j, _vd) = views.dim();
    if j != critic.n_views {
        return Err(CoreError::shape(format!(
            "expected {} views, got {j}",
            critic.n_views
        )));
    }
    let (u, v, view_idx) = flatten_view_pairs(latents, views, None);
    let mut tape = Tape::new();
    let uv = tape.input2(&u);
    let vv = tape.input2(&v);
    let t = critic.scores(&mut tape, store, uv, vv, Some(&view_idx));
    let tv = tape.value(t);
    let mut out = Array2::<f64>::zeros((b, j));
    for i in 0..b {
        for view in 0..j {
            out[[i, view]] = tv[i * j + view] - log_denominator(state, view);
        }
    }
    Ok(out)
}

/// ln of the per-view EMA denominator; zero before the first critic update.
pub fn log_denominator(state: &MineState, view: usize) -> f64 {
    let denom = state.ema_denominator[view];
    if state.step == 0 || denom <= 0.0 {
        0.0
    } else {
        denom.ln()
    }
}

/// Flatten (b, j, d) views against (b, u) latents into row-aligned pair
/// batches, optionally rotating the latent index per row for marginals.
/// Rows are sample-major: row = i * j + view.
fn flatten_view_pairs(
    latents: &Array2<f64>,
    views: &Array3<f64>,
    rotate: Option<usize>,
) -> (Array2<f64>, Array2<f64>, Vec<usize>) {
    let (b, j, vd) = views.dim();
    let ud = latents.ncols();
    let mut u = Array2::<f64>::zeros((b * j, ud));
    let mut v = Array2::<f64>::zeros((b * j, vd));
    let mut idx = Vec::with_capacity(b * j);
    for i in 0..b {
        let src_i = match rotate {
            Some(s) => (i + s) % b,
            None => i,
        };
        for view in 0..j {
            let r = i * j + view;
            u.row_mut(r).assign(&latents.row(src_i));
            v.row_mut(r).assign(&views.index_axis(Axis(0), i).row(view));
            idx.push(view);
        }
    }
    (u, v, idx)
}

fn select_rows(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((idx.len(), a.ncols()));
    for (r, &i) in idx.iter().enumerate() {
        out.row_mut(r).assign(&a.row(i));
    }
    out
}

/// DV bound from score arrays: mean(T_joint) - ln mean(e^{T_marginal}),
/// computed with a stable log-sum-exp.
fn dv_value(tj: &ndarray::ArrayD<f64>, tm: &ndarray::ArrayD<f64>) -> f64 {
    let mean_tj = tj.sum() / tj.len() as f64;
    let m = tm.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + tm.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    mean_tj - (lse - (tm.len() as f64).ln())
}

fn dv_from_slices(tj: &[f64], tm: &[f64]) -> f64 {
    let mean_tj = tj.iter().sum::<f64>() / tj.len() as f64;
    let m = tm.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let lse = m + tm.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    mean_tj - (lse - (tm.len() as f64).ln())
}
