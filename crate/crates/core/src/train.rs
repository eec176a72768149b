//! Training harness: configuration, schedule, augmentation, the combined
//! loss, and the epoch loop with dynamic per-epoch view selection.

use ndarray::{Array2, Array3, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::contrastive::{multiview_loss_graph, ContrastiveMode, ProjectionHead};
use crate::data::{split_subjects, CtVolume, SliceSample, SubjectSplit};
use crate::error::{CoreError, Result};
use crate::info::{
    critic_step_views, log_denominator, pointwise_scores_with, MineConfig, MineCritic, MineState,
};
use crate::metrics::{evaluate_slices, MetricReport};
use crate::nn::{Adam, Linear, ParamGroup, ParamStore, Tape, Var};
use crate::selection::{aggregate_ranking, rank_views_scored, selection_count, MiRanking};
use crate::unet::{DctBranch, UNet};
use crate::views::{dct_cube_of_image, freq_normalize, subject_normalize, ChannelOrder};

const DICE_EPS: f64 = 1e-6;

/// Self- or semi-supervised contrastive operation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    SelfSupervised,
    SemiSupervised,
}

impl TrainMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "self" | "self-supervised" => Ok(TrainMode::SelfSupervised),
            "semi" | "semi-supervised" => Ok(TrainMode::SemiSupervised),
            other => Err(CoreError::config(format!("unknown mode '{other}'"))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TrainMode::SelfSupervised => "self",
            TrainMode::SemiSupervised => "semi",
        }
    }
}

/// Which auxiliary terms are optimized; rows of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain segmentation objective.
    Baseline,
    /// MI maximization only (selection active).
    MiOnly,
    /// Contrastive only (selection active, MI loss not optimized).
    ContrastiveOnly,
    /// Both auxiliary terms.
    Full,
}

impl Variant {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(Variant::Baseline),
            "mi" | "+mi" => Ok(Variant::MiOnly),
            "cl" | "+cl" => Ok(Variant::ContrastiveOnly),
            "mimic" | "+mimic" | "full" => Ok(Variant::Full),
            other => Err(CoreError::config(format!("unknown variant '{other}'"))),
        }
    }

    /// Ablation-table row label.
    pub fn label(&self) -> &'static str {
        match self {
            Variant::Baseline => "U-Net",
            Variant::MiOnly => "U-Net+MI",
            Variant::ContrastiveOnly => "U-Net+CL",
            Variant::Full => "U-Net+MIMIC",
        }
    }

    pub fn all() -> [Variant; 4] {
        [
            Variant::Baseline,
            Variant::MiOnly,
            Variant::ContrastiveOnly,
            Variant::Full,
        ]
    }

    pub fn uses_selection(&self) -> bool {
        !matches!(self, Variant::Baseline)
    }

    pub fn optimizes_mi(&self) -> bool {
        matches!(self, Variant::MiOnly | Variant::Full)
    }

    pub fn optimizes_contrastive(&self) -> bool {
        matches!(self, Variant::ContrastiveOnly | Variant::Full)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Fraction of views selected by descending MI.
    pub sigma: f64,
    pub patch_size: usize,
    /// Contrastive temperature.
    pub tau: f64,
    /// Peak learning rate.
    pub lr0: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub warmup_epochs: usize,
    pub early_stop_patience: usize,
    pub mode: TrainMode,
    pub seed: u64,
    pub variant: Variant,
    // artifact knobs
    pub image_size: usize,
    pub base_channels: usize,
    pub channel_order: ChannelOrder,
    pub mi_embed_dim: usize,
    pub critic_lr: f64,
    pub augment: bool,
    /// Zero out unselected cube channels before the frequency branch.
    pub mask_unselected_views: bool,
    /// Max training slices used in the per-epoch ranking pass.
    pub rank_sample: usize,
    // unit loss weights with a tunable escape hatch
    pub bce_weight: f64,
    pub dice_weight: f64,
    pub contrastive_weight: f64,
    pub mi_weight: f64,
    // subject-level split fractions
    pub train_frac: f64,
    pub val_frac: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            sigma: 0.2,
            patch_size: 8,
            tau: 0.1,
            lr0: 5e-4,
            weight_decay: 5e-5,
            batch_size: 20,
            max_epochs: 300,
            warmup_epochs: 5,
            early_stop_patience: 50,
            mode: TrainMode::SelfSupervised,
            seed: 0,
            variant: Variant::Full,
            image_size: 256,
            base_channels: 64,
            channel_order: ChannelOrder::Zigzag,
            mi_embed_dim: 64,
            critic_lr: 1e-3,
            augment: true,
            mask_unselected_views: false,
            rank_sample: 64,
            bce_weight: 1.0,
            dice_weight: 1.0,
            contrastive_weight: 1.0,
            mi_weight: 1.0,
            train_frac: 0.7,
            val_frac: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            return Err(CoreError::config("sigma must be in (0, 1]"));
        }
        if self.tau <= 0.0 || self.critic_lr <= 0.0 {
            return Err(CoreError::config("tau and critic_lr must be positive"));
        }
        if self.lr0 < 0.0 || self.weight_decay < 0.0 {
            return Err(CoreError::config("rates must be nonnegative"));
        }
        if self.batch_size < 2 {
            return Err(CoreError::config("batch_size must be at least 2"));
        }
        if self.max_epochs == 0 || self.warmup_epochs == 0 {
            return Err(CoreError::config("epoch counts must be positive"));
        }
        if self.image_size == 0
            || self.image_size % 8 != 0
            || self.image_size % self.patch_size != 0
        {
            return Err(CoreError::config(
                "image_size must be divisible by 8 and by patch_size",
            ));
        }
        if !self.patch_size.is_power_of_two() {
            return Err(CoreError::config("patch_size must be a power of two"));
        }
        if self.rank_sample < 2 {
            return Err(CoreError::config("rank_sample must be at least 2"));
        }
        if self.train_frac <= 0.0 || self.train_frac + self.val_frac >= 1.0 {
            return Err(CoreError::config("split fractions must leave a test part"));
        }
        Ok(())
    }

    /// Apply a flat `key = value` override (config files and CLI flags).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |v: &str, k: &str| CoreError::config(format!("bad value '{v}' for key '{k}'"));
        match key {
            "sigma" => self.sigma = value.parse().map_err(|_| bad(value, key))?,
            "patch_size" => self.patch_size = value.parse().map_err(|_| bad(value, key))?,
            "tau" => self.tau = value.parse().map_err(|_| bad(value, key))?,
            "lr0" => self.lr0 = value.parse().map_err(|_| bad(value, key))?,
            "weight_decay" => self.weight_decay = value.parse().map_err(|_| bad(value, key))?,
            "batch_size" => self.batch_size = value.parse().map_err(|_| bad(value, key))?,
            "max_epochs" => self.max_epochs = value.parse().map_err(|_| bad(value, key))?,
            "warmup_epochs" => self.warmup_epochs = value.parse().map_err(|_| bad(value, key))?,
            "early_stop_patience" => {
                self.early_stop_patience = value.parse().map_err(|_| bad(value, key))?
            }
            "mode" => self.mode = TrainMode::parse(value)?,
            "seed" => self.seed = value.parse().map_err(|_| bad(value, key))?,
            "variant" => self.variant = Variant::parse(value)?,
            "image_size" => self.image_size = value.parse().map_err(|_| bad(value, key))?,
            "base_channels" => self.base_channels = value.parse().map_err(|_| bad(value, key))?,
            "channel_order" => self.channel_order = ChannelOrder::parse(value)?,
            "mi_embed_dim" => self.mi_embed_dim = value.parse().map_err(|_| bad(value, key))?,
            "critic_lr" => self.critic_lr = value.parse().map_err(|_| bad(value, key))?,
            "augment" => self.augment = value.parse().map_err(|_| bad(value, key))?,
            "mask_unselected_views" => {
                self.mask_unselected_views = value.parse().map_err(|_| bad(value, key))?
            }
            "rank_sample" => self.rank_sample = value.parse().map_err(|_| bad(value, key))?,
            "bce_weight" => self.bce_weight = value.parse().map_err(|_| bad(value, key))?,
            "dice_weight" => self.dice_weight = value.parse().map_err(|_| bad(value, key))?,
            "contrastive_weight" => {
                self.contrastive_weight = value.parse().map_err(|_| bad(value, key))?
            }
            "mi_weight" => self.mi_weight = value.parse().map_err(|_| bad(value, key))?,
            "train_frac" => self.train_frac = value.parse().map_err(|_| bad(value, key))?,
            "val_frac" => self.val_frac = value.parse().map_err(|_| bad(value, key))?,
            other => return Err(CoreError::config(format!("unknown config key '{other}'"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines ('#' comments and blanks ignored).
    pub fn apply_kv_lines(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                CoreError::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            self.apply_kv(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.patch_size * self.patch_size
    }
}

/// Learning rate at `epoch`: linear warmup to `lr0` over the first
/// `warmup_epochs`, then polynomial decay `lr0 * (1 - epoch/max)^0.9`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.max_epochs {
        return Err(CoreError::config(format!(
            "epoch {epoch} out of range (max_epochs {})",
            cfg.max_epochs
        )));
    }
    if epoch < cfg.warmup_epochs {
        // ramp reaches lr0 on the last warmup epoch: (epoch + 1) / warmup
        Ok(cfg.lr0 * (epoch + 1) as f64 / cfg.warmup_epochs as f64)
    } else {
        Ok(cfg.lr0 * (1.0 - epoch as f64 / cfg.max_epochs as f64).powf(0.9))
    }
}

/// Stops when the observed loss has not improved for `patience` consecutive
/// epochs.
#[derive(Debug, Clone)]
pub struct EarlyStopper {
    pub patience: usize,
    best: f64,
    stale: usize,
}

impl EarlyStopper {
    pub fn new(patience: usize) -> Self {
        EarlyStopper {
            patience,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    /// Observe one epoch's loss; true means stop after this epoch.
    ///
    /// A decrease below float-summation jitter does not count as an
    /// improvement (batch order permutes reduction order between epochs).
    pub fn observe(&mut self, loss: f64) -> bool {
        let margin = self.best.abs() * 1e-12 + 1e-15;
        if !self.best.is_finite() || loss < self.best - margin {
            self.best = loss;
            self.stale = 0;
        } else {
            self.stale += 1;
            self.best = self.best.min(loss);
        }
        self.stale >= self.patience
    }
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

/// Bilinear sample with zero padding outside the image.
fn sample_bilinear(img: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = img.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let mut acc = 0.0;
    for (dy, wy) in [(0isize, 1.0 - fy), (1, fy)] {
        for (dx, wx) in [(0isize, 1.0 - fx), (1, fx)] {
            let yy = y0 as isize + dy;
            let xx = x0 as isize + dx;
            if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
                acc += wy * wx * img[[yy as usize, xx as usize]];
            }
        }
    }
    acc
}

fn sample_nearest(mask: &Array2<u8>, y: f64, x: f64) -> u8 {
    let (h, w) = mask.dim();
    let yy = y.round() as isize;
    let xx = x.round() as isize;
    if yy >= 0 && (yy as usize) < h && xx >= 0 && (xx as usize) < w {
        mask[[yy as usize, xx as usize]]
    } else {
        0
    }
}

/// Geometric resample to `out_size` with rotation and scale about the image
/// center (half-pixel convention: the identity draw at equal sizes is exact).
fn warp(
    image: &Array2<f64>,
    mask: Option<&Array2<u8>>,
    out_size: usize,
    scale: f64,
    theta: f64,
) -> (Array2<f64>, Option<Array2<u8>>) {
    let (h, w) = image.dim();
    let cy_in = (h as f64 - 1.0) / 2.0;
    let cx_in = (w as f64 - 1.0) / 2.0;
    let c_out = (out_size as f64 - 1.0) / 2.0;
    let ry = h as f64 / out_size as f64;
    let rx = w as f64 / out_size as f64;
    let (s, c) = theta.sin_cos();
    let mut out = Array2::<f64>::zeros((out_size, out_size));
    let mut mout = mask.map(|_| Array2::<u8>::zeros((out_size, out_size)));
    for oy in 0..out_size {
        for ox in 0..out_size {
            // rotate/scale about the output center, then map into source pixels
            let dy = oy as f64 - c_out;
            let dx = ox as f64 - c_out;
            let uy = (c * dy - s * dx) / scale;
            let ux = (s * dy + c * dx) / scale;
            let sy = uy * ry + cy_in;
            let sx = ux * rx + cx_in;
            out[[oy, ox]] = sample_bilinear(image, sy, sx);
            if let (Some(m), Some(mo)) = (mask, mout.as_mut()) {
                mo[[oy, ox]] = sample_nearest(m, sy, sx);
            }
        }
    }
    (out, mout)
}

/// Random draw of the augmentation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub scale: f64,
    pub rotation_rad: f64,
    pub intensity_shift: f64,
    pub intensity_scale: f64,
}

impl AugmentDraw {
    pub fn identity() -> Self {
        AugmentDraw {
            scale: 1.0,
            rotation_rad: 0.0,
            intensity_shift: 0.0,
            intensity_scale: 1.0,
        }
    }

    /// Scale in [0.8, 1.2], rotation within +-15 degrees, intensity shift
    /// +-0.1 and scale [0.9, 1.1].
    pub fn sample(rng: &mut ChaCha8Rng) -> Self {
        AugmentDraw {
            scale: rng.random_range(0.8..=1.2),
            rotation_rad: rng.random_range(-(15.0f64.to_radians())..=15.0f64.to_radians()),
            intensity_shift: rng.random_range(-0.1..=0.1),
            intensity_scale: rng.random_range(0.9..=1.1),
        }
    }
}

/// Apply a draw: rotate/scale (mask nearest-neighbor), resize to `out_size`
/// bilinear, then intensity scale and shift, clamped to [0, 1].
pub fn augment_with(sample: &SliceSample, draw: &AugmentDraw, out_size: usize) -> SliceSample {
    let (img, mask) = warp(
        &sample.image,
        sample.mask.as_ref(),
        out_size,
        draw.scale,
        draw.rotation_rad,
    );
    let img = img.mapv(|v| (v * draw.intensity_scale + draw.intensity_shift).clamp(0.0, 1.0));
    SliceSample {
        image: img,
        mask,
        subject_id: sample.subject_id.clone(),
        slice_index: sample.slice_index,
    }
}

/// Random augmentation (training mode).
pub fn augment(sample: &SliceSample, rng: &mut ChaCha8Rng, out_size: usize) -> SliceSample {
    augment_with(sample, &AugmentDraw::sample(rng), out_size)
}

/// Deterministic resize without augmentation (evaluation path).
pub fn resize_sample(sample: &SliceSample, out_size: usize) -> SliceSample {
    augment_with(sample, &AugmentDraw::identity(), out_size)
}

// ---------------------------------------------------------------------------
// Loss
// ---------------------------------------------------------------------------

/// Per-component loss values; `total` is their sum (components carry their
/// configured weights already).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub bce: f64,
    pub dice: f64,
    pub contrastive: f64,
    pub mi: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn new(bce: f64, dice: f64, contrastive: f64, mi: f64) -> Self {
        LossBreakdown {
            bce,
            dice,
            contrastive,
            mi,
            total: bce + dice + contrastive + mi,
        }
    }

    pub fn zero() -> Self {
        LossBreakdown::new(0.0, 0.0, 0.0, 0.0)
    }

    fn add_assign(&mut self, other: &LossBreakdown) {
        self.bce += other.bce;
        self.dice += other.dice;
        self.contrastive += other.contrastive;
        self.mi += other.mi;
        self.total += other.total;
    }

    fn scale(&mut self, f: f64) {
        self.bce *= f;
        self.dice *= f;
        self.contrastive *= f;
        self.mi *= f;
        self.total *= f;
    }
}

/// Graph builder for BCE + soft Dice (`1 - (2*inter + eps)/(sum_p + sum_t + eps)`)
/// on logits against a constant mask.
fn seg_losses(tape: &mut Tape, logits: Var, target: &Array4<f64>) -> (Var, Var) {
    let bce = tape.bce_with_logits(logits, &target.clone().into_dyn());
    let probs = tape.sigmoid(logits);
    let t = tape.input(target.clone().into_dyn());
    let pt = tape.mul(probs, t);
    let inter = tape.sum(pt);
    let psum = tape.sum(probs);
    let tsum = target.sum();
    let num = tape.mul_scalar(inter, 2.0);
    let num = tape.add_scalar(num, DICE_EPS);
    let den = tape.add_scalar(psum, tsum + DICE_EPS);
    let den_inv = tape.recip(den);
    let ratio = tape.mul(num, den_inv);
    let neg = tape.neg(ratio);
    let dice = tape.add_scalar(neg, 1.0);
    (bce, dice)
}

/// Combined loss on concrete arrays (reporting and tests; the trainer builds
/// the same terms in-graph). `view_embs` holds the selected views' embeddings
/// (B, M, d); `rankings` supply the MI term.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    logits: &Array4<f64>,
    target: &Array4<f64>,
    latent_emb: &Array2<f64>,
    view_embs: &Array3<f64>,
    mask_emb: Option<&Array2<f64>>,
    rankings: &[MiRanking],
    mode: TrainMode,
    tau: f64,
) -> Result<LossBreakdown> {
    if logits.dim() != target.dim() {
        return Err(CoreError::shape(format!(
            "logits {:?} vs target {:?}",
            logits.dim(),
            target.dim()
        )));
    }
    let mut tape = Tape::new();
    let lv = tape.input4(logits);
    let (bce_v, dice_v) = seg_losses(&mut tape, lv, target);
    let bce = tape.scalar(bce_v);
    let dice = tape.scalar(dice_v);
    let contrastive = crate::contrastive::multiview_loss(
        latent_emb,
        view_embs,
        mask_emb,
        match mode {
            TrainMode::SelfSupervised => ContrastiveMode::SelfSupervised,
            TrainMode::SemiSupervised => ContrastiveMode::SemiSupervised,
        },
        tau,
    )?;
    let mi = crate::selection::mi_loss(rankings)?;
    Ok(LossBreakdown::new(bce, dice, contrastive, mi))
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

/// All trainable pieces: backbone, frequency branch, projection heads, the
/// MI embedding maps, and the critic. Components are always constructed in a
/// fixed order, so a seed yields an identical backbone init across variants;
/// the variant only changes which losses are optimized.
pub struct MimicModel {
    pub store: ParamStore,
    pub unet: UNet,
    pub branch: DctBranch,
    pub head_latent: ProjectionHead,
    pub head_view: ProjectionHead,
    pub head_mask: ProjectionHead,
    pub mi_latent: Linear,
    pub mi_view: Linear,
    pub critic: MineCritic,
    pub mine_state: MineState,
    pub mine_cfg: MineConfig,
    pub cfg: TrainConfig,
}

impl MimicModel {
    pub fn new(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = crate::rng::derive(cfg.seed, 1);
        let unet = UNet::new(&mut store, 1, cfg.base_channels, &mut rng);
        let branch = DctBranch::new(&mut store, cfg.patch_size, unet.latent_channels(), &mut rng)?;

        let ls = cfg.image_size / 8; // latent spatial side
        let latent_flat = unet.latent_channels() * ls * ls;
        let view_flat = branch.per_view_channels * ls * ls;
        let head_latent = ProjectionHead::new(
            &mut store,
            "head.latent",
            latent_flat,
            ParamGroup::Model,
            &mut rng,
        );
        let head_view = ProjectionHead::new(
            &mut store,
            "head.view",
            view_flat,
            ParamGroup::Model,
            &mut rng,
        );
        let head_mask = ProjectionHead::new(
            &mut store,
            "head.mask",
            ls * ls,
            ParamGroup::Model,
            &mut rng,
        );

        // MI embeddings: pooled latent -> embed, pooled view scalar -> embed
        let mi_latent = Linear::new(
            &mut store,
            "mi.latent",
            unet.latent_channels(),
            cfg.mi_embed_dim,
            ParamGroup::Model,
            &mut rng,
        );
        let mi_view = Linear::new(
            &mut store,
            "mi.view",
            1,
            cfg.mi_embed_dim,
            ParamGroup::Model,
            &mut rng,
        );

        let mine_cfg = MineConfig {
            lr: cfg.critic_lr,
            seed: cfg.seed,
            ..MineConfig::default()
        };
        let mut critic_rng = crate::rng::derive(cfg.seed, 2);
        let critic = MineCritic::with_views(
            &mut store,
            "mi",
            cfg.mi_embed_dim,
            cfg.mi_embed_dim,
            cfg.n_views(),
            &mine_cfg,
            &mut critic_rng,
        );

        Ok(MimicModel {
            store,
            unet,
            branch,
            head_latent,
            head_view,
            head_mask,
            mi_latent,
            mi_view,
            critic,
            mine_state: MineState::new(cfg.n_views()),
            mine_cfg,
            cfg: cfg.clone(),
        })
    }

    /// Restore weights from serialized bytes (layout must match).
    pub fn load_weights(&mut self, bytes: &[u8]) -> Result<()> {
        let other = ParamStore::from_bytes(bytes)?;
        self.store.load_values_from(&other)
    }

    /// Eval-mode mask probabilities for an image batch.
    pub fn predict_probs(&self, images: &Array4<f64>) -> Result<Array4<f64>> {
        let mut tape = Tape::new();
        let x = tape.input4(images);
        let logits = self.unet.forward(&mut tape, &self.store, x)?;
        let probs = tape.sigmoid(logits);
        Ok(tape
            .value(probs)
            .clone()
            .into_dimensionality::<ndarray::Ix4>()
            .map_err(|e| CoreError::shape(e.to_string()))?)
    }

    /// Eval-mode MI embeddings for ranking: latent embeddings (B, e) and
    /// per-view embeddings (B, J, e) from the pooled cube channels.
    pub fn mi_embedding_values(
        &self,
        images: &Array4<f64>,
        cubes: &Array4<f64>,
    ) -> Result<(Array2<f64>, Array3<f64>)> {
        let (b, j, _, _) = cubes.dim();
        let mut tape = Tape::new();
        let x = tape.input4(images);
        let (latent, _) = self.unet.encode(&mut tape, &self.store, x)?;
        let pooled = tape.global_avg_pool(latent);
        let m_g = self.mi_latent.fwd(&mut tape, &self.store, pooled);
        let pooled_views = pool_cube_channels(cubes); // (b, j)
        let pv = tape.input2(&pooled_views.to_shape((b * j, 1)).unwrap().to_owned());
        let m_v = self.mi_view.fwd(&mut tape, &self.store, pv);

        let mg = tape
            .value(m_g)
            .as_standard_layout()
            .to_owned()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let mv = tape
            .value(m_v)
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order((b, j, self.cfg.mi_embed_dim))
            .unwrap()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap();
        Ok((mg, mv))
    }
}

/// Spatial mean of each cube channel: (B, J, h, w) -> (B, J).
pub fn pool_cube_channels(cubes: &Array4<f64>) -> Array2<f64> {
    let (b, j, h, w) = cubes.dim();
    let mut out = Array2::<f64>::zeros((b, j));
    for bi in 0..b {
        for ji in 0..j {
            out[[bi, ji]] = cubes
                .index_axis(Axis(0), bi)
                .index_axis(Axis(0), ji)
                .sum()
                / (h * w) as f64;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Dataset preparation
// ---------------------------------------------------------------------------

/// One training-ready slice: normalized image at the working resolution, its
/// mask, and the frequency-normalized DCT cube.
#[derive(Debug, Clone)]
pub struct PreparedSlice {
    pub subject_id: String,
    pub slice_index: usize,
    pub image: Array2<f64>,
    pub mask: Array2<u8>,
    pub cube: Array3<f64>,
}

#[derive(Debug, Clone)]
pub struct PreparedDataset {
    pub train: Vec<PreparedSlice>,
    pub val: Vec<PreparedSlice>,
    pub test: Vec<PreparedSlice>,
    pub split: SubjectSplit,
}

fn prepare_slice(s: &SliceSample, cfg: &TrainConfig) -> Result<PreparedSlice> {
    let resized = resize_sample(s, cfg.image_size);
    let cube = freq_normalize(&dct_cube_of_image(
        &resized.image,
        cfg.patch_size,
        cfg.channel_order,
    )?);
    Ok(PreparedSlice {
        subject_id: resized.subject_id.clone(),
        slice_index: resized.slice_index,
        image: resized.image,
        mask: resized
            .mask
            .ok_or_else(|| CoreError::config("training data requires masks"))?,
        cube: cube.coefficients,
    })
}

/// Subject-normalize a whole volume (keeping every slice) and prepare its
/// slices for caching or evaluation.
pub fn prepare_volume(vol: &CtVolume, cfg: &TrainConfig) -> Result<Vec<PreparedSlice>> {
    let normalized = subject_normalize(vol, false)?;
    normalized
        .slices()?
        .iter()
        .map(|s| prepare_slice(s, cfg))
        .collect()
}

impl PreparedDataset {
    /// Assemble a dataset from cached slices: subject-level split, with
    /// lesion-free slices dropped from the training part when `drop_empty`
    /// is set (evaluation splits always keep every slice).
    pub fn from_slices(
        slices: Vec<PreparedSlice>,
        cfg: &TrainConfig,
        drop_empty: bool,
    ) -> Result<Self> {
        cfg.validate()?;
        if slices.is_empty() {
            return Err(CoreError::degenerate("no cached slices"));
        }
        let ids: Vec<String> = slices.iter().map(|s| s.subject_id.clone()).collect();
        let split = split_subjects(&ids, cfg.train_frac, cfg.val_frac, cfg.seed)?;
        let mut out = PreparedDataset {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
            split: split.clone(),
        };
        for s in slices {
            if split.train.contains(&s.subject_id) {
                if !drop_empty || s.mask.iter().any(|&v| v != 0) {
                    out.train.push(s);
                }
            } else if split.val.contains(&s.subject_id) {
                out.val.push(s);
            } else {
                out.test.push(s);
            }
        }
        if out.train.len() < 2 {
            return Err(CoreError::degenerate(format!(
                "only {} training slices available",
                out.train.len()
            )));
        }
        Ok(out)
    }
}

/// Subject-normalize, split by subject, resize, and cube every slice.
/// Lesion-free slices are dropped from the training split only.
pub fn prepare_dataset(cfg: &TrainConfig, volumes: &[CtVolume]) -> Result<PreparedDataset> {
    cfg.validate()?;
    if volumes.is_empty() {
        return Err(CoreError::degenerate("no volumes provided"));
    }
    let ids: Vec<String> = volumes.iter().map(|v| v.subject_id.clone()).collect();
    let split = split_subjects(&ids, cfg.train_frac, cfg.val_frac, cfg.seed)?;
    let mut out = PreparedDataset {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        split: split.clone(),
    };
    for vol in volumes {
        let is_train = split.train.contains(&vol.subject_id);
        let normalized = subject_normalize(vol, is_train)?;
        for s in normalized.slices()? {
            let prepared = prepare_slice(&s, cfg)?;
            if is_train {
                out.train.push(prepared);
            } else if split.val.contains(&vol.subject_id) {
                out.val.push(prepared);
            } else {
                out.test.push(prepared);
            }
        }
    }
    if out.train.len() < cfg.batch_size.min(2) {
        return Err(CoreError::degenerate(format!(
            "only {} training slices available",
            out.train.len()
        )));
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ValMetrics {
    pub dsc: f64,
    pub miou: f64,
    pub hd95: f64,
    pub asd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub val: ValMetrics,
    /// Views selected for this epoch (empty when selection is off).
    pub selected_views: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_dsc: f64,
    pub stopped_early: bool,
    /// Serialized weights at the best validation DSC.
    pub best_weights: Vec<u8>,
    /// Test metrics with the best weights loaded.
    pub test: MetricReport,
    pub split: SubjectSplit,
}

struct BatchArrays {
    images: Array4<f64>,
    masks: Array4<f64>,
    cubes: Array4<f64>,
}

fn assemble_batch(
    slices: &[&PreparedSlice],
    cfg: &TrainConfig,
    augment_rng: Option<&mut ChaCha8Rng>,
) -> Result<BatchArrays> {
    let s = cfg.image_size;
    let j = cfg.n_views();
    let b = slices.len();
    let cs = s / cfg.patch_size;
    let mut images = Array4::<f64>::zeros((b, 1, s, s));
    let mut masks = Array4::<f64>::zeros((b, 1, s, s));
    let mut cubes = Array4::<f64>::zeros((b, j, cs, cs));
    let mut rng = augment_rng;
    for (i, sl) in slices.iter().enumerate() {
        let (img, mask, cube) = if let Some(r) = rng.as_deref_mut() {
            let sample = SliceSample {
                image: sl.image.clone(),
                mask: Some(sl.mask.clone()),
                subject_id: sl.subject_id.clone(),
                slice_index: sl.slice_index,
            };
            let aug = augment(&sample, r, s);
            // the cube must describe the image actually seen by the network
            let cube = freq_normalize(&dct_cube_of_image(
                &aug.image,
                cfg.patch_size,
                cfg.channel_order,
            )?);
            (aug.image, aug.mask.unwrap(), cube.coefficients)
        } else {
            (sl.image.clone(), sl.mask.clone(), sl.cube.clone())
        };
        images
            .index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&img);
        masks
            .index_axis_mut(Axis(0), i)
            .index_axis_mut(Axis(0), 0)
            .assign(&mask.mapv(|v| v as f64));
        cubes.index_axis_mut(Axis(0), i).assign(&cube);
    }
    Ok(BatchArrays {
        images,
        masks,
        cubes,
    })
}

/// Average-pool a binary mask by `factor` into lesion-fraction features.
fn pool_mask(mask: &Array4<f64>, factor: usize) -> Array2<f64> {
    let (b, _, h, w) = mask.dim();
    let (ho, wo) = (h / factor, w / factor);
    let mut out = Array2::<f64>::zeros((b, ho * wo));
    for bi in 0..b {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for dy in 0..factor {
                    for dx in 0..factor {
                        acc += mask[[bi, 0, oy * factor + dy, ox * factor + dx]];
                    }
                }
                out[[bi, oy * wo + ox]] = acc / (factor * factor) as f64;
            }
        }
    }
    out
}

/// One optimization step; returns the (weighted) loss components.
#[allow(clippy::too_many_arguments)]
fn train_step(
    model: &mut MimicModel,
    opt_model: &mut Adam,
    opt_critic: &mut Adam,
    batch: &BatchArrays,
    selected: &[usize],
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let cfg = model.cfg.clone();
    let variant = cfg.variant;
    let b = batch.images.dim().0;

    // critic maintenance on detached embeddings, before the joint step
    if variant.uses_selection() {
        let (mg, mv) = model.mi_embedding_values(&batch.images, &batch.cubes)?;
        let mut opt = std::mem::replace(opt_critic, Adam::for_group(&model.store, ParamGroup::Critic, 0.0));
        let res = critic_step_views(
            &model.critic,
            &mut model.mine_state,
            &mut model.store,
            &mut opt,
            &model.mine_cfg,
            &mg,
            &mv,
            rng,
        );
        *opt_critic = opt;
        res?;
    }

    let mut tape = Tape::new();
    let x = tape.input4(&batch.images);
    let (latent, skips) = model.unet.encode(&mut tape, &model.store, x)?;
    let logits = model.unet.decode(&mut tape, &model.store, latent, &skips)?;
    let (bce_v, dice_v) = seg_losses(&mut tape, logits, &batch.masks);
    let bce_w = tape.mul_scalar(bce_v, cfg.bce_weight);
    let dice_w = tape.mul_scalar(dice_v, cfg.dice_weight);
    let mut total = tape.add(bce_w, dice_w);
    let mut contrastive_val = 0.0;
    let mut mi_val = 0.0;

    if variant.uses_selection() && !selected.is_empty() {
        let m = selected.len();
        let n_views = cfg.n_views();
        // gather rows (sample-major) of the selected views
        let gather_idx: Vec<usize> = (0..b)
            .flat_map(|i| selected.iter().map(move |&v| i * n_views + v))
            .collect();

        if variant.optimizes_contrastive() {
            let cube_for_branch = if cfg.mask_unselected_views {
                let mut c = batch.cubes.clone();
                for v in 0..cfg.n_views() {
                    if !selected.contains(&v) {
                        c.slice_mut(ndarray::s![.., v, .., ..]).fill(0.0);
                    }
                }
                c
            } else {
                batch.cubes.clone()
            };
            let cube_in = tape.input4(&cube_for_branch);
            let (per_view, _rep) = model.branch.encode_views(&mut tape, &model.store, cube_in)?;
            let pv_shape = tape.value(per_view).shape().to_vec();
            let flat_dim: usize = pv_shape[1..].iter().product();
            let pv_flat = tape.reshape(per_view, &[pv_shape[0], flat_dim]);
            let pv_sel = tape.embed_lookup(pv_flat, &gather_idx); // (b*m, flat)
            let e_v = model.head_view.fwd(&mut tape, &model.store, pv_sel);

            let latent_shape = tape.value(latent).shape().to_vec();
            let lat_flat_dim: usize = latent_shape[1..].iter().product();
            let lat_flat = tape.reshape(latent, &[b, lat_flat_dim]);
            let e_g = model.head_latent.fwd(&mut tape, &model.store, lat_flat);

            let mask_emb = if cfg.mode == TrainMode::SemiSupervised {
                let pooled = pool_mask(&batch.masks, 8);
                let pm = tape.input2(&pooled);
                Some(model.head_mask.fwd(&mut tape, &model.store, pm))
            } else {
                None
            };
            let cmode = match cfg.mode {
                TrainMode::SelfSupervised => ContrastiveMode::SelfSupervised,
                TrainMode::SemiSupervised => ContrastiveMode::SemiSupervised,
            };
            let l_con = multiview_loss_graph(&mut tape, e_g, e_v, m, mask_emb, cmode, cfg.tau)?;
            let l_con_w = tape.mul_scalar(l_con, cfg.contrastive_weight);
            contrastive_val = tape.scalar(l_con_w);
            total = tape.add(total, l_con_w);
        }

        if variant.optimizes_mi() {
            let pooled_lat = tape.global_avg_pool(latent);
            let m_g = model.mi_latent.fwd(&mut tape, &model.store, pooled_lat); // (b, e)
            let pooled_views = pool_cube_channels(&batch.cubes); // (b, j) constants
            let sel_pooled: Vec<f64> = (0..b)
                .flat_map(|i| {
                    selected
                        .iter()
                        .map(|&v| pooled_views[[i, v]])
                        .collect::<Vec<_>>()
                })
                .collect();
            let pv_in = tape.input2(
                &Array2::from_shape_vec((b * m, 1), sel_pooled)
                    .map_err(|e| CoreError::shape(e.to_string()))?,
            );
            let m_v = model.mi_view.fwd(&mut tape, &model.store, pv_in); // (b*m, e)
            let expand_idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(m)).collect();
            let m_g_rows = tape.embed_lookup(m_g, &expand_idx); // (b*m, e)
            let view_idx: Vec<usize> = (0..b).flat_map(|_| selected.iter().copied()).collect();

            // Donsker-Varadhan form over the selected views: the joint term
            // raises scores of aligned pairs, the moving-average-weighted
            // marginal term keeps critic and embeddings from blowing the
            // bound up. At the EMA equilibrium the marginal bracket is ~0,
            // so the reported value matches the negated mean selected score.
            let t_joint = model
                .critic
                .scores(&mut tape, &model.store, m_g_rows, m_v, Some(&view_idx));
            let log_denoms: Vec<f64> = view_idx
                .iter()
                .map(|&v| log_denominator(&model.mine_state, v))
                .collect();
            let ld = tape.input(ndarray::Array1::from_vec(log_denoms).into_dyn());
            let scores = tape.sub(t_joint, ld);
            let mean_score = tape.mean(scores);

            let shift = 1 + rng.random_range(0..b - 1);
            let marg_idx: Vec<usize> = (0..b)
                .flat_map(|i| std::iter::repeat((i + shift) % b).take(m))
                .collect();
            let m_g_marg = tape.embed_lookup(m_g, &marg_idx);
            let t_marg = model
                .critic
                .scores(&mut tape, &model.store, m_g_marg, m_v, Some(&view_idx));
            let e_tm = {
                let c = tape.clip(t_marg, -30.0, 30.0);
                tape.exp(c)
            };
            let weights: Vec<f64> = view_idx
                .iter()
                .map(|&v| {
                    let ema = model.mine_state.ema_denominator[v];
                    let ema = if ema > 0.0 { ema } else { 1.0 };
                    1.0 / ((b * m) as f64 * ema)
                })
                .collect();
            let w = tape.input(ndarray::Array1::from_vec(weights).into_dyn());
            let weighted = tape.mul(e_tm, w);
            let marg_sum = tape.sum(weighted);
            let marg_centered = tape.add_scalar(marg_sum, -1.0);

            let gap = tape.sub(mean_score, marg_centered);
            let l_mi = tape.neg(gap);
            let l_mi_w = tape.mul_scalar(l_mi, cfg.mi_weight);
            mi_val = tape.scalar(l_mi_w);
            total = tape.add(total, l_mi_w);
        }
    }

    let breakdown = LossBreakdown::new(
        tape.scalar(bce_w),
        tape.scalar(dice_w),
        contrastive_val,
        mi_val,
    );
    if !breakdown.total.is_finite() {
        return Err(CoreError::numeric(format!(
            "non-finite loss: bce={} dice={} contrastive={} mi={}",
            breakdown.bce, breakdown.dice, breakdown.contrastive, breakdown.mi
        )));
    }

    let grads = tape.backward(total);
    model.store.zero_grads();
    grads.accumulate_params(&tape, &mut model.store);
    opt_model.step(&mut model.store, lr);
    if variant.optimizes_mi() {
        // the MI term's critic gradient also advances the critic
        opt_critic.step(&mut model.store, model.mine_cfg.lr);
    }
    Ok(breakdown)
}

/// Evaluate the model on prepared slices (threshold 0.5), in batches.
pub fn evaluate_model(
    model: &MimicModel,
    slices: &[PreparedSlice],
    spacing: (f64, f64),
) -> Result<MetricReport> {
    if slices.is_empty() {
        return Err(CoreError::validation("no slices to evaluate"));
    }
    let s = model.cfg.image_size;
    let mut preds: Vec<Array2<u8>> = Vec::with_capacity(slices.len());
    for chunk in slices.chunks(model.cfg.batch_size.max(1)) {
        let mut images = Array4::<f64>::zeros((chunk.len(), 1, s, s));
        for (i, sl) in chunk.iter().enumerate() {
            images
                .index_axis_mut(Axis(0), i)
                .index_axis_mut(Axis(0), 0)
                .assign(&sl.image);
        }
        let probs = model.predict_probs(&images)?;
        for i in 0..chunk.len() {
            let m = probs
                .index_axis(Axis(0), i)
                .index_axis(Axis(0), 0)
                .mapv(|p| (p > 0.5) as u8);
            preds.push(m);
        }
    }
    evaluate_slices(
        slices
            .iter()
            .zip(preds.iter())
            .map(|(sl, p)| (format!("{}#{}", sl.subject_id, sl.slice_index), p, &sl.mask)),
        spacing,
    )
}

/// Per-epoch dynamic ranking over (a sample of) the training slices.
fn epoch_ranking(
    model: &MimicModel,
    train: &[PreparedSlice],
    cfg: &TrainConfig,
) -> Result<(MiRanking, Vec<MiRanking>)> {
    let n = train.len().min(cfg.rank_sample);
    let subset: Vec<&PreparedSlice> = train[..n].iter().collect();
    let batch = assemble_batch(&subset, cfg, None)?;
    let (mg, mv) = model.mi_embedding_values(&batch.images, &batch.cubes)?;
    let scores = pointwise_scores_with(&model.critic, &model.mine_state, &model.store, &mg, &mv)?;
    let rankings = rank_views_scored(&scores, cfg.sigma)?;
    let agg = aggregate_ranking(&rankings, cfg.sigma)?;
    Ok((agg, rankings))
}

/// Train on raw volumes: prepares the dataset, runs the epoch loop with
/// dynamic selection, early stopping on the training total loss, and best-
/// checkpoint tracking by validation DSC.
pub fn train(cfg: &TrainConfig, volumes: &[CtVolume]) -> Result<(MimicModel, TrainReport)> {
    let dataset = prepare_dataset(cfg, volumes)?;
    train_prepared(cfg, &dataset)
}

/// Training entry point on an already-prepared dataset (cache path).
pub fn train_prepared(
    cfg: &TrainConfig,
    dataset: &PreparedDataset,
) -> Result<(MimicModel, TrainReport)> {
    cfg.validate()?;
    let mut model = MimicModel::new(cfg)?;
    let mut opt_model = Adam::for_group(&model.store, ParamGroup::Model, cfg.weight_decay);
    let mut opt_critic = Adam::for_group(&model.store, ParamGroup::Critic, 0.0);
    let mut stopper = EarlyStopper::new(cfg.early_stop_patience);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best_val_dsc = f64::NEG_INFINITY;
    let mut best_epoch = 0usize;
    let mut best_weights = model.store.to_bytes();
    let mut stopped_early = false;

    let m_count = selection_count(cfg.n_views(), cfg.sigma)?;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch, cfg)?;
        let mut rng = crate::rng::derive(cfg.seed, 1000 + epoch as u64);

        // dynamic per-epoch selection (never cached across epochs)
        let selected: Vec<usize> = if cfg.variant.uses_selection() {
            let (agg, _per_sample) = epoch_ranking(&model, &dataset.train, cfg)?;
            agg.selected
        } else {
            Vec::new()
        };
        debug_assert!(!cfg.variant.uses_selection() || selected.len() == m_count);

        let mut order: Vec<usize> = (0..dataset.train.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_loss = LossBreakdown::zero();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue; // marginal shuffles and negatives need pairs
            }
            let slices: Vec<&PreparedSlice> = chunk.iter().map(|&i| &dataset.train[i]).collect();
            let batch = assemble_batch(
                &slices,
                cfg,
                if cfg.augment { Some(&mut rng) } else { None },
            )?;
            let loss = train_step(
                &mut model,
                &mut opt_model,
                &mut opt_critic,
                &batch,
                &selected,
                lr,
                &mut rng,
            )?;
            epoch_loss.add_assign(&loss);
            batches += 1;
        }
        if batches == 0 {
            return Err(CoreError::degenerate("no usable training batches"));
        }
        epoch_loss.scale(1.0 / batches as f64);

        let val = if dataset.val.is_empty() {
            ValMetrics {
                dsc: f64::NAN,
                miou: f64::NAN,
                hd95: f64::NAN,
                asd: f64::NAN,
            }
        } else {
            let report = evaluate_model(&model, &dataset.val, (1.0, 1.0))?;
            ValMetrics {
                dsc: report.dsc,
                miou: report.miou,
                hd95: report.hd95,
                asd: report.asd,
            }
        };

        if !dataset.val.is_empty() && val.dsc > best_val_dsc {
            best_val_dsc = val.dsc;
            best_epoch = epoch;
            best_weights = model.store.to_bytes();
        }

        history.push(EpochRecord {
            epoch,
            lr,
            loss: epoch_loss,
            val,
            selected_views: selected.clone(),
        });

        if stopper.observe(epoch_loss.total) {
            stopped_early = true;
            break;
        }
    }

    if dataset.val.is_empty() {
        best_weights = model.store.to_bytes();
        best_epoch = history.len().saturating_sub(1);
        best_val_dsc = f64::NAN;
    }

    // test metrics with the best weights
    model.load_weights(&best_weights)?;
    let test = if dataset.test.is_empty() {
        evaluate_model(&model, &dataset.val, (1.0, 1.0))?
    } else {
        evaluate_model(&model, &dataset.test, (1.0, 1.0))?
    };

    Ok((
        model,
        TrainReport {
            history,
            best_epoch,
            best_val_dsc,
            stopped_early,
            best_weights,
            test,
            split: dataset.split.clone(),
        },
    ))
}

/// Train and evaluate each ablation variant with otherwise identical config.
/// Returns (label, report) rows in the canonical table order.
pub fn run_ablation(cfg: &TrainConfig, volumes: &[CtVolume]) -> Result<Vec<(String, TrainReport)>> {
    let dataset = prepare_dataset(cfg, volumes)?;
    run_ablation_prepared(cfg, &dataset)
}

/// Ablation over an already-prepared dataset.
pub fn run_ablation_prepared(
    cfg: &TrainConfig,
    dataset: &PreparedDataset,
) -> Result<Vec<(String, TrainReport)>> {
    let mut rows = Vec::new();
    for variant in Variant::all() {
        let mut vcfg = cfg.clone();
        vcfg.variant = variant;
        let (_model, report) = train_prepared(&vcfg, dataset)?;
        rows.push((variant.label().to_string(), report));
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn desk_cfg() -> TrainConfig {
        TrainConfig {
            image_size: 32,
            base_channels: 2,
            patch_size: 8,
            batch_size: 4,
            max_epochs: 4,
            warmup_epochs: 2,
            early_stop_patience: 10,
            rank_sample: 4,
            augment: false,
            mi_embed_dim: 8,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn tiny_volumes(n: usize, size: usize, seed: u64) -> Vec<crate::data::CtVolume> {
        crate::synth::generate(&crate::synth::SyntheticSpec {
            n_subjects: n,
            slices_per_subject: 2,
            image_size: size,
            seed,
            lesion_radius_range: (3.0, 6.0),
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn lr_schedule_examples() {
        let cfg = TrainConfig::default();
        assert_abs_diff_eq!(lr_at(0, &cfg).unwrap(), 1e-4, epsilon = 1e-18);
        assert_abs_diff_eq!(lr_at(4, &cfg).unwrap(), 5e-4, epsilon = 1e-18);
        let want = 5e-4 * (1.0f64 - 5.0 / 300.0).powf(0.9);
        assert_abs_diff_eq!(lr_at(5, &cfg).unwrap(), want, epsilon = 1e-18);
        let end = lr_at(299, &cfg).unwrap();
        assert!(end > 0.0 && end < 1e-5);
        assert!(lr_at(300, &cfg).is_err());
    }

    #[test]
    fn early_stop_exact_patience() {
        let mut stopper = EarlyStopper::new(50);
        let mut stop_epoch = None;
        for epoch in 0..200 {
            if stopper.observe(1.0) {
                stop_epoch = Some(epoch);
                break;
            }
        }
        assert_eq!(stop_epoch, Some(50));
    }

    #[test]
    fn early_stop_resets_on_improvement() {
        let mut stopper = EarlyStopper::new(3);
        assert!(!stopper.observe(5.0));
        assert!(!stopper.observe(5.0));
        assert!(!stopper.observe(4.0)); // improvement resets staleness
        assert!(!stopper.observe(4.0));
        assert!(!stopper.observe(4.0));
        assert!(stopper.observe(4.0));
    }

    #[test]
    fn augment_identity_is_resize() {
        let mut rng = crate::rng::seeded(5);
        use rand::Rng;
        let img = Array2::from_shape_fn((16, 16), |_| rng.random_range(0.0..1.0));
        let mask = Array2::from_shape_fn((16, 16), |(y, x)| ((y + x) % 3 == 0) as u8);
        let s = SliceSample::new(img.clone(), Some(mask.clone()), "s", 0).unwrap();
        let out = augment_with(&s, &AugmentDraw::identity(), 16);
        let diff = (&out.image - &img).iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(diff < 1e-12);
        assert_eq!(out.mask.unwrap(), mask);
    }

    #[test]
    fn augment_keeps_mask_binary_and_range() {
        let mut rng = crate::rng::seeded(6);
        use rand::Rng;
        let img = Array2::from_shape_fn((24, 24), |_| rng.random_range(0.0..1.0));
        let mask = Array2::from_shape_fn((24, 24), |(y, _)| (y > 12) as u8);
        let s = SliceSample::new(img, Some(mask), "s", 0).unwrap();
        for _ in 0..10 {
            let out = augment(&s, &mut rng, 16);
            assert!(out.image.iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(out.mask.unwrap().iter().all(|&v| v <= 1));
        }
    }

    #[test]
    fn augment_is_deterministic_under_seed() {
        let mut rng_a = crate::rng::seeded(7);
        let mut rng_b = crate::rng::seeded(7);
        let img = Array2::from_elem((16, 16), 0.5);
        let s = SliceSample::new(img, None, "s", 0).unwrap();
        let a = augment(&s, &mut rng_a, 16);
        let b = augment(&s, &mut rng_b, 16);
        assert_eq!(a.image, b.image);
    }

    #[test]
    fn total_loss_components_and_bookkeeping() {
        let logits = Array4::from_elem((2, 1, 8, 8), 20.0);
        let target = Array4::from_elem((2, 1, 8, 8), 1.0);
        let lat = Array2::from_shape_fn((2, 4), |(i, j)| (i + j) as f64 + 0.5);
        let views = Array3::from_shape_fn((2, 2, 4), |(i, j, k)| (i + j + k) as f64 + 0.3);
        let rankings = vec![
            MiRanking::from_scores(&[0.5, 0.3], 1.0).unwrap(),
            MiRanking::from_scores(&[0.4, 0.2], 1.0).unwrap(),
        ];
        let lb = total_loss(
            &logits,
            &target,
            &lat,
            &views,
            None,
            &rankings,
            TrainMode::SelfSupervised,
            0.5,
        )
        .unwrap();
        // perfect prediction: bce and dice effectively zero
        assert!(lb.bce < 1e-6, "bce={}", lb.bce);
        assert!(lb.dice < 1e-6, "dice={}", lb.dice);
        assert_abs_diff_eq!(lb.mi, -0.35, epsilon = 1e-12);
        assert_abs_diff_eq!(
            lb.total,
            lb.bce + lb.dice + lb.contrastive + lb.mi,
            epsilon = 1e-6
        );

        // all-background prediction against all-background target (logits
        // deep enough in saturation that the probability mass is far below
        // the epsilon smoothing)
        let neg_logits = Array4::from_elem((1, 1, 8, 8), -40.0);
        let empty = Array4::from_elem((1, 1, 8, 8), 0.0);
        let lb2 = total_loss(
            &neg_logits,
            &empty,
            &lat,
            &views,
            None,
            &rankings,
            TrainMode::SelfSupervised,
            0.5,
        )
        .unwrap();
        assert!(lb2.dice.abs() < 1e-6, "empty-mask dice={}", lb2.dice);
    }

    #[test]
    fn config_kv_round_trip_and_validation() {
        let mut cfg = TrainConfig::default();
        cfg.apply_kv_lines("sigma = 0.3\n# comment\nbatch_size = 4\nvariant = mimic\nmode = semi\n")
            .unwrap();
        assert_abs_diff_eq!(cfg.sigma, 0.3);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.mode, TrainMode::SemiSupervised);
        assert!(cfg.apply_kv("nonsense", "1").is_err());
        cfg.sigma = 1.5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn gradient_isolation_between_seg_and_critic() {
        let cfg = desk_cfg();
        let mut model = MimicModel::new(&cfg).unwrap();
        let volumes = tiny_volumes(2, 32, 3);
        let norm = subject_normalize(&volumes[0], false).unwrap();
        let slices: Vec<PreparedSlice> = norm
            .slices()
            .unwrap()
            .iter()
            .map(|s| prepare_slice(s, &cfg).unwrap())
            .collect();
        let refs: Vec<&PreparedSlice> = slices.iter().collect();
        let batch = assemble_batch(&refs, &cfg, None).unwrap();

        // segmentation-only loss: critic must receive no gradient
        let mut tape = Tape::new();
        let x = tape.input4(&batch.images);
        let (latent, skips) = model.unet.encode(&mut tape, &model.store, x).unwrap();
        let logits = model
            .unet
            .decode(&mut tape, &model.store, latent, &skips)
            .unwrap();
        let (bce, dice) = seg_losses(&mut tape, logits, &batch.masks);
        let loss = tape.add(bce, dice);
        let grads = tape.backward(loss);
        model.store.zero_grads();
        grads.accumulate_params(&tape, &mut model.store);
        assert_eq!(model.store.grad_norm_sq(ParamGroup::Critic), 0.0);
        assert!(model.store.grad_norm_sq(ParamGroup::Model) > 0.0);

        // MI-only loss: critic and encoder receive gradients
        let selected: Vec<usize> = (0..13).collect();
        let mut tape = Tape::new();
        let x = tape.input4(&batch.images);
        let (latent, _) = model.unet.encode(&mut tape, &model.store, x).unwrap();
        let pooled = tape.global_avg_pool(latent);
        let m_g = model.mi_latent.fwd(&mut tape, &model.store, pooled);
        let b = batch.images.dim().0;
        let m = selected.len();
        let pooled_views = pool_cube_channels(&batch.cubes);
        let sel_pooled: Vec<f64> = (0..b)
            .flat_map(|i| selected.iter().map(|&v| pooled_views[[i, v]]).collect::<Vec<_>>())
            .collect();
        let pv_in = tape.input2(&Array2::from_shape_vec((b * m, 1), sel_pooled).unwrap());
        let m_v = model.mi_view.fwd(&mut tape, &model.store, pv_in);
        let expand_idx: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(m)).collect();
        let m_g_rows = tape.embed_lookup(m_g, &expand_idx);
        let view_idx: Vec<usize> = (0..b).flat_map(|_| selected.iter().copied()).collect();
        let t = model
            .critic
            .scores(&mut tape, &model.store, m_g_rows, m_v, Some(&view_idx));
        let mean_t = tape.mean(t);
        let l_mi = tape.neg(mean_t);
        let grads = tape.backward(l_mi);
        model.store.zero_grads();
        grads.accumulate_params(&tape, &mut model.store);
        assert!(model.store.grad_norm_sq(ParamGroup::Critic) > 0.0);
        // encoder (not decoder) gets gradient from the MI path
        let enc_grad: f64 = model
            .unet
            .param_ids()
            .iter()
            .filter(|&&id| model.store.name(id).starts_with("unet.enc"))
            .map(|&id| model.store.grad(id).iter().map(|g| g * g).sum::<f64>())
            .sum();
        let dec_grad: f64 = model
            .unet
            .param_ids()
            .iter()
            .filter(|&&id| model.store.name(id).starts_with("unet.dec"))
            .map(|&id| model.store.grad(id).iter().map(|g| g * g).sum::<f64>())
            .sum();
        assert!(enc_grad > 0.0);
        assert_eq!(dec_grad, 0.0);
    }

    #[test]
    fn training_smoke_reproducible_and_loss_decreases() {
        let mut cfg = desk_cfg();
        cfg.max_epochs = 5;
        cfg.variant = Variant::Full;
        let volumes = tiny_volumes(8, 32, 9);
        let (_m1, r1) = train(&cfg, &volumes).unwrap();
        let (_m2, r2) = train(&cfg, &volumes).unwrap();
        assert_eq!(r1.history.len(), r2.history.len());
        for (a, b) in r1.history.iter().zip(&r2.history) {
            assert_eq!(a.loss.total.to_bits(), b.loss.total.to_bits());
            assert_eq!(a.selected_views, b.selected_views);
        }
        let first = r1.history.first().unwrap().loss.total;
        let last = r1.history.last().unwrap().loss.total;
        assert!(
            last < first,
            "loss should trend down: first {first}, last {last}"
        );
    }

    #[test]
    fn rankings_can_change_between_epochs() {
        let mut cfg = desk_cfg();
        cfg.max_epochs = 3;
        cfg.variant = Variant::Full;
        let volumes = tiny_volumes(8, 32, 21);
        let (_m, report) = train(&cfg, &volumes).unwrap();
        // with a training critic the per-epoch selections are recomputed;
        // assert the records exist and have the right cardinality
        let m = selection_count(cfg.n_views(), cfg.sigma).unwrap();
        for rec in &report.history {
            assert_eq!(rec.selected_views.len(), m);
        }
    }
}
