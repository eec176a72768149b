//! Segmentation backbone: a three-stage U-Net encoder/decoder plus the
//! parallel frequency-branch encoder whose output is shape-matched to the
//! latent representation.
//!
//! The latent sits at 1/8 of the input resolution. The frequency branch runs
//! a small shared per-view encoder over every cube channel (three conv
//! blocks, distinct weights from the image encoder) and adapts its stage
//! resampling so its output matches the latent's spatial dims for any patch
//! size.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;

use crate::error::{CoreError, Result};
use crate::nn::{Conv2dLayer, ParamGroup, ParamId, ParamStore, Tape, Var};

/// Two 3x3 convs with ReLU; the first may downsample by stride 2.
#[derive(Debug, Clone)]
struct ConvBlock {
    c1: Conv2dLayer,
    c2: Conv2dLayer,
}

impl ConvBlock {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        ConvBlock {
            c1: Conv2dLayer::new(store, &format!("{name}.c1"), in_ch, out_ch, 3, stride, 1, ParamGroup::Model, rng),
            c2: Conv2dLayer::new(store, &format!("{name}.c2"), out_ch, out_ch, 3, 1, 1, ParamGroup::Model, rng),
        }
    }

    fn fwd(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let h = self.c1.fwd(tape, store, x);
        let h = tape.relu(h);
        let h = self.c2.fwd(tape, store, h);
        tape.relu(h)
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.c1.w, self.c1.b, self.c2.w, self.c2.b]
    }
}

/// U-Net with three downsampling stages (input -> 1/8 resolution latent).
#[derive(Debug, Clone)]
pub struct UNet {
    enc1: ConvBlock,
    enc2: ConvBlock,
    enc3: ConvBlock,
    bottleneck: ConvBlock,
    dec3: ConvBlock,
    dec2: ConvBlock,
    dec1: ConvBlock,
    head: Conv2dLayer,
    pub in_channels: usize,
    pub base_channels: usize,
}

/// Skip connections retained for the decoder.
pub struct Skips {
    s1: Var,
    s2: Var,
    s3: Var,
}

impl UNet {
    /// `base_channels` sets the stage widths base, 2*base, 4*base
    /// (64/128/256 at the default base of 64).
    pub fn new(
        store: &mut ParamStore,
        in_channels: usize,
        base_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let c = base_channels;
        UNet {
            enc1: ConvBlock::new(store, "unet.enc1", in_channels, c, 1, rng),
            enc2: ConvBlock::new(store, "unet.enc2", c, 2 * c, 1, rng),
            enc3: ConvBlock::new(store, "unet.enc3", 2 * c, 4 * c, 1, rng),
            bottleneck: ConvBlock::new(store, "unet.bottleneck", 4 * c, 4 * c, 1, rng),
            dec3: ConvBlock::new(store, "unet.dec3", 4 * c + 4 * c, 2 * c, 1, rng),
            dec2: ConvBlock::new(store, "unet.dec2", 2 * c + 2 * c, c, 1, rng),
            dec1: ConvBlock::new(store, "unet.dec1", c + c, c, 1, rng),
            head: Conv2dLayer::new(store, "unet.head", c, 1, 1, 1, 0, ParamGroup::Model, rng),
            in_channels,
            base_channels,
        }
    }

    /// Channel count of the latent representation (4 * base).
    pub fn latent_channels(&self) -> usize {
        4 * self.base_channels
    }

    fn check_input(&self, tape: &Tape, x: Var) -> Result<(usize, usize, usize)> {
        let s = tape.value(x).shape().to_vec();
        if s.len() != 4 || s[1] != self.in_channels {
            return Err(CoreError::shape(format!(
                "expected (B, {}, H, W) input, got {:?}",
                self.in_channels, s
            )));
        }
        let (h, w) = (s[2], s[3]);
        if h % 8 != 0 || w % 8 != 0 || h == 0 || w == 0 {
            return Err(CoreError::shape(format!(
                "spatial dims must be positive multiples of 8, got {h}x{w}"
            )));
        }
        Ok((s[0], h, w))
    }

    /// Encoder: three stages, each halving the spatial dims; returns the
    /// latent at 1/8 resolution and the skip features.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Skips)> {
        self.check_input(tape, x)?;
        let s1 = self.enc1.fwd(tape, store, x); // (b, c, h, w)
        let p1 = tape.max_pool2(s1);
        let s2 = self.enc2.fwd(tape, store, p1); // (b, 2c, h/2, w/2)
        let p2 = tape.max_pool2(s2);
        let s3 = self.enc3.fwd(tape, store, p2); // (b, 4c, h/4, w/4)
        let p3 = tape.max_pool2(s3);
        let latent = self.bottleneck.fwd(tape, store, p3); // (b, 4c, h/8, w/8)
        Ok((latent, Skips { s1, s2, s3 }))
    }

    /// Decoder: mirrors the encoder with nearest-upsample + concat skips,
    /// ending in per-pixel logits at the input resolution.
    pub fn decode(&self, tape: &mut Tape, store: &ParamStore, latent: Var, skips: &Skips) -> Result<Var> {
        let latent_shape = tape.value(latent).shape().to_vec();
        let s3_shape = tape.value(skips.s3).shape().to_vec();
        if latent_shape[2] * 2 != s3_shape[2] || latent_shape[3] * 2 != s3_shape[3] {
            return Err(CoreError::shape(format!(
                "latent {:?} does not pair with skip {:?}",
                latent_shape, s3_shape
            )));
        }
        let u3 = tape.upsample2(latent);
        let c3 = tape.concat_axis1(&[u3, skips.s3]);
        let d3 = self.dec3.fwd(tape, store, c3);
        let u2 = tape.upsample2(d3);
        let c2 = tape.concat_axis1(&[u2, skips.s2]);
        let d2 = self.dec2.fwd(tape, store, c2);
        let u1 = tape.upsample2(d2);
        let c1 = tape.concat_axis1(&[u1, skips.s1]);
        let d1 = self.dec1.fwd(tape, store, c1);
        Ok(self.head.fwd(tape, store, d1))
    }

    /// Full forward: logits at input resolution.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (latent, skips) = self.encode(tape, store, x)?;
        self.decode(tape, store, latent, &skips)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in [
            &self.enc1,
            &self.enc2,
            &self.enc3,
            &self.bottleneck,
            &self.dec3,
            &self.dec2,
            &self.dec1,
        ] {
            ids.extend(b.param_ids());
        }
        ids.push(self.head.w);
        ids.push(self.head.b);
        ids
    }
}

/// Per-stage spatial adaptation of the frequency branch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Resample {
    Down,
    Keep,
    Up,
}

/// Stage plan matching a cube at `size/p` to the latent at `size/8`:
/// `log2(8/p)` downsampling (p < 8) or `log2(p/8)` upsampling (p > 8) stages.
fn stage_plan(patch_size: usize) -> Result<[Resample; 3]> {
    if patch_size == 0 || !patch_size.is_power_of_two() {
        return Err(CoreError::config(format!(
            "patch size must be a power of two, got {patch_size}"
        )));
    }
    let mut plan = [Resample::Keep; 3];
    if patch_size < 8 {
        let downs = (8 / patch_size).trailing_zeros() as usize;
        if downs > 3 {
            return Err(CoreError::config(format!(
                "patch size {patch_size} needs more than three downsampling stages"
            )));
        }
        plan.iter_mut().take(downs).for_each(|r| *r = Resample::Down);
    } else if patch_size > 8 {
        let ups = (patch_size / 8).trailing_zeros() as usize;
        if ups > 3 {
            return Err(CoreError::config(format!(
                "patch size {patch_size} needs more than three upsampling stages"
            )));
        }
        plan.iter_mut().take(ups).for_each(|r| *r = Resample::Up);
    }
    Ok(plan)
}

/// Parallel frequency-branch encoder: a shared three-block CNN applied to
/// every view channel independently (weights disjoint from the image
/// encoder), plus a 1x1 projection to the latent channel count when the
/// grouped width differs.
#[derive(Debug, Clone)]
pub struct DctBranch {
    blocks: [ConvBlock; 3],
    plan: [Resample; 3],
    proj: Option<Conv2dLayer>,
    pub n_views: usize,
    pub patch_size: usize,
    /// Feature channels per view after the shared encoder.
    pub per_view_channels: usize,
    pub out_channels: usize,
}

impl DctBranch {
    /// Branch for `n_views = p^2` cube channels whose output matches a latent
    /// with `latent_channels` channels at 1/8 input resolution.
    pub fn new(
        store: &mut ParamStore,
        patch_size: usize,
        latent_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n_views = patch_size * patch_size;
        let plan = stage_plan(patch_size)?;
        let g = (latent_channels / n_views).max(1);
        let mk = |store: &mut ParamStore, i: usize, in_ch: usize, rng: &mut ChaCha8Rng| {
            let stride = if plan[i] == Resample::Down { 2 } else { 1 };
            ConvBlock::new(store, &format!("branch.b{i}"), in_ch, g, stride, rng)
        };
        let blocks = [
            mk(store, 0, 1, rng),
            mk(store, 1, g, rng),
            mk(store, 2, g, rng),
        ];
        let proj = if n_views * g != latent_channels {
            Some(Conv2dLayer::new(
                store,
                "branch.proj",
                n_views * g,
                latent_channels,
                1,
                1,
                0,
                ParamGroup::Model,
                rng,
            ))
        } else {
            None
        };
        Ok(DctBranch {
            blocks,
            plan,
            proj,
            n_views,
            patch_size,
            per_view_channels: g,
            out_channels: latent_channels,
        })
    }

    /// Encode a cube batch (B, J, H/p, W/p).
    ///
    /// Returns per-view features (B*J, g, H/8, W/8) (sample-major rows) and
    /// the shape-matched branch representation (B, latent_channels, H/8, W/8).
    pub fn encode_views(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        cube: Var,
    ) -> Result<(Var, Var)> {
        let s = tape.value(cube).shape().to_vec();
        if s.len() != 4 || s[1] != self.n_views {
            return Err(CoreError::shape(format!(
                "expected (B, {}, h, w) cube, got {:?}",
                self.n_views, s
            )));
        }
        let (b, j, h, w) = (s[0], s[1], s[2], s[3]);
        let mut x = tape.reshape(cube, &[b * j, 1, h, w]);
        for (i, block) in self.blocks.iter().enumerate() {
            if self.plan[i] == Resample::Up {
                x = tape.upsample2(x);
            }
            x = block.fwd(tape, store, x);
        }
        let out_shape = tape.value(x).shape().to_vec();
        let (g, ho, wo) = (out_shape[1], out_shape[2], out_shape[3]);
        let grouped = tape.reshape(x, &[b, j * g, ho, wo]);
        let rep = match &self.proj {
            Some(p) => p.fwd(tape, store, grouped),
            None => grouped,
        };
        Ok((x, rep))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for b in &self.blocks {
            ids.extend(b.param_ids());
        }
        if let Some(p) = &self.proj {
            ids.push(p.w);
            ids.push(p.b);
        }
        ids
    }
}

/// Convenience eval-mode forward on plain arrays (no gradients kept).
pub fn forward_logits(
    unet: &UNet,
    store: &ParamStore,
    images: &Array4<f64>,
) -> Result<Array4<f64>> {
    let mut tape = Tape::new();
    let x = tape.input4(images);
    let logits = unet.forward(&mut tape, store, x)?;
    Ok(tape
        .value(logits)
        .clone()
        .into_dimensionality::<ndarray::Ix4>()
        .map_err(|e| CoreError::shape(e.to_string()))?)
}
