//! Trainable layers: thin wrappers that register parameters in a store and
//! replay them onto a tape at forward time.

use ndarray::{Array1, Array2, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::params::{ParamGroup, ParamId, ParamStore};
use super::tape::{Tape, Var};

fn kaiming(fan_in: usize) -> Normal<f64> {
    Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap()
}

/// Fully connected layer, y = x W^T + b, with x as (n, in).
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: ParamId, // (out, in)
    pub b: ParamId, // (out,)
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dist = kaiming(in_dim);
        let w = Array2::from_shape_fn((out_dim, in_dim), |_| dist.sample(rng));
        let b = Array1::<f64>::zeros(out_dim);
        Linear {
            w: store.add(format!("{name}.w"), w.into_dyn(), group),
            b: store.add(format!("{name}.b"), b.into_dyn(), group),
            in_dim,
            out_dim,
        }
    }

    pub fn fwd(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let wt = tape.transpose2(w);
        let xw = tape.matmul(x, wt);
        tape.add_row(xw, b)
    }
}

/// Multi-layer perceptron with a fixed activation between layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Elu,
    Tanh,
}

impl Mlp {
    /// `dims` = [in, hidden..., out]; activation applied between layers only.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(dims.len() >= 2);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.l{i}"), w[0], w[1], group, rng))
            .collect();
        Mlp {
            layers,
            activation,
        }
    }

    pub fn fwd(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.fwd(tape, store, h);
            if i + 1 < self.layers.len() {
                h = match self.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Elu => tape.elu(h, 1.0),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        h
    }
}

/// 2D convolution layer with bias.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub w: ParamId, // (out, in, kh, kw)
    pub b: ParamId, // (out,)
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_ch * kernel * kernel;
        let dist = kaiming(fan_in);
        let w = Array4::from_shape_fn((out_ch, in_ch, kernel, kernel), |_| dist.sample(rng));
        let b = Array1::<f64>::zeros(out_ch);
        Conv2dLayer {
            w: store.add(format!("{name}.w"), w.into_dyn(), group),
            b: store.add(format!("{name}.b"), b.into_dyn(), group),
            stride,
            pad,
        }
    }

    pub fn fwd(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Learned embedding table.
#[derive(Debug, Clone)]
pub struct Embedding {
    pub table: ParamId, // (count, dim)
    pub dim: usize,
}

impl Embedding {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        count: usize,
        dim: usize,
        group: ParamGroup,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let w = Array2::from_shape_fn((count, dim), |_| rng.random_range(-0.1..0.1));
        Embedding {
            table: store.add(format!("{name}.table"), w.into_dyn(), group),
            dim,
        }
    }

    pub fn fwd(&self, tape: &mut Tape, store: &ParamStore, idx: &[usize]) -> Var {
        let t = tape.param(store, self.table);
        tape.embed_lookup(t, idx)
    }
}
