//! Minimal reverse-mode autodiff over `ndarray`, plus the layers and
//! optimizer built on it.
//!
//! Design: a [`tape::Tape`] is a per-step arena of nodes. Model parameters
//! live outside the tape in a [`params::ParamStore`]; `Op::Param` leaves bind
//! tape nodes to store entries so `backward` can accumulate parameter
//! gradients across steps. Everything is `f64` and single threaded, which
//! keeps gradient checks tight and runs bit-reproducible.

pub mod check;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use layers::{Conv2dLayer, Embedding, Linear, Mlp};
pub use optim::Adam;
pub use params::{ParamGroup, ParamId, ParamStore};
pub use tape::{Grads, Tape, Var};
