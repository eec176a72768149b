pub mod ablate;
pub mod evaluate;
pub mod mi_probe;
pub mod plot;
pub mod preprocess;
pub mod sweep;
pub mod synth;
pub mod train;
