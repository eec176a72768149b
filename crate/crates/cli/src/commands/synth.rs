//! `synth`: generate a deterministic synthetic lesion dataset directory.

use std::path::PathBuf;

use anyhow::Result;
use clap::Args;
use mimic_core::synth::{generate, SyntheticSpec};

use crate::rundir;
use crate::volume_io::write_dataset;

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output dataset directory (defaults under the run root).
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub subjects: usize,
    #[arg(long, default_value_t = 6)]
    pub slices: usize,
    /// Square slice side length in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 1)]
    pub lesions_min: usize,
    #[arg(long, default_value_t = 3)]
    pub lesions_max: usize,
    #[arg(long, default_value_t = 4.0)]
    pub radius_min: f64,
    #[arg(long, default_value_t = 10.0)]
    pub radius_max: f64,
    #[arg(long, default_value_t = 0.03)]
    pub noise: f64,
}

pub fn run(args: &SynthArgs) -> Result<()> {
    let out = rundir::resolve(args.out.as_deref(), "synth")?;
    let spec = SyntheticSpec {
        n_subjects: args.subjects,
        slices_per_subject: args.slices,
        lesion_count_range: (args.lesions_min, args.lesions_max),
        lesion_radius_range: (args.radius_min, args.radius_max),
        texture_noise_level: args.noise,
        image_size: args.size,
        seed: args.seed,
    };
    let volumes = generate(&spec)?;
    write_dataset(&out, &volumes)?;
    rundir::write_snapshot(&out, &spec)?;
    println!(
        "synth: wrote {} subjects x {} slices ({}x{}) to {}",
        args.subjects,
        args.slices,
        args.size,
        args.size,
        out.display()
    );
    Ok(())
}
