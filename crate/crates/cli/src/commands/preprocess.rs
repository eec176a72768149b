//! `preprocess`: ingest a dataset directory, subject-normalize, slice,
//! transform to frequency cubes, and write the training cache.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use mimic_core::train::{resize_sample, PreparedSlice};
use mimic_core::views::{
    dct_cube_of_image, freq_normalize, freq_normalize_global, subject_normalize, ChannelOrder,
    ChannelStats, DctCube,
};
use serde::Serialize;

use crate::cache::{source_checksum, write_cache, CacheMeta};
use crate::rundir;
use crate::volume_io::load_dataset;

#[derive(Debug, Args, Serialize)]
pub struct PreprocessArgs {
    /// Dataset directory (images/ + masks/).
    #[arg(long = "in")]
    pub input: PathBuf,
    /// Cache output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub patch_size: usize,
    /// Frequency channel order: zigzag or row-major.
    #[arg(long, default_value = "zigzag")]
    pub order: String,
    /// Working resolution (images are resized to this square size).
    #[arg(long, default_value_t = 256)]
    pub image_size: usize,
    /// Drop lesion-free slices from the training split at train time.
    #[arg(long)]
    pub drop_empty: bool,
    /// Frequency normalization scope: per-cube or global.
    #[arg(long, default_value = "per-cube")]
    pub fn_scope: String,
}

pub fn run(args: &PreprocessArgs) -> Result<()> {
    let order = ChannelOrder::parse(&args.order)?;
    if !matches!(args.fn_scope.as_str(), "per-cube" | "global") {
        bail!("--fn-scope must be per-cube or global");
    }
    if args.image_size % 8 != 0 || args.image_size % args.patch_size != 0 {
        bail!("--image-size must be divisible by 8 and by --patch-size");
    }
    let out = rundir::resolve(args.out.as_deref(), "cache")?;
    let volumes = load_dataset(&args.input, true)?;
    let checksum = source_checksum(&volumes);

    // subject normalization, resize, pre-FN cubes
    let mut slices: Vec<(PreparedSlice, DctCube)> = Vec::new();
    for vol in &volumes {
        let normalized = subject_normalize(vol, false)?;
        for s in normalized.slices()? {
            let resized = resize_sample(&s, args.image_size);
            let cube = dct_cube_of_image(&resized.image, args.patch_size, order)?;
            let mask = resized
                .mask
                .clone()
                .ok_or_else(|| anyhow::anyhow!("subject {}: missing mask", s.subject_id))?;
            slices.push((
                PreparedSlice {
                    subject_id: resized.subject_id.clone(),
                    slice_index: resized.slice_index,
                    image: resized.image,
                    mask,
                    cube: ndarray::Array3::zeros((0, 0, 0)), // filled below
                },
                cube,
            ));
        }
    }

    // frequency-wise normalization, per-cube or dataset-global
    let prepared: Vec<PreparedSlice> = if args.fn_scope == "global" {
        let stats = ChannelStats::from_cubes(slices.iter().map(|(_, c)| c))?;
        slices
            .into_iter()
            .map(|(mut p, c)| {
                p.cube = freq_normalize_global(&c, &stats)
                    .expect("stats cover cube channels")
                    .coefficients;
                p
            })
            .collect()
    } else {
        slices
            .into_iter()
            .map(|(mut p, c)| {
                p.cube = freq_normalize(&c).coefficients;
                p
            })
            .collect()
    };

    let meta = CacheMeta {
        patch_size: args.patch_size,
        channel_order: order.as_str().to_string(),
        fn_scope: args.fn_scope.clone(),
        image_size: args.image_size,
        drop_empty: args.drop_empty,
        n_slices: prepared.len(),
        source_checksum: checksum,
    };
    write_cache(&out, &meta, &prepared)?;
    rundir::write_snapshot(&out, args)?;
    println!(
        "preprocess: cached {} slices from {} subjects (p={}, {}, {}) to {}",
        prepared.len(),
        volumes.len(),
        args.patch_size,
        order.as_str(),
        args.fn_scope,
        out.display()
    );
    Ok(())
}
