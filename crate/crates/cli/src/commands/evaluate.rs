//! `evaluate`: run a checkpoint over a cached dataset split and emit the
//! metric report.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use mimic_core::train::{evaluate_model, MimicModel, PreparedDataset};

use crate::cache::read_cache;
use crate::checkpoint;
use crate::report::{summary_table, write_metric_report};
use crate::rundir;
use crate::table::{fmt, CsvWriter};

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub cache: PathBuf,
    /// Which split to evaluate: train, val, test, or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

pub fn run(args: &EvaluateArgs) -> Result<()> {
    let out = rundir::resolve(args.out.as_deref(), "evaluate")?;
    let (meta, weights) = checkpoint::load(&args.checkpoint)?;
    let cfg = meta.config.clone();
    let (cache_meta, slices) = read_cache(&args.cache)?;
    cache_meta.check_compatible(&cfg)?;
    let dataset = PreparedDataset::from_slices(slices, &cfg, cache_meta.drop_empty)?;

    let mut model = MimicModel::new(&cfg)?;
    model.load_weights(&weights)?;

    let selected: Vec<&mimic_core::train::PreparedSlice> = match args.split.as_str() {
        "train" => dataset.train.iter().collect(),
        "val" => dataset.val.iter().collect(),
        "test" => dataset.test.iter().collect(),
        "all" => dataset
            .train
            .iter()
            .chain(&dataset.val)
            .chain(&dataset.test)
            .collect(),
        other => bail!("unknown split '{other}' (train|val|test|all)"),
    };
    if selected.is_empty() {
        bail!("split '{}' has no slices", args.split);
    }
    let owned: Vec<mimic_core::train::PreparedSlice> =
        selected.into_iter().cloned().collect();
    let report = evaluate_model(&model, &owned, (1.0, 1.0))?;

    let label = cfg.variant.label();
    write_metric_report(&out.join("metrics.csv"), label, &report)?;
    let mut summary = CsvWriter::new(&["method", "dsc", "miou", "hd95", "asd"]);
    summary.row(&[
        label.to_string(),
        fmt(report.dsc),
        fmt(report.miou),
        fmt(report.hd95),
        fmt(report.asd),
    ]);
    summary.write(&out.join("summary.csv"))?;
    rundir::write_snapshot(&out, &cfg)?;

    print!(
        "{}",
        summary_table(&[(
            label.to_string(),
            report.dsc,
            report.miou,
            report.hd95,
            report.asd
        )])
    );
    if report.undefined_surface_count > 0 {
        println!(
            "note: {} slice(s) had exactly one empty mask; surface distances \
             were excluded for them",
            report.undefined_surface_count
        );
    }
    println!("evaluate: {} slices -> {}", report.per_slice.len(), out.display());
    Ok(())
}
