//! `ablate`: train and evaluate the four module variants (baseline, +MI,
//! +CL, +MIMIC) under one config and emit the comparison table.

use std::path::PathBuf;

use anyhow::{bail, Result};
use clap::Args;
use mimic_core::train::run_ablation_prepared;

use crate::cache::read_cache;
use crate::commands::train::{effective_config, load_prepared};
use crate::report::summary_table;
use crate::rundir;
use crate::table::{fmt, CsvWriter};

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub cache: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

pub fn run(args: &AblateArgs) -> Result<()> {
    let out = rundir::resolve(args.out.as_deref(), "ablate")?;
    let (meta, _) = read_cache(&args.cache)?;
    let cfg = effective_config(
        args.config.as_deref(),
        &args.sets,
        meta.patch_size,
        meta.image_size,
        &meta.channel_order,
    )?;
    let (dataset, _) = load_prepared(&args.cache, &cfg)?;
    let rows = run_ablation_prepared(&cfg, &dataset)?;

    let mut csv = CsvWriter::new(&[
        "method", "dsc", "miou", "hd95", "asd", "bce", "dice", "contrastive", "mi",
    ]);
    let mut table_rows = Vec::new();
    for (label, report) in &rows {
        let last = report
            .history
            .last()
            .ok_or_else(|| anyhow::anyhow!("empty history for {label}"))?;
        csv.row(&[
            label.clone(),
            fmt(report.test.dsc),
            fmt(report.test.miou),
            fmt(report.test.hd95),
            fmt(report.test.asd),
            fmt(last.loss.bce),
            fmt(last.loss.dice),
            fmt(last.loss.contrastive),
            fmt(last.loss.mi),
        ]);
        table_rows.push((
            label.clone(),
            report.test.dsc,
            report.test.miou,
            report.test.hd95,
            report.test.asd,
        ));

        // wiring self-check: the variant's loss must contain exactly the
        // terms it claims to optimize
        let has_cl = last.loss.contrastive != 0.0;
        let has_mi = last.loss.mi != 0.0;
        let expect = match label.as_str() {
            "U-Net" => (false, false),
            "U-Net+MI" => (false, true),
            "U-Net+CL" => (true, false),
            "U-Net+MIMIC" => (true, true),
            other => bail!("unexpected variant label {other}"),
        };
        if (has_cl, has_mi) != expect {
            bail!(
                "{label}: loss wiring mismatch (contrastive={has_cl}, mi={has_mi}, \
                 expected {expect:?})"
            );
        }
    }
    csv.write(&out.join("ablation.csv"))?;
    rundir::write_snapshot(&out, &cfg)?;
    print!("{}", summary_table(&table_rows));
    println!("ablate: table -> {}", out.join("ablation.csv").display());
    Ok(())
}
