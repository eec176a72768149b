//! `plot`: regenerate static SVG plots from result CSVs.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::Args;

use crate::commands::sweep::{parse_sweep_csv, render_sweep_plots};
use crate::rundir;
use crate::svg::{LinePlot, Series};
use crate::table::read_csv;

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// Input CSV (sweep results or training history).
    #[arg(long)]
    pub csv: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// CSV kind: sweep or history.
    #[arg(long, default_value = "sweep")]
    pub kind: String,
}

pub fn run(args: &PlotArgs) -> Result<()> {
    let out = rundir::resolve(args.out.as_deref(), "plot")?;
    match args.kind.as_str() {
        "sweep" => {
            let rows = parse_sweep_csv(&args.csv)?;
            render_sweep_plots(&rows, &out)?;
            println!("plot: sweep plots -> {}", out.display());
        }
        "history" => {
            let (header, rows) = read_csv(&args.csv)?;
            let col = |name: &str| {
                header
                    .iter()
                    .position(|h| h == name)
                    .with_context(|| format!("{}: missing column {name}", args.csv.display()))
            };
            let epoch_c = col("epoch")?;
            let mut loss_series = Vec::new();
            for name in ["bce", "dice", "contrastive", "mi", "total"] {
                let c = col(name)?;
                let pts: Vec<(f64, f64)> = rows
                    .iter()
                    .filter_map(|r| {
                        let e: f64 = r[epoch_c].parse().ok()?;
                        let v: f64 = r[c].parse().ok()?;
                        Some((e, v))
                    })
                    .collect();
                loss_series.push(Series {
                    label: name.to_string(),
                    points: pts,
                });
            }
            LinePlot {
                title: "Training loss components".into(),
                x_label: "epoch".into(),
                y_label: "loss".into(),
                series: loss_series,
                baseline: None,
            }
            .write(&out.join("loss.svg"))?;

            let c = col("val_dsc")?;
            let pts: Vec<(f64, f64)> = rows
                .iter()
                .filter_map(|r| {
                    let e: f64 = r[epoch_c].parse().ok()?;
                    let v: f64 = r[c].parse().ok()?;
                    Some((e, v))
                })
                .collect();
            LinePlot {
                title: "Validation DSC".into(),
                x_label: "epoch".into(),
                y_label: "DSC".into(),
                series: vec![Series {
                    label: "val".into(),
                    points: pts,
                }],
                baseline: None,
            }
            .write(&out.join("val_dsc.svg"))?;
            println!("plot: history plots -> {}", out.display());
        }
        other => bail!("unknown plot kind '{other}' (sweep|history)"),
    }
    Ok(())
}
