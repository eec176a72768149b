//! `sweep`: hyperparameter grid over patch size p and selection fraction
//! sigma, with a MIMIC-disabled baseline row and per-metric line plots.
//!
//! Caches are expected per patch size under `<cache-root>/p<P>`; cells whose
//! cache is missing are skipped with a warning.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use mimic_core::train::{train_prepared, Variant};

use crate::commands::train::{effective_config, load_prepared};
use crate::rundir;
use crate::svg::{LinePlot, Series};
use crate::table::{fmt, CsvWriter};

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Directory containing per-patch-size caches (p2/, p4/, ...).
    #[arg(long)]
    pub cache_root: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Comma-separated patch sizes.
    #[arg(long, default_value = "2,4,8,16,32")]
    pub p: String,
    /// Comma-separated selection fractions.
    #[arg(long, default_value = "0.1,0.2,0.3,0.4,0.5")]
    pub sigma: String,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SweepRow {
    pub label: String,
    pub p: usize,
    /// None marks the baseline row.
    pub sigma: Option<f64>,
    pub dsc: f64,
    pub miou: f64,
    pub hd95: f64,
    pub asd: f64,
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<T>()
                .map_err(|_| anyhow::anyhow!("bad {what} value '{t}'"))
        })
        .collect()
}

pub fn run(args: &SweepArgs) -> Result<()> {
    let out = rundir::resolve(args.out.as_deref(), "sweep")?;
    let ps: Vec<usize> = parse_list(&args.p, "p")?;
    let sigmas: Vec<f64> = parse_list(&args.sigma, "sigma")?;
    if ps.is_empty() || sigmas.is_empty() {
        bail!("empty sweep grid");
    }

    let mut rows: Vec<SweepRow> = Vec::new();
    let mut baseline_done = false;
    for &p in &ps {
        let cache = args.cache_root.join(format!("p{p}"));
        if !cache.join("meta.txt").exists() {
            eprintln!(
                "warning: no cache for p={p} at {}; skipping its cells",
                cache.display()
            );
            continue;
        }
        let meta = crate::cache::read_cache(&cache)?.0;
        let base_cfg = effective_config(
            args.config.as_deref(),
            &args.sets,
            meta.patch_size,
            meta.image_size,
            &meta.channel_order,
        )?;

        // one baseline row (MIMIC disabled) from the first available cache
        if !baseline_done {
            let mut cfg = base_cfg.clone();
            cfg.variant = Variant::Baseline;
            let (dataset, _) = load_prepared(&cache, &cfg)?;
            let (_m, report) = train_prepared(&cfg, &dataset)?;
            rows.push(SweepRow {
                label: "baseline".into(),
                p,
                sigma: None,
                dsc: report.test.dsc,
                miou: report.test.miou,
                hd95: report.test.hd95,
                asd: report.test.asd,
            });
            baseline_done = true;
        }

        for &sigma in &sigmas {
            let mut cfg = base_cfg.clone();
            cfg.variant = Variant::Full;
            cfg.sigma = sigma;
            let (dataset, _) = load_prepared(&cache, &cfg)?;
            let (_m, report) = train_prepared(&cfg, &dataset)?;
            println!(
                "sweep: p={p} sigma={sigma} -> DSC {:.4} mIoU {:.4} HD95 {:.4} ASD {:.4}",
                report.test.dsc, report.test.miou, report.test.hd95, report.test.asd
            );
            rows.push(SweepRow {
                label: format!("p{p}"),
                p,
                sigma: Some(sigma),
                dsc: report.test.dsc,
                miou: report.test.miou,
                hd95: report.test.hd95,
                asd: report.test.asd,
            });
        }
    }
    if !baseline_done {
        bail!("no caches found under {}", args.cache_root.display());
    }

    write_sweep_csv(&out.join("results.csv"), &rows)?;
    render_sweep_plots(&rows, &out)?;
    rundir::write_snapshot(
        &out,
        &serde_json::json!({
            "p": ps,
            "sigma": sigmas,
            "cache_root": args.cache_root.display().to_string(),
        }),
    )?;
    println!("sweep: {} rows -> {}", rows.len(), out.display());
    Ok(())
}

pub fn write_sweep_csv(path: &Path, rows: &[SweepRow]) -> Result<()> {
    let mut csv = CsvWriter::new(&["label", "p", "sigma", "dsc", "miou", "hd95", "asd"]);
    for r in rows {
        csv.row(&[
            r.label.clone(),
            r.p.to_string(),
            r.sigma.map(|s| s.to_string()).unwrap_or_else(|| "-".into()),
            fmt(r.dsc),
            fmt(r.miou),
            fmt(r.hd95),
            fmt(r.asd),
        ]);
    }
    csv.write(path)
}

pub fn parse_sweep_csv(path: &Path) -> Result<Vec<SweepRow>> {
    let (header, raw) = crate::table::read_csv(path)?;
    if header != ["label", "p", "sigma", "dsc", "miou", "hd95", "asd"] {
        bail!("{}: not a sweep results CSV", path.display());
    }
    raw.into_iter()
        .map(|r| {
            Ok(SweepRow {
                label: r[0].clone(),
                p: r[1].parse().context("p column")?,
                sigma: if r[2] == "-" {
                    None
                } else {
                    Some(r[2].parse().context("sigma column")?)
                },
                dsc: r[3].parse().context("dsc column")?,
                miou: r[4].parse().context("miou column")?,
                hd95: r[5].parse().context("hd95 column")?,
                asd: r[6].parse().context("asd column")?,
            })
        })
        .collect()
}

/// One plot per metric: metric vs sigma (a series per p) when sigma varies,
/// otherwise metric vs p; the baseline row becomes a dashed reference line.
pub fn render_sweep_plots(rows: &[SweepRow], out: &Path) -> Result<()> {
    let metrics: [(&str, fn(&SweepRow) -> f64); 4] = [
        ("dsc", |r| r.dsc),
        ("miou", |r| r.miou),
        ("hd95", |r| r.hd95),
        ("asd", |r| r.asd),
    ];
    let baseline = rows.iter().find(|r| r.sigma.is_none());
    let cells: Vec<&SweepRow> = rows.iter().filter(|r| r.sigma.is_some()).collect();
    let mut sigmas: Vec<f64> = cells.iter().filter_map(|r| r.sigma).collect();
    sigmas.sort_by(|a, b| a.partial_cmp(b).unwrap());
    sigmas.dedup();
    let sweep_over_sigma = sigmas.len() > 1;

    for (name, get) in metrics {
        let mut series: Vec<Series> = Vec::new();
        if sweep_over_sigma {
            let mut ps: Vec<usize> = cells.iter().map(|r| r.p).collect();
            ps.sort();
            ps.dedup();
            for p in ps {
                let mut pts: Vec<(f64, f64)> = cells
                    .iter()
                    .filter(|r| r.p == p)
                    .map(|r| (r.sigma.unwrap(), get(r)))
                    .collect();
                pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
                series.push(Series {
                    label: format!("p={p}"),
                    points: pts,
                });
            }
        } else {
            let mut pts: Vec<(f64, f64)> =
                cells.iter().map(|r| (r.p as f64, get(r))).collect();
            pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            series.push(Series {
                label: "MIMIC".into(),
                points: pts,
            });
        }
        let plot = LinePlot {
            title: format!(
                "{} vs {}",
                name.to_uppercase(),
                if sweep_over_sigma { "sigma" } else { "p" }
            ),
            x_label: if sweep_over_sigma { "sigma" } else { "p" }.into(),
            y_label: name.to_uppercase(),
            series,
            baseline: baseline.map(|b| ("baseline".to_string(), get(b))),
        };
        plot.write(&out.join(format!("{name}.svg")))?;
    }
    Ok(())
}
