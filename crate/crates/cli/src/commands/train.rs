//! `train`: optimize the model on a preprocessed cache.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use mimic_core::train::{train_prepared, PreparedDataset, TrainConfig, TrainReport};

use crate::cache::read_cache;
use crate::checkpoint::{self, CheckpointMeta};
use crate::report::{write_history, write_metric_report, write_selected_views};
use crate::rundir;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Preprocessed cache directory.
    #[arg(long)]
    pub cache: PathBuf,
    /// Output run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Flat key = value config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Inline overrides, e.g. --set sigma=0.3 (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
}

/// Build the effective config from defaults, a config file, and overrides.
pub fn effective_config(
    config: Option<&Path>,
    sets: &[String],
    cache_patch: usize,
    cache_size: usize,
    cache_order: &str,
) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::default();
    // the cache pins preprocessing-derived keys unless explicitly overridden
    cfg.patch_size = cache_patch;
    cfg.image_size = cache_size;
    cfg.channel_order = mimic_core::views::ChannelOrder::parse(cache_order)?;
    if let Some(path) = config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        cfg.apply_kv_lines(&text)?;
    }
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set {kv}: expected KEY=VALUE"))?;
        cfg.apply_kv(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Load a cache and assemble the dataset under `cfg`.
pub fn load_prepared(cache: &Path, cfg: &TrainConfig) -> Result<(PreparedDataset, bool)> {
    let (meta, slices) = read_cache(cache)?;
    meta.check_compatible(cfg)?;
    if meta.fn_scope == "global" && cfg.augment {
        bail!(
            "cache was built with global frequency normalization; on-the-fly \
             augmentation would recompute cubes with per-cube statistics. \
             Set augment = false or rebuild the cache with per-cube scope."
        );
    }
    let dataset = PreparedDataset::from_slices(slices, cfg, meta.drop_empty)?;
    Ok((dataset, meta.drop_empty))
}

/// Persist everything a run produces under `out`.
pub fn write_outputs(out: &Path, cfg: &TrainConfig, report: &TrainReport) -> Result<()> {
    rundir::write_snapshot(out, cfg)?;
    write_history(&out.join("history.csv"), report)?;
    write_selected_views(&out.join("selected_views.csv"), report)?;
    write_metric_report(&out.join("test_metrics.csv"), cfg.variant.label(), &report.test)?;
    checkpoint::save(
        &out.join("best.ckpt"),
        &CheckpointMeta {
            config: cfg.clone(),
            epoch: report.best_epoch,
            val: report
                .history
                .get(report.best_epoch)
                .map(|r| r.val.clone())
                .unwrap_or(mimic_core::train::ValMetrics {
                    dsc: f64::NAN,
                    miou: f64::NAN,
                    hd95: f64::NAN,
                    asd: f64::NAN,
                }),
        },
        &report.best_weights,
    )?;
    Ok(())
}

pub fn run(args: &TrainArgs) -> Result<()> {
    let (meta, _) = read_cache(&args.cache)?;
    let cfg = effective_config(
        args.config.as_deref(),
        &args.sets,
        meta.patch_size,
        meta.image_size,
        &meta.channel_order,
    )?;
    let out = rundir::resolve(args.out.as_deref(), "train")?;
    let (dataset, _) = load_prepared(&args.cache, &cfg)?;
    println!(
        "train: {} train / {} val / {} test slices, variant {}, sigma {}, p {}",
        dataset.train.len(),
        dataset.val.len(),
        dataset.test.len(),
        cfg.variant.label(),
        cfg.sigma,
        cfg.patch_size
    );
    let (_model, report) = train_prepared(&cfg, &dataset)?;
    write_outputs(&out, &cfg, &report)?;
    println!(
        "train: {} epochs ({}), best val DSC {:.4} at epoch {}, test DSC {:.4} -> {}",
        report.history.len(),
        if report.stopped_early {
            "early-stopped"
        } else {
            "completed"
        },
        report.best_val_dsc,
        report.best_epoch,
        report.test.dsc,
        out.display()
    );
    Ok(())
}
