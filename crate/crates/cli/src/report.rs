//! Shared report emission: history CSV, metric tables, selected-view logs.

use std::path::Path;

use anyhow::Result;
use mimic_core::metrics::{MetricReport, SurfaceDistances};
use mimic_core::train::TrainReport;

use crate::table::{fmt, CsvWriter};

/// Per-epoch history: schedule, loss components, validation metrics.
pub fn write_history(path: &Path, report: &TrainReport) -> Result<()> {
    let mut csv = CsvWriter::new(&[
        "epoch", "lr", "bce", "dice", "contrastive", "mi", "total", "val_dsc", "val_miou",
        "val_hd95", "val_asd",
    ]);
    for rec in &report.history {
        csv.row(&[
            rec.epoch.to_string(),
            format!("{:.8e}", rec.lr),
            fmt(rec.loss.bce),
            fmt(rec.loss.dice),
            fmt(rec.loss.contrastive),
            fmt(rec.loss.mi),
            fmt(rec.loss.total),
            fmt(rec.val.dsc),
            fmt(rec.val.miou),
            fmt(rec.val.hd95),
            fmt(rec.val.asd),
        ]);
    }
    csv.write(path)
}

/// Long-format selected-view log, one row per (epoch, selected view), for
/// frequency-usage histograms.
pub fn write_selected_views(path: &Path, report: &TrainReport) -> Result<()> {
    let mut csv = CsvWriter::new(&["epoch", "view_index"]);
    for rec in &report.history {
        for &v in &rec.selected_views {
            csv.row(&[rec.epoch.to_string(), v.to_string()]);
        }
    }
    csv.write(path)
}

/// Per-slice metric rows plus an aggregate line.
pub fn write_metric_report(path: &Path, label: &str, report: &MetricReport) -> Result<()> {
    let mut csv = CsvWriter::new(&["slice", "dsc", "miou", "hd95", "asd"]);
    for (slice, dsc, miou, sd) in &report.per_slice {
        let (hd, asd) = match sd {
            SurfaceDistances::Defined { hd95, asd } => (fmt(*hd95), fmt(*asd)),
            SurfaceDistances::Undefined => ("undefined".to_string(), "undefined".to_string()),
        };
        csv.row(&[slice.clone(), fmt(*dsc), fmt(*miou), hd, asd]);
    }
    csv.row(&[
        format!("mean[{label}]"),
        fmt(report.dsc),
        fmt(report.miou),
        fmt(report.hd95),
        fmt(report.asd),
    ]);
    csv.write(path)
}

/// Method-per-row summary table mirroring the standard four-metric layout.
pub fn summary_table(rows: &[(String, f64, f64, f64, f64)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>8} {:>8} {:>8} {:>8}\n",
        "Method", "DSC", "mIoU", "HD95", "ASD"
    ));
    out.push_str(&"-".repeat(52));
    out.push('\n');
    for (label, dsc, miou, hd95, asd) in rows {
        out.push_str(&format!(
            "{label:<16} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            dsc, miou, hd95, asd
        ));
    }
    out
}
