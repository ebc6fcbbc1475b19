//! File exports: per-point reconstruction tables, optimizer traces, JSON and
//! SVG overlays.

use std::fs;
use std::path::Path;

use serde::Serialize;

use super::plot::{line_chart, Series};
use crate::error::Result;
use crate::forward::Dataset;
use crate::inference::Reconstruction;

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

/// `x,g,truth,mean,sd`; `truth` is left blank when the dataset has none.
pub fn write_reconstruction_csv(
    path: &Path,
    dataset: &Dataset,
    rec: &Reconstruction,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["x", "g", "truth", "mean", "sd"])?;
    let sd = rec.sd();
    for (i, &x) in dataset.coarse_grid.points().iter().enumerate() {
        let truth = dataset
            .coarse_truth
            .get(i)
            .map(|v| v.to_string())
            .unwrap_or_default();
        w.write_record([
            x.to_string(),
            dataset.measurements[i].to_string(),
            truth,
            rec.posterior_mean[i].to_string(),
            sd[i].to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `iteration,objective`.
pub fn write_trace_csv(path: &Path, trace: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iteration", "objective"])?;
    for (i, v) in trace.iter().enumerate() {
        w.write_record([i.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Reconstruction and truth over the measurement (top panel), and the log
/// length-scale field (bottom panel), as two files `<stem>_fit.svg` and
/// `<stem>_field.svg`.
pub fn write_svg_overlays(
    dir: &Path,
    stem: &str,
    dataset: &Dataset,
    fits: &[(&str, &Reconstruction)],
) -> Result<()> {
    const COLORS: [&str; 4] = ["#d62728", "#1f77b4", "#2ca02c", "#9467bd"];
    let x = dataset.coarse_grid.points();
    let mut series = vec![Series {
        label: "measurement",
        x,
        y: &dataset.measurements,
        color: "#999999",
        dashed: true,
    }];
    if dataset.has_truth() {
        series.push(Series {
            label: "truth",
            x,
            y: &dataset.coarse_truth,
            color: "black",
            dashed: false,
        });
    }
    for (k, (label, rec)) in fits.iter().enumerate() {
        series.push(Series {
            label,
            x,
            y: &rec.posterior_mean,
            color: COLORS[k % COLORS.len()],
            dashed: false,
        });
    }
    let title = format!(
        "tau = {}, noise = {}%",
        dataset.true_tau,
        100.0 * dataset.noise_percent
    );
    fs::write(
        dir.join(format!("{stem}_fit.svg")),
        line_chart(&title, &series),
    )?;

    let fields: Vec<Series> = fits
        .iter()
        .enumerate()
        .map(|(k, (label, rec))| Series {
            label,
            x,
            y: rec.hp_map.log_ell.as_slice(),
            color: COLORS[k % COLORS.len()],
            dashed: false,
        })
        .collect();
    fs::write(
        dir.join(format!("{stem}_field.svg")),
        line_chart("log length-scale", &fields),
    )?;
    Ok(())
}
