use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::fit::{run_baseline_stationary, score};
use super::output::{write_json, write_reconstruction_csv, write_svg_overlays, write_trace_csv};
use super::search::{
    check_alpha_grid, default_alpha_grid, grid_search_alpha_with, AlphaTrial, MapFitter,
};
use crate::covariance::MaternConfig;
use crate::error::{Error, Result};
use crate::forward::{simulate, Dataset, SignalSpec};
use crate::hyperpriors::PriorConfig;
use crate::inference::Reconstruction;
use crate::optimizer::OptConfig;

/// Everything needed to reproduce an experiment grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub signal: SignalSpec,
    pub fine_n: usize,
    pub coarse_n: usize,
    pub tau_list: Vec<f64>,
    /// Noise levels as fractions of the peak noiseless measurement.
    pub noise_list: Vec<f64>,
    /// Prior family and settings; `alpha` is overridden by the grid search.
    pub prior: PriorConfig,
    pub alpha_grid: Vec<f64>,
    pub opt: OptConfig,
    pub matern: MaternConfig,
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Start every non-stationary fit at the stationary baseline's optimum.
    pub warm_start: bool,
    pub write_svg: bool,
    /// Fill the `seconds` report column; off by default so that reports are
    /// byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            signal: SignalSpec::default(),
            fine_n: 300,
            coarse_n: 100,
            tau_list: vec![0.25, 0.5],
            noise_list: vec![0.01, 0.05],
            prior: PriorConfig::default(),
            alpha_grid: default_alpha_grid(),
            opt: OptConfig::default(),
            matern: MaternConfig::default(),
            seed: 1,
            output_dir: PathBuf::from("results"),
            warm_start: true,
            write_svg: true,
            record_wall_time: false,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        self.prior.validate()?;
        self.opt.validate()?;
        self.matern.validate()?;
        check_alpha_grid(&self.alpha_grid)?;
        if self.tau_list.is_empty() || self.noise_list.is_empty() {
            return Err(Error::Config(
                "tau_list and noise_list must be non-empty".into(),
            ));
        }
        if self.tau_list.iter().any(|t| !(*t > 0.0) || !t.is_finite()) {
            return Err(Error::Config("tau_list values must be positive".into()));
        }
        if self
            .noise_list
            .iter()
            .any(|s| !(*s >= 0.0) || !s.is_finite())
        {
            return Err(Error::Config("noise_list values must be >= 0".into()));
        }
        if self.coarse_n < 2 || !self.fine_n.is_multiple_of(self.coarse_n) {
            return Err(Error::GridMismatch {
                fine: self.fine_n,
                coarse: self.coarse_n,
            });
        }
        Ok(())
    }

    /// Simulates the dataset of cell `(tau_index, noise_index)`.
    pub fn dataset(&self, tau_index: usize, noise_index: usize) -> Result<Dataset> {
        simulate(
            &self.signal,
            self.fine_n,
            self.coarse_n,
            self.tau_list[tau_index],
            self.noise_list[noise_index],
            cell_seed(self.seed, tau_index, noise_index),
        )
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Noise seed of one cell; depends on nothing but its arguments.
pub fn cell_seed(seed: u64, tau_index: usize, noise_index: usize) -> u64 {
    splitmix64(seed ^ splitmix64(((tau_index as u64) << 32) | noise_index as u64))
}

/// One report row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub tau_true: f64,
    /// Noise level in percent.
    pub noise_percent: f64,
    /// `cauchy`, `tv` or `stationary`.
    pub prior: String,
    pub alpha: Option<f64>,
    pub tau_hat: Option<f64>,
    pub rel_mse_percent: Option<f64>,
    pub wall_time_seconds: f64,
    pub iterations: Option<usize>,
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alpha_trials: Vec<AlphaTrial>,
}

impl CellRecord {
    fn new(dataset: &Dataset, prior: &str) -> Self {
        CellRecord {
            tau_true: dataset.true_tau,
            noise_percent: 100.0 * dataset.noise_percent,
            prior: prior.to_string(),
            alpha: None,
            tau_hat: None,
            rel_mse_percent: None,
            wall_time_seconds: 0.0,
            iterations: None,
            error: None,
            alpha_trials: Vec::new(),
        }
    }

    fn fill(&mut self, dataset: &Dataset, rec: &Reconstruction) {
        match score(dataset, rec) {
            Ok(m) => self.rel_mse_percent = Some(m),
            Err(e) => self.error = Some(e.to_string()),
        }
        self.tau_hat = Some(rec.tau_hat);
        self.iterations = Some(rec.iterations);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    /// Non-stationary fits, one per (τ, noise) cell in config order.
    pub cells: Vec<CellRecord>,
    /// Stationary baseline fits, same order.
    pub baselines: Vec<CellRecord>,
    /// Reminder that α was chosen against the simulated truth.
    pub note: String,
    #[serde(default)]
    pub record_wall_time: bool,
}

pub const ORACLE_NOTE: &str =
    "alpha was selected by minimising error against the simulated ground truth; \
     this is not available for measured data";

impl ExperimentReport {
    pub fn any_failed(&self) -> bool {
        self.cells
            .iter()
            .chain(&self.baselines)
            .any(|c| c.error.is_some() || c.rel_mse_percent.is_none())
    }

    /// Rows interleave each cell with its baseline.
    pub fn rows(&self) -> impl Iterator<Item = &CellRecord> {
        self.cells
            .iter()
            .zip(&self.baselines)
            .flat_map(|(c, b)| [c, b])
    }

    pub fn to_csv(&self) -> Result<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "tau_true",
            "noise_percent",
            "prior",
            "alpha",
            "tau_hat",
            "rel_mse_percent",
            "seconds",
            "iterations",
        ])?;
        for r in self.rows() {
            let seconds = if self.record_wall_time {
                format!("{:.3}", r.wall_time_seconds)
            } else {
                String::new()
            };
            w.write_record([
                r.tau_true.to_string(),
                r.noise_percent.to_string(),
                r.prior.clone(),
                opt(r.alpha),
                opt(r.tau_hat),
                opt(r.rel_mse_percent),
                seconds,
                r.iterations.map(|i| i.to_string()).unwrap_or_default(),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Plain-text table for terminals.
    pub fn to_table(&self) -> String {
        let mut out = format!(
            "{:>8} {:>7} {:>10} {:>9} {:>8} {:>9} {:>6}\n",
            "tau", "noise%", "prior", "alpha", "tau_hat", "relMSE%", "iters"
        );
        let f = |v: Option<f64>, p: usize| v.map_or("-".to_string(), |x| format!("{x:.p$}"));
        for r in self.rows() {
            out.push_str(&format!(
                "{:>8} {:>7} {:>10} {:>9} {:>8} {:>9} {:>6}{}\n",
                r.tau_true,
                r.noise_percent,
                r.prior,
                f(r.alpha, 4),
                f(r.tau_hat, 4),
                f(r.rel_mse_percent, 3),
                r.iterations.map_or("-".to_string(), |i| i.to_string()),
                r.error
                    .as_ref()
                    .map_or(String::new(), |e| format!("  error: {e}")),
            ));
        }
        out
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::write(dir.join("report.csv"), self.to_csv()?)?;
        write_json(&dir.join("report.json"), self)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("report.json"))?;
        Ok(serde_json::from_str(&text)?)
    }
}

type CellRecordPair = (CellRecord, CellRecord);

/// Results of one (τ, noise) cell, before writing.
pub struct CellResult {
    pub tau_index: usize,
    pub noise_index: usize,
    pub dataset: Dataset,
    pub record: CellRecord,
    pub baseline_record: CellRecord,
    pub fit: Option<Reconstruction>,
    pub baseline: Option<Reconstruction>,
}

/// Runs one cell: the stationary baseline, then the α search.
pub fn run_cell(cfg: &RunConfig, tau_index: usize, noise_index: usize) -> Result<CellResult> {
    let dataset = cfg.dataset(tau_index, noise_index)?;
    let seed = cell_seed(cfg.seed, tau_index, noise_index);

    let mut baseline_record = CellRecord::new(&dataset, "stationary");
    let t = Instant::now();
    let baseline = match run_baseline_stationary(&dataset, &cfg.opt, &cfg.matern, seed) {
        Ok(rec) => {
            baseline_record.fill(&dataset, &rec);
            Some(rec)
        }
        Err(e) => {
            log::warn!("baseline failed for cell ({tau_index}, {noise_index}): {e}");
            baseline_record.error = Some(e.to_string());
            None
        }
    };
    baseline_record.wall_time_seconds = t.elapsed().as_secs_f64();

    let mut record = CellRecord::new(&dataset, cfg.prior.kind.label());
    let fitter = MapFitter {
        opt: cfg.opt,
        matern: cfg.matern,
        seed,
        start: baseline
            .as_ref()
            .filter(|_| cfg.warm_start)
            .map(|b| b.hp_map.clone()),
    };
    let t = Instant::now();
    let fit = match grid_search_alpha_with(&dataset, &cfg.prior, &cfg.alpha_grid, &fitter) {
        Ok(search) => {
            record.fill(&dataset, &search.best);
            record.alpha = Some(search.alpha_best);
            record.alpha_trials = search.trials;
            Some(search.best)
        }
        Err(e) => {
            log::warn!("alpha search failed for cell ({tau_index}, {noise_index}): {e}");
            record.error = Some(e.to_string());
            None
        }
    };
    record.wall_time_seconds = t.elapsed().as_secs_f64();

    Ok(CellResult {
        tau_index,
        noise_index,
        dataset,
        record,
        baseline_record,
        fit,
        baseline,
    })
}

fn write_cell(cfg: &RunConfig, cell: &CellResult) -> Result<()> {
    let dir = &cfg.output_dir;
    let stem = format!("cell_{}_{}", cell.tau_index, cell.noise_index);
    let label = cfg.prior.kind.label();
    let mut fits = Vec::new();
    if let Some(rec) = &cell.fit {
        write_reconstruction_csv(&dir.join(format!("{stem}_{label}.csv")), &cell.dataset, rec)?;
        write_trace_csv(
            &dir.join(format!("{stem}_{label}_trace.csv")),
            &rec.objective_trace,
        )?;
        write_json(
            &dir.join(format!("{stem}_{label}.json")),
            &rec.to_file(false),
        )?;
        fits.push((label, rec));
    }
    if let Some(rec) = &cell.baseline {
        write_reconstruction_csv(
            &dir.join(format!("{stem}_stationary.csv")),
            &cell.dataset,
            rec,
        )?;
        write_trace_csv(
            &dir.join(format!("{stem}_stationary_trace.csv")),
            &rec.objective_trace,
        )?;
        write_json(
            &dir.join(format!("{stem}_stationary.json")),
            &rec.to_file(false),
        )?;
        fits.push(("stationary", rec));
    }
    write_json(
        &dir.join(format!("{stem}_data.json")),
        &cell.dataset.to_file(),
    )?;
    if cfg.write_svg {
        write_svg_overlays(dir, &stem, &cell.dataset, &fits)?;
    }
    Ok(())
}

/// Runs every (τ, noise) cell, writes per-cell artifacts and the report.
///
/// Cells run in parallel but the report is assembled in config order, so the
/// output does not depend on scheduling.
pub fn run_experiment(cfg: &RunConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.output_dir)?;
    write_json(&cfg.output_dir.join("config.json"), cfg)?;

    let keys: Vec<(usize, usize)> = (0..cfg.tau_list.len())
        .flat_map(|t| (0..cfg.noise_list.len()).map(move |n| (t, n)))
        .collect();
    let results: Vec<Result<CellRecordPair>> = keys
        .par_iter()
        .map(|&(t, n)| {
            let cell = run_cell(cfg, t, n)?;
            write_cell(cfg, &cell)?;
            Ok((cell.record, cell.baseline_record))
        })
        .collect();

    let mut report = ExperimentReport {
        cells: Vec::with_capacity(keys.len()),
        baselines: Vec::with_capacity(keys.len()),
        note: ORACLE_NOTE.to_string(),
        record_wall_time: cfg.record_wall_time,
    };
    for r in results {
        let (cell, baseline) = r?;
        report.cells.push(cell);
        report.baselines.push(baseline);
    }
    report.write(&cfg.output_dir)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trip_and_unknown_keys() {
        let cfg = RunConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(RunConfig::from_json("{}").unwrap(), cfg);
        assert!(matches!(
            RunConfig::from_json(r#"{"bogus": 1}"#),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_json(r#"{"alpha_grid": [1.0, 0.5]}"#).is_err());
        assert!(RunConfig::from_json(r#"{"tau_list": []}"#).is_err());
        assert!(RunConfig::from_json(r#"{"fine_n": 300, "coarse_n": 7}"#).is_err());
    }

    #[test]
    fn cell_seeds_are_pure_and_distinct() {
        assert_eq!(cell_seed(1, 0, 1), cell_seed(1, 0, 1));
        let seeds = [
            cell_seed(1, 0, 0),
            cell_seed(1, 0, 1),
            cell_seed(1, 1, 0),
            cell_seed(1, 1, 1),
        ];
        for i in 0..4 {
            for j in 0..i {
                assert_ne!(seeds[i], seeds[j]);
            }
        }
        assert_ne!(cell_seed(1, 0, 0), cell_seed(2, 0, 0));
    }

    #[test]
    fn csv_header_and_blank_seconds() {
        let rec = CellRecord {
            tau_true: 0.25,
            noise_percent: 1.0,
            prior: "cauchy".into(),
            alpha: Some(0.1),
            tau_hat: Some(0.24),
            rel_mse_percent: Some(3.5),
            wall_time_seconds: 12.5,
            iterations: Some(40),
            error: None,
            alpha_trials: Vec::new(),
        };
        let mut report = ExperimentReport {
            cells: vec![rec.clone()],
            baselines: vec![CellRecord {
                prior: "stationary".into(),
                alpha: None,
                ..rec
            }],
            note: ORACLE_NOTE.into(),
            record_wall_time: false,
        };
        let csv = report.to_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(
            lines[0],
            "tau_true,noise_percent,prior,alpha,tau_hat,rel_mse_percent,seconds,iterations"
        );
        assert_eq!(lines[1], "0.25,1,cauchy,0.1,0.24,3.5,,40");
        assert_eq!(lines[2], "0.25,1,stationary,,0.24,3.5,,40");
        assert!(!report.any_failed());
        report.record_wall_time = true;
        assert!(report.to_csv().unwrap().contains(",12.500,"));
        report.baselines[0].error = Some("boom".into());
        assert!(report.any_failed());
    }
}
