use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use hierdeconv::experiments::{
    fit_nonstationary, fit_nonstationary_from, grid_search_alpha_with, run_baseline_stationary,
    run_experiment, score, write_json, write_reconstruction_csv, write_svg_overlays,
    write_trace_csv, ExperimentReport, MapFitter, RunConfig,
};
use hierdeconv::forward::{simulate, DatasetFile};
use hierdeconv::{Dataset, Error, PriorConfig, PriorKind, Reconstruction};

#[derive(Parser)]
#[command(
    name = "hierdeconv",
    version,
    about = "Blind hierarchical deconvolution of 1-D signals"
)]
struct Cli {
    /// Run configuration (JSON); defaults are used when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Restrict output to one format.
    #[arg(long, global = true, value_enum)]
    format: Option<Format>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Csv,
    Json,
    Svg,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one dataset.
    Simulate {
        #[arg(long, default_value_t = 0.25)]
        tau: f64,
        /// Noise level as a fraction of the peak measurement.
        #[arg(long, default_value_t = 0.01)]
        noise: f64,
    },
    /// Non-stationary fit of one dataset at one α, or over the configured
    /// α grid when `--alpha` is omitted (needs the simulated truth).
    Fit {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        prior: Option<PriorKind>,
        #[arg(long)]
        alpha: Option<f64>,
    },
    /// Stationary fit of one dataset.
    Baseline {
        #[arg(long)]
        data: PathBuf,
    },
    /// Full (τ, noise) grid with α search and baselines.
    Experiment,
    /// Re-render the report table from a finished experiment.
    Report,
}

struct StderrLog;

impl log::Log for StderrLog {
    fn enabled(&self, m: &log::Metadata) -> bool {
        m.level() <= log::Level::Warn
    }

    fn log(&self, r: &log::Record) {
        if self.enabled(r.metadata()) {
            eprintln!("{}: {}", r.level().as_str().to_lowercase(), r.args());
        }
    }

    fn flush(&self) {}
}

fn is_config_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_)
            | Error::Json(_)
            | Error::GridMismatch { .. }
            | Error::InvalidGrid(_)
            | Error::InvalidSmoothness(_)
            | Error::UnsupportedSmoothness(_)
            | Error::InvalidTau(_)
    )
}

fn wants(format: Option<Format>, f: Format) -> bool {
    format.is_none_or(|g| g == f)
}

fn load_dataset(path: &Path) -> hierdeconv::Result<Dataset> {
    let file: DatasetFile = serde_json::from_str(&fs::read_to_string(path)?)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    Dataset::from_file(file)
}

fn emit(
    out: &Path,
    stem: &str,
    format: Option<Format>,
    dataset: &Dataset,
    rec: &Reconstruction,
) -> hierdeconv::Result<()> {
    if wants(format, Format::Csv) {
        write_reconstruction_csv(&out.join(format!("{stem}.csv")), dataset, rec)?;
        write_trace_csv(&out.join(format!("{stem}_trace.csv")), &rec.objective_trace)?;
    }
    if wants(format, Format::Json) {
        write_json(&out.join(format!("{stem}.json")), &rec.to_file(false))?;
    }
    if wants(format, Format::Svg) {
        write_svg_overlays(out, stem, dataset, &[(stem, rec)])?;
    }
    let mse = score(dataset, rec)
        .map(|m| format!("{m:.3}%"))
        .unwrap_or_else(|_| "n/a".into());
    println!(
        "tau_hat {:.4}  rel_mse {mse}  objective {:.4}  iterations {}",
        rec.tau_hat, rec.final_objective, rec.iterations
    );
    Ok(())
}

fn run(cli: Cli) -> hierdeconv::Result<ExitCode> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = o.clone();
    }
    cfg.validate()?;
    let out = cfg.output_dir.clone();

    match cli.command {
        Command::Simulate { tau, noise } => {
            let d = simulate(&cfg.signal, cfg.fine_n, cfg.coarse_n, tau, noise, cfg.seed)?;
            fs::create_dir_all(&out)?;
            if wants(cli.format, Format::Json) {
                write_json(&out.join("dataset.json"), &d.to_file())?;
            }
            if wants(cli.format, Format::Csv) {
                let mut w = csv::Writer::from_path(out.join("dataset.csv"))?;
                w.write_record(["x", "g", "truth"])?;
                for ((x, g), t) in d
                    .coarse_grid
                    .points()
                    .iter()
                    .zip(&d.measurements)
                    .zip(&d.coarse_truth)
                {
                    w.write_record([x.to_string(), g.to_string(), t.to_string()])?;
                }
                w.flush()?;
            }
            if wants(cli.format, Format::Svg) {
                write_svg_overlays(&out, "dataset", &d, &[])?;
            }
            println!("sigma {:.6e}  seed {}", d.noise_sigma, d.seed);
        }
        Command::Fit { data, prior, alpha } => {
            let d = load_dataset(&data)?;
            let mut p: PriorConfig = cfg.prior;
            if let Some(k) = prior {
                p.kind = k;
            }
            fs::create_dir_all(&out)?;
            let start = if cfg.warm_start {
                Some(run_baseline_stationary(&d, &cfg.opt, &cfg.matern, cfg.seed)?.hp_map)
            } else {
                None
            };
            let rec = match alpha {
                Some(a) => {
                    p.alpha = a;
                    p.validate()?;
                    match &start {
                        Some(s) => {
                            fit_nonstationary_from(&d, &p, &cfg.opt, &cfg.matern, cfg.seed, s)?
                        }
                        None => fit_nonstationary(&d, &p, &cfg.opt, &cfg.matern, cfg.seed)?,
                    }
                }
                None => {
                    let fitter = MapFitter {
                        opt: cfg.opt,
                        matern: cfg.matern,
                        seed: cfg.seed,
                        start,
                    };
                    let search = grid_search_alpha_with(&d, &p, &cfg.alpha_grid, &fitter)?;
                    println!("alpha_best {}", search.alpha_best);
                    search.best
                }
            };
            emit(&out, p.kind.label(), cli.format, &d, &rec)?;
        }
        Command::Baseline { data } => {
            let d = load_dataset(&data)?;
            fs::create_dir_all(&out)?;
            let rec = run_baseline_stationary(&d, &cfg.opt, &cfg.matern, cfg.seed)?;
            emit(&out, "stationary", cli.format, &d, &rec)?;
        }
        Command::Experiment => {
            let report = run_experiment(&cfg)?;
            print!("{}", report.to_table());
            println!("note: {}", report.note);
            if report.any_failed() {
                return Ok(ExitCode::from(3));
            }
        }
        Command::Report => {
            let report = ExperimentReport::load(&out)?;
            if wants(cli.format, Format::Csv) {
                fs::write(out.join("report.csv"), report.to_csv()?)?;
            }
            print!("{}", report.to_table());
            if report.any_failed() {
                return Ok(ExitCode::from(3));
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    static LOGGER: StderrLog = StderrLog;
    let _ = log::set_logger(&LOGGER).map(|()| log::set_max_level(log::LevelFilter::Warn));
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if is_config_error(&e) { 2 } else { 1 })
        }
    }
}
