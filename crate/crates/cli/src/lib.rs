//! Command-line front end: distance sweeps, stability runs, calibration and
//! analysis of measured observables, writing CSV, JSON and SVG artifacts.

pub mod config;
pub mod plot;
pub mod tables;

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use mmfqkd_core::analysis::{cell_stats, CellStats};
use mmfqkd_core::calibrate::{calibrate, CalibrationReport, CalibrationSpec};
use mmfqkd_core::channel::LaunchKind;
use mmfqkd_core::domain::{Basis, IntensityClass};
use mmfqkd_core::experiment::{run_stability, run_sweep, skr_table, SkrRow, StabilitySpec, SweepSpec};
use mmfqkd_core::{Error, Execution};
use serde::Serialize;

use config::{LaunchSelection, Overrides, RunConfig};
use plot::{Plot, Series};

pub const EXIT_OK: u8 = 0;
pub const EXIT_CONFIG: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_CALIBRATION: u8 = 3;

#[derive(Debug, Parser)]
#[command(name = "mmfqkd", version, about = "Decoy-state QKD over multimode fibre: simulation and key-rate analysis")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    #[command(flatten)]
    pub flags: Flags,
}

#[derive(Debug, Clone, Args)]
pub struct Flags {
    /// Flat JSON config; flags override its keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Comma-separated distances in km.
    #[arg(long, global = true, value_delimiter = ',', num_args = 1..)]
    pub distances: Option<Vec<f64>>,
    #[arg(long, global = true, value_enum)]
    pub launch: Option<LaunchSelection>,
    /// Trials per distance.
    #[arg(long, global = true)]
    pub trials: Option<usize>,
    /// Stability run length in seconds.
    #[arg(long, global = true)]
    pub duration: Option<f64>,
    /// Stability step in seconds.
    #[arg(long, global = true)]
    pub step: Option<f64>,
    /// Run everything on the calling thread.
    #[arg(long, global = true)]
    pub sequential: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Distance sweep: observables.csv, skr.csv, summary.json and plots.
    Sweep,
    /// QBER and gain time series under drift: stability.csv, summary.json and plots.
    Stability,
    /// Fit the free knobs to the anchor values; writes calibrated_config.json.
    Calibrate,
    /// Key rates from a measured observables CSV.
    Analyze {
        /// CSV with distance_km, basis, launch, qber, gain and optionally intensity, trial, loss_db.
        input: PathBuf,
    },
    /// Regenerate the SVG plots from the CSVs already in the output directory.
    Plot,
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    fn config(error: anyhow::Error) -> Self {
        Self { code: EXIT_CONFIG, error }
    }

    /// Invalid-parameter errors from the model count as configuration problems.
    fn classify(error: anyhow::Error) -> Self {
        let code = match error.downcast_ref::<Error>() {
            Some(Error::Config(_)) => EXIT_CONFIG,
            _ => EXIT_RUNTIME,
        };
        Self { code, error }
    }
}

pub fn run(cli: Cli) -> Result<(), Failure> {
    let exec = if cli.flags.sequential { Execution::Sequential } else { Execution::Parallel };
    let f = &cli.flags;
    let overrides = Overrides {
        seed: f.seed,
        out_dir: f.out.clone(),
        distances_km: f.distances.clone(),
        launch: f.launch,
        trials: f.trials,
        duration_s: f.duration,
        step_s: f.step,
    };
    if let Command::Plot = cli.command {
        let out = f.out.clone().unwrap_or_else(|| RunConfig::default().out_dir);
        return regenerate_plots(&out).map_err(Failure::classify);
    }
    let cfg = RunConfig::load(f.config.as_deref(), &overrides).map_err(Failure::config)?;
    match cli.command {
        Command::Sweep => cmd_sweep(&cfg, exec).map_err(Failure::classify),
        Command::Stability => {
            let spec = stability_spec(&cfg, f).map_err(Failure::config)?;
            cmd_stability(&cfg, &spec, exec).map_err(Failure::classify)
        }
        Command::Calibrate => {
            let report = cmd_calibrate(&cfg, exec).map_err(Failure::classify)?;
            if report.converged {
                Ok(())
            } else {
                Err(Failure {
                    code: EXIT_CALIBRATION,
                    error: anyhow::anyhow!("calibration did not converge after {} sweeps; best-so-far parameters written", report.sweeps),
                })
            }
        }
        Command::Analyze { input } => {
            let rows = File::open(&input)
                .with_context(|| format!("opening {}", input.display()))
                .and_then(|f| tables::read_observables(BufReader::new(f)))
                .with_context(|| format!("parsing {}", input.display()))
                .map_err(Failure::config)?;
            cmd_analyze(&cfg, &rows).map_err(Failure::classify)
        }
        Command::Plot => unreachable!("handled above"),
    }
}

/// Stability takes its distance and launch from the config, or from a single-valued flag.
fn stability_spec(cfg: &RunConfig, f: &Flags) -> anyhow::Result<StabilitySpec> {
    let distance_km = match f.distances.as_deref() {
        None => cfg.stability_distance_km,
        Some([d]) => *d,
        Some(ds) => bail!("stability takes one distance, got {ds:?}"),
    };
    let launch = match f.launch {
        None => cfg.stability_launch,
        Some(LaunchSelection::Underfill) => LaunchKind::Underfill,
        Some(LaunchSelection::Adapter) => LaunchKind::Adapter,
        Some(LaunchSelection::Both) => bail!("stability takes a single launch kind"),
    };
    let spec = StabilitySpec { distance_km, launch, duration_s: cfg.duration_s, step_s: cfg.step_s, trial: 0, acquisition: cfg.acquisition() };
    spec.validate()?;
    Ok(spec)
}

fn prepare_out(dir: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_file(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> anyhow::Result<()>) -> anyhow::Result<()> {
    let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut w = BufWriter::new(file);
    f(&mut w)?;
    w.flush().with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> anyhow::Result<()> {
    write_file(path, |w| {
        serde_json::to_writer_pretty(&mut *w, v)?;
        w.write_all(b"\n")?;
        Ok(())
    })
}

#[derive(Serialize)]
struct SweepSummary<'a> {
    command: &'static str,
    config: serde_json::Value,
    rows: usize,
    empty_vacuum_cells: usize,
    misaligned_cells: usize,
    cells: &'a [CellStats],
    skr: &'a [SkrRow],
}

pub fn cmd_sweep(cfg: &RunConfig, exec: Execution) -> anyhow::Result<()> {
    prepare_out(&cfg.out_dir)?;
    let spec = SweepSpec { distances_km: cfg.distances_km.clone(), launches: cfg.launch.kinds(), trials: cfg.trials, acquisition: cfg.acquisition() };
    let out = run_sweep(&cfg.model, &spec, cfg.seed, exec)?;
    write_file(&cfg.out_dir.join("observables.csv"), |w| tables::write_observables(w, &out.rows))?;
    write_file(&cfg.out_dir.join("skr.csv"), |w| tables::write_skr(w, &out.skr))?;
    let cells = cell_stats(&out.rows);
    write_json(
        &cfg.out_dir.join("summary.json"),
        &SweepSummary {
            command: "sweep",
            config: serde_json::to_value(cfg)?,
            rows: out.rows.len(),
            empty_vacuum_cells: out.empty_vacuum_cells,
            misaligned_cells: out.misaligned_cells,
            cells: &cells,
            skr: &out.skr,
        },
    )?;
    regenerate_plots(&cfg.out_dir)
}

pub fn cmd_stability(cfg: &RunConfig, spec: &StabilitySpec, exec: Execution) -> anyhow::Result<()> {
    prepare_out(&cfg.out_dir)?;
    let out = run_stability(&cfg.model, spec, cfg.seed, exec)?;
    write_file(&cfg.out_dir.join("stability.csv"), |w| tables::write_stability(w, &out.points))?;
    write_json(
        &cfg.out_dir.join("summary.json"),
        &serde_json::json!({ "command": "stability", "config": cfg, "spec": spec, "offsets": out.offsets, "stats": out.stats }),
    )?;
    regenerate_plots(&cfg.out_dir)
}

pub fn cmd_calibrate(cfg: &RunConfig, exec: Execution) -> anyhow::Result<CalibrationReport> {
    prepare_out(&cfg.out_dir)?;
    let defaults = CalibrationSpec::default();
    let spec = CalibrationSpec {
        trials: cfg.trials,
        stability: StabilitySpec {
            distance_km: cfg.stability_distance_km,
            launch: cfg.stability_launch,
            duration_s: cfg.duration_s,
            step_s: cfg.step_s,
            ..defaults.stability
        },
        max_sweeps: cfg.calibration_max_sweeps,
        ..defaults
    };
    let report = calibrate(&cfg.model, &spec, cfg.seed, exec)?;
    let calibrated = RunConfig { model: report.params.clone(), ..cfg.clone() };
    write_file(&cfg.out_dir.join("calibrated_config.json"), |w| Ok(w.write_all(calibrated.to_json()?.as_bytes())?))?;
    write_json(
        &cfg.out_dir.join("summary.json"),
        &serde_json::json!({
            "command": "calibrate",
            "converged": report.converged,
            "sweeps": report.sweeps,
            "objective": report.objective,
            "residuals": report.residuals,
            "spec": spec,
        }),
    )?;
    Ok(report)
}

pub fn cmd_analyze(cfg: &RunConfig, rows: &[mmfqkd_core::analysis::LinkObservables]) -> anyhow::Result<()> {
    prepare_out(&cfg.out_dir)?;
    let skr = skr_table(rows, &cfg.model)?;
    write_file(&cfg.out_dir.join("skr.csv"), |w| tables::write_skr(w, &skr))?;
    write_json(&cfg.out_dir.join("summary.json"), &serde_json::json!({ "command": "analyze", "rows": rows.len(), "skr": skr }))?;
    let plot = skr_plot(&skr);
    fs::write(cfg.out_dir.join("skr_vs_loss.svg"), plot.to_svg())?;
    Ok(())
}

fn launch_series(cells: &[CellStats], basis: Basis, launch: LaunchKind, pick: impl Fn(&CellStats) -> (f64, f64)) -> Series {
    let points = cells
        .iter()
        .filter(|c| c.basis == basis && c.launch == launch && c.intensity == IntensityClass::Signal)
        .map(|c| {
            let (m, e) = pick(c);
            (c.distance_km, m, e)
        })
        .collect();
    Series { name: launch.to_string(), points }
}

fn skr_plot(skr: &[SkrRow]) -> Plot {
    let mut series = Vec::new();
    for launch in LaunchKind::ALL {
        let points: Vec<_> = skr.iter().filter(|r| r.launch == launch).map(|r| (r.equivalent_loss_db, r.skr_bps, 0.0)).collect();
        if !points.is_empty() {
            series.push(Series { name: launch.to_string(), points });
        }
    }
    Plot {
        title: "Secure key rate".into(),
        x_label: "equivalent loss (dB)".into(),
        y_label: "SKR (bit/s)".into(),
        log_y: true,
        scatter: false,
        series,
    }
}

/// Rebuild every plot whose source CSV exists in `dir`.
pub fn regenerate_plots(dir: &Path) -> anyhow::Result<()> {
    let obs = dir.join("observables.csv");
    if obs.exists() {
        let rows = tables::read_observables(BufReader::new(File::open(&obs)?)).with_context(|| format!("reading {}", obs.display()))?;
        let cells = cell_stats(&rows);
        for basis in Basis::ALL {
            let lower = basis.as_str().to_ascii_lowercase();
            let qber = Plot {
                title: format!("{basis}-basis QBER"),
                x_label: "distance (km)".into(),
                y_label: "QBER".into(),
                log_y: false,
                scatter: false,
                series: LaunchKind::ALL.iter().map(|&l| launch_series(&cells, basis, l, |c| (c.qber.mean, c.qber.sdom))).filter(|s| !s.points.is_empty()).collect(),
            };
            fs::write(dir.join(format!("qber_{lower}_vs_distance.svg")), qber.to_svg())?;
            let gain = Plot {
                title: format!("{basis}-basis gain"),
                x_label: "distance (km)".into(),
                y_label: "gain".into(),
                log_y: true,
                scatter: false,
                series: LaunchKind::ALL.iter().map(|&l| launch_series(&cells, basis, l, |c| (c.gain.mean, c.gain.sdom))).filter(|s| !s.points.is_empty()).collect(),
            };
            fs::write(dir.join(format!("gain_{lower}_vs_distance.svg")), gain.to_svg())?;
        }
    }
    let skr = dir.join("skr.csv");
    if skr.exists() {
        let rows = tables::read_skr(BufReader::new(File::open(&skr)?)).with_context(|| format!("reading {}", skr.display()))?;
        fs::write(dir.join("skr_vs_loss.svg"), skr_plot(&rows).to_svg())?;
    }
    let stab = dir.join("stability.csv");
    if stab.exists() {
        let points = tables::read_stability(BufReader::new(File::open(&stab)?)).with_context(|| format!("reading {}", stab.display()))?;
        for (name, log_y, pick) in [("qber", false, (|p: &mmfqkd_core::experiment::StabilityPoint| p.qber) as fn(&_) -> f64), ("gain", true, |p| p.gain)] {
            let series = Basis::ALL
                .iter()
                .map(|&b| Series { name: format!("{b} basis"), points: points.iter().filter(|p| p.basis == b).map(|p| (p.time_s / 3600.0, pick(p), 0.0)).collect() })
                .filter(|s| !s.points.is_empty())
                .collect();
            let plot = Plot { title: format!("{} over time", name.to_uppercase()), x_label: "time (h)".into(), y_label: name.into(), log_y, scatter: true, series };
            fs::write(dir.join(format!("stability_{name}.svg")), plot.to_svg())?;
        }
    }
    Ok(())
}
