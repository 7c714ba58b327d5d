//! `mcvi`: runs the shipped experiments and writes CSV results, an SVG chart
//! and the final parameters.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or config error.

mod config;
mod output;

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use mcvi::experiments::{run, ExperimentConfig, RunOutput};
use mcvi::optimize::stream_rng;
use rand::RngCore;
use rayon::prelude::*;

use config::{canonical_key, ConfigError, Settings, SWEEP_AXES};

#[derive(Parser)]
#[command(name = "mcvi", version, about = "Markov chain variational inference experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// Flat `key = value` config file.
    config: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default: the config `out`, else `out`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Runs one experiment.
    Run {
        #[command(flatten)]
        common: Common,
    },
    /// Runs one experiment per value of an axis (steps or T, leapfrog, mixture_k).
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        axis: String,
        /// Comma-separated axis values.
        #[arg(long)]
        values: String,
        /// Sweep points run at once.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.0)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<mcvi::Error> for Failure {
    fn from(e: mcvi::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { common } => run_command(&common),
        Command::Sweep {
            common,
            axis,
            values,
            jobs,
        } => sweep_command(&common, &axis, &values, jobs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("mcvi: config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("mcvi: run failed: {msg}");
            ExitCode::from(1)
        }
    }
}

fn settings(common: &Common) -> Result<Settings, Failure> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| Failure::Config(format!("cannot read {}: {e}", common.config.display())))?;
    let mut s = Settings::parse(&text).map_err(|e| Failure::Config(format!("{}: {e}", common.config.display())))?;
    if let Some(seed) = common.seed {
        let seed = i64::try_from(seed).map_err(|_| Failure::Config("seed must be below 2^63".into()))?;
        s.set_value("seed", toml::Value::Integer(seed))?;
    }
    for a in &common.set {
        s.set(a)?;
    }
    Ok(s)
}

fn resolve(common: &Common) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let (cfg, out) = settings(common)?.resolve()?;
    Ok((cfg, common.out.clone().unwrap_or(out)))
}

/// `results.csv`, `summary.csv`, `params.txt` and `config.txt` of one run.
fn write_run(dir: &Path, cfg: &ExperimentConfig, out: &RunOutput) -> Result<(), Failure> {
    fs::create_dir_all(dir)?;
    output::write_run_csv(&dir.join("results.csv"), &out.rows)?;
    output::write_summary_csv(&dir.join("summary.csv"), out)?;
    fs::write(dir.join("params.txt"), out.params.to_text())?;
    fs::write(dir.join("config.txt"), config::to_text(cfg))?;
    Ok(())
}

fn run_command(common: &Common) -> Result<(), Failure> {
    let (cfg, dir) = resolve(common)?;
    let out = run(&cfg)?;
    write_run(&dir, &cfg, &out)?;
    let csv = dir.join("results.csv");
    let series = output::read_series(&csv, "iteration", output::run_series(cfg.experiment))?;
    fs::write(dir.join("chart.svg"), output::line_chart(cfg.experiment.name(), "iteration", &series))?;
    for (k, v) in &out.summary {
        println!("{k} = {v}");
    }
    println!("wrote {}", dir.display());
    Ok(())
}

fn parse_values(values: &str) -> Result<Vec<usize>, Failure> {
    let parsed = values
        .split(',')
        .map(str::trim)
        .filter(|v| !v.is_empty())
        .map(|v| v.parse::<usize>().map_err(|_| Failure::Config(format!("sweep value {v:?} is not a count"))))
        .collect::<Result<Vec<_>, _>>()?;
    if parsed.is_empty() {
        return Err(Failure::Config("sweep needs at least one value".into()));
    }
    Ok(parsed)
}

fn sweep_command(common: &Common, axis: &str, values: &str, jobs: usize) -> Result<(), Failure> {
    let axis = canonical_key(axis);
    if !SWEEP_AXES.contains(&axis) {
        return Err(Failure::Config(format!(
            "axis {axis:?} is not sweepable (use one of {})",
            SWEEP_AXES.join(", ")
        )));
    }
    if jobs == 0 {
        return Err(Failure::Config("--jobs must be at least 1".into()));
    }
    let values = parse_values(values)?;
    let base = settings(common)?;
    let (base_cfg, dir) = resolve(common)?;
    let seed = base_cfg.train.seed;
    let points = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let mut s = base.clone();
            s.set(&format!("{axis}={v}"))?;
            let point_seed = stream_rng(seed, &[i as u64]).next_u64() >> 1;
            s.set_value("seed", toml::Value::Integer(point_seed as i64))?;
            let (cfg, _) = s.resolve()?;
            Ok((v, cfg))
        })
        .collect::<Result<Vec<_>, ConfigError>>()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| Failure::Runtime(e.to_string()))?;
    let outputs = pool.install(|| {
        points
            .par_iter()
            .map(|(v, cfg)| run(cfg).map(|out| (*v, out)))
            .collect::<mcvi::Result<Vec<_>>>()
    })?;
    fs::create_dir_all(&dir)?;
    for ((v, cfg), (_, out)) in points.iter().zip(&outputs) {
        write_run(&dir.join(format!("{axis}-{v}")), cfg, out)?;
    }
    let csv = dir.join("results.csv");
    output::write_sweep_csv(&csv, axis, &outputs)?;
    let series = output::read_series(&csv, axis, output::sweep_series(base_cfg.experiment))?;
    let title = format!("{} over {axis}", base_cfg.experiment);
    fs::write(dir.join("chart.svg"), output::line_chart(&title, axis, &series))?;
    fs::write(
        dir.join("config.txt"),
        format!(
            "# sweep {axis} over {}\n{}",
            values.iter().map(ToString::to_string).collect::<Vec<_>>().join(","),
            config::to_text(&base_cfg)
        ),
    )?;
    println!("wrote {} points to {}", outputs.len(), dir.display());
    Ok(())
}
