use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

mod analyze;
mod report;
mod shape;
mod simulate;

const THREADS_ENV: &str = "LESS_SHAPER_THREADS";

/// Low-entropy segment shaping of token advantages: shape rollout files,
/// analyze segment overlap, run the toy trainer and summarize results.
#[derive(Parser, Debug)]
#[command(name = "less-shaper", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute base and shaped advantages for every response of a rollout file.
    Shape(shape::ShapeArgs),
    /// Overlap ratios by correctness category, optionally with registry dumps.
    Analyze(analyze::AnalyzeArgs),
    /// Train the toy policy on chain arithmetic and write metrics traces.
    Simulate(simulate::SimulateArgs),
    /// Compare simulator runs, correlate paired values or recompute a loss.
    Report(report::ReportArgs),
}

/// Entropy segmentation flags shared by several subcommands.
#[derive(Args, Debug, Clone, Copy)]
pub struct SegmentationArgs {
    /// Per-response entropy quantile h; tokens at or above it are high-entropy.
    #[arg(long, default_value_t = 0.8, value_parser = parse_quantile)]
    pub quantile: f64,
    /// Minimum low-entropy run length μ for a segment.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub min_seg_len: u64,
}

fn parse_quantile(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if (0.0..=1.0).contains(&v) {
        Ok(v)
    } else {
        Err(format!("{v} is outside [0, 1]"))
    }
}

pub fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{v} must be a positive finite number"))
    }
}

pub fn open_input(path: &PathBuf) -> anyhow::Result<std::io::BufReader<std::fs::File>> {
    let file = std::fs::File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    Ok(std::io::BufReader::new(file))
}

pub fn create_output(path: &PathBuf) -> anyhow::Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let file = std::fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(std::io::BufWriter::new(file))
}

fn configure_threads() -> Result<(), String> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got `{raw}`"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<less_core::Error>() {
        Some(less_core::Error::Divergence { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Err(msg) = configure_threads() {
        eprintln!("error: {msg}");
        return ExitCode::from(1);
    }

    let result = match cli.command {
        Command::Shape(args) => shape::run(args),
        Command::Analyze(args) => analyze::run(args),
        Command::Simulate(args) => simulate::run(args),
        Command::Report(args) => report::run(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_kind() {
        let diverged = anyhow::Error::from(less_core::Error::Divergence {
            step: 3,
            message: "loss NaN".into(),
        });
        assert_eq!(exit_code(&diverged.context("seed 1")), 3);
        let parse = anyhow::Error::from(less_core::Error::Parse {
            line: 2,
            message: "bad".into(),
        });
        assert_eq!(exit_code(&parse), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("io")), 2);
    }

    #[test]
    fn value_parsers_bound_inputs() {
        assert_eq!(parse_quantile("0.8"), Ok(0.8));
        assert!(parse_quantile("1.01").is_err());
        assert!(parse_positive("0").is_err());
        assert!(parse_positive("inf").is_err());
    }
}
