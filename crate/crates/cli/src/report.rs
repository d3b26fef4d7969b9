use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{ArgGroup, Args};
use less_core::analysis::pearson;
use less_core::grpo::{align_policy_evals, load_policy_evals, surrogate_loss, GrpoConfig};
use less_core::rollout::load_rollout_groups;
use less_core::simulator::{compare_runs, read_metrics_trace, summarize_run, Comparison, RunSummary};

use crate::{create_output, open_input};

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("action").required(true).args(["compare", "correlate", "loss"])))]
pub struct ReportArgs {
    /// Directory of simulator metrics traces to summarize per mode.
    #[arg(long, value_name = "DIR")]
    compare: Option<PathBuf>,
    /// Whitespace- or comma-separated `x y` pairs, one per line.
    #[arg(long, value_name = "FILE")]
    correlate: Option<PathBuf>,
    /// Recompute the clipped surrogate from --shaped and --logprobs.
    #[arg(long, requires_all = ["shaped", "logprobs"])]
    loss: bool,
    /// Shaped-advantage file for --loss.
    #[arg(long, value_name = "FILE")]
    shaped: Option<PathBuf>,
    /// Log-probability file (`#less-logprobs v1`) for --loss.
    #[arg(long, value_name = "FILE")]
    logprobs: Option<PathBuf>,
    #[arg(long, default_value_t = 0.2)]
    epsilon_low: f64,
    #[arg(long, default_value_t = 0.28)]
    epsilon_high: f64,
    /// KL penalty weight; requires `ref` log-probabilities when positive.
    #[arg(long, default_value_t = 0.0)]
    kl_coeff: f64,
    /// Seed-majority threshold for --compare, as `wins/seeds`.
    #[arg(long, default_value_t = 0.8)]
    majority: f64,
    /// Largest tolerated LESS accuracy deficit for --compare.
    #[arg(long, default_value_t = 0.02)]
    accuracy_tolerance: f64,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

pub fn run(args: ReportArgs) -> anyhow::Result<()> {
    let mut sink: Box<dyn Write> = match &args.out {
        Some(p) => Box::new(create_output(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    if let Some(dir) = &args.compare {
        compare(dir, &args, &mut sink)?;
    } else if let Some(path) = &args.correlate {
        correlate(path, &mut sink)?;
    } else {
        loss(&args, &mut sink)?;
    }
    sink.flush()?;
    Ok(())
}

fn load_runs(dir: &Path) -> anyhow::Result<Vec<RunSummary>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("cannot read {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "metrics"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(less_core::Error::Domain(format!("no .metrics traces in {}", dir.display())).into());
    }
    paths
        .iter()
        .map(|p| {
            let metrics = read_metrics_trace(open_input(p)?).with_context(|| format!("reading {}", p.display()))?;
            summarize_run(&metrics).with_context(|| format!("summarizing {}", p.display()))
        })
        .collect()
}

fn compare<W: Write + ?Sized>(dir: &Path, args: &ReportArgs, w: &mut W) -> anyhow::Result<()> {
    let runs = load_runs(dir)?;
    writeln!(
        w,
        "{:<5} {:>6} {:>9} {:>8} {:>8} {:>12}",
        "mode", "seed", "accuracy", "worst@8", "std@8", "overlap_co"
    )?;
    for r in &runs {
        writeln!(
            w,
            "{:<5} {:>6} {:>9.4} {:>8.4} {:>8.4} {:>12.4}",
            r.mode.as_str(),
            r.seed,
            r.final_accuracy,
            r.final_worst,
            r.final_std,
            r.final_overlap
        )?;
    }
    let c = compare_runs(&runs);
    writeln!(w)?;
    writeln!(
        w,
        "{:<5} {:>6} {:>9} {:>8} {:>8} {:>12}",
        "mode", "runs", "accuracy", "worst@8", "std@8", "overlap_co"
    )?;
    for (name, m) in [("grpo", &c.grpo), ("less", &c.less)] {
        writeln!(
            w,
            "{name:<5} {:>6} {:>9.4} {:>8.4} {:>8.4} {:>12.4}",
            m.runs, m.accuracy, m.worst, m.std, m.overlap
        )?;
    }
    write_outcome(w, &c, args.majority, args.accuracy_tolerance)?;
    Ok(())
}

fn write_outcome<W: Write + ?Sized>(w: &mut W, c: &Comparison, majority: f64, tolerance: f64) -> std::io::Result<()> {
    let n = c.paired_seeds.len();
    writeln!(w)?;
    writeln!(w, "paired seeds: {n}")?;
    writeln!(w, "less > grpo on overlap_correct_only: {}/{n}", c.less_wins_overlap)?;
    writeln!(w, "less > grpo on worst@8: {}/{n}", c.less_wins_worst)?;
    writeln!(w, "accuracy gap (less - grpo): {:+.4}", c.accuracy_gap)?;
    let need = c.wins_needed(majority);
    let holds = c.less_majority(majority, tolerance);
    writeln!(
        w,
        "seed majority (>= {need}/{n} on both, gap >= -{tolerance}): {}",
        if holds { "yes" } else { "no" }
    )
}

fn read_pairs<R: BufRead>(source: R) -> less_core::Result<(Vec<f64>, Vec<f64>)> {
    let (mut xs, mut ys) = (Vec::new(), Vec::new());
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = text
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .collect();
        let parsed: Option<Vec<f64>> = fields.iter().map(|f| f.parse().ok()).collect();
        match parsed.as_deref() {
            Some(&[x, y]) if x.is_finite() && y.is_finite() => {
                xs.push(x);
                ys.push(y);
            }
            _ => {
                return Err(less_core::Error::Parse {
                    line: idx + 1,
                    message: format!("expected two finite numbers, found `{text}`"),
                })
            }
        }
    }
    Ok((xs, ys))
}

fn correlate<W: Write + ?Sized>(path: &PathBuf, w: &mut W) -> anyhow::Result<()> {
    let (xs, ys) = read_pairs(open_input(path)?).with_context(|| format!("reading {}", path.display()))?;
    let c = pearson(&xs, &ys)?;
    writeln!(w, "n {}", c.n)?;
    writeln!(w, "r {:.6}", c.r)?;
    writeln!(w, "p {:.6e}", c.p)?;
    Ok(())
}

fn loss<W: Write + ?Sized>(args: &ReportArgs, w: &mut W) -> anyhow::Result<()> {
    let (Some(shaped), Some(logprobs)) = (&args.shaped, &args.logprobs) else {
        unreachable!("clap requires --shaped and --logprobs with --loss");
    };
    let groups = load_rollout_groups(open_input(shaped)?).with_context(|| format!("reading {}", shaped.display()))?;
    let evals = load_policy_evals(open_input(logprobs)?).with_context(|| format!("reading {}", logprobs.display()))?;
    let evals = align_policy_evals(&groups, evals).with_context(|| format!("matching {}", logprobs.display()))?;
    let config = GrpoConfig {
        epsilon_low: args.epsilon_low,
        epsilon_high: args.epsilon_high,
        kl_coeff: args.kl_coeff,
        ..GrpoConfig::default()
    };

    writeln!(
        w,
        "{:<24} {:>14} {:>14} {:>12} {:>10}",
        "query_id", "loss", "objective", "kl", "clip_frac"
    )?;
    let mut total = 0.0;
    for (g, ev) in groups.iter().zip(&evals) {
        let out = surrogate_loss(g, ev, &config)?;
        total += out.loss;
        writeln!(
            w,
            "{:<24} {:>14.8} {:>14.8} {:>12.8} {:>10.4}",
            g.query_id, out.loss, out.objective, out.kl, out.clip_fraction
        )?;
    }
    let mean = if groups.is_empty() {
        0.0
    } else {
        total / groups.len() as f64
    };
    writeln!(w, "mean loss over {} groups: {mean:.8}", groups.len())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairs_accept_commas_spaces_and_comments() {
        let (xs, ys) = read_pairs("# acc overlap\n0.1, 0.2\n0.3 0.4\n\n0.5\t0.6\n".as_bytes()).unwrap();
        assert_eq!(xs, vec![0.1, 0.3, 0.5]);
        assert_eq!(ys, vec![0.2, 0.4, 0.6]);
    }

    #[test]
    fn pairs_errors_name_the_line() {
        let err = read_pairs("1 2\n3\n".as_bytes()).unwrap_err();
        assert!(matches!(err, less_core::Error::Parse { line: 2, .. }));
        assert!(read_pairs("1 nan\n".as_bytes()).is_err());
    }
}
