//! Desk-scale testbed: a hashed tabular softmax policy on chain arithmetic,
//! trained with plain group-relative advantages or with segment shaping.
//!
//! Metrics traces are line-delimited JSON under a `#less-metrics v1` header,
//! one line per training step.

pub mod policy;
pub mod task;
pub mod train;

use std::io::{BufRead, Write};

pub use policy::{ChainPrior, Context, Decision, PriorConfig, TabularSoftmax, ToyPolicy, Trajectory};
pub use task::{ChainTask, Instance, TaskConfig};
pub use train::{
    batch_loss_and_grad, evaluate, generate_rollouts, sample_scores, train, train_policy, AdvantageMass, EvalMetrics,
    GroupBatch, Mode, StepMetrics, TrainConfig, TrainOutcome, EVAL_K,
};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "#less-metrics v1";

pub fn write_metrics_trace<W: Write>(metrics: &[StepMetrics], mut sink: W) -> Result<()> {
    writeln!(sink, "{METRICS_HEADER}")?;
    for m in metrics {
        let line = serde_json::to_string(m).map_err(|e| Error::domain(e.to_string()))?;
        writeln!(sink, "{line}")?;
    }
    sink.flush()?;
    Ok(())
}

pub fn read_metrics_trace<R: BufRead>(source: R) -> Result<Vec<StepMetrics>> {
    let mut out = Vec::new();
    let mut saw_header = false;
    for (idx, line) in source.lines().enumerate() {
        let line = line?;
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        if !saw_header {
            if line.trim_end() != METRICS_HEADER {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected `{METRICS_HEADER}` header"),
                });
            }
            saw_header = true;
            continue;
        }
        let m: StepMetrics = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        out.push(m);
    }
    Ok(out)
}

/// End-of-run figures used to compare modes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub mode: Mode,
    pub seed: u64,
    /// avg@8 of the last evaluation.
    pub final_accuracy: f64,
    /// worst@8 of the last evaluation.
    pub final_worst: f64,
    pub final_std: f64,
    /// Correct-only overlap averaged over the last tenth of the steps.
    pub final_overlap: f64,
}

pub fn summarize_run(metrics: &[StepMetrics]) -> Result<RunSummary> {
    let last = metrics.last().ok_or_else(|| Error::domain("empty metrics trace"))?;
    let eval = metrics
        .iter()
        .rev()
        .find_map(StepMetrics::eval)
        .ok_or_else(|| Error::domain("metrics trace has no evaluation"))?;
    let tail = (metrics.len() / 10).max(1);
    let window = &metrics[metrics.len() - tail..];
    Ok(RunSummary {
        mode: last.mode,
        seed: last.seed,
        final_accuracy: eval.avg,
        final_worst: eval.worst,
        final_std: eval.std,
        final_overlap: window.iter().map(|m| m.overlap_correct_only).sum::<f64>() / tail as f64,
    })
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ModeMeans {
    pub runs: usize,
    pub accuracy: f64,
    pub worst: f64,
    pub std: f64,
    pub overlap: f64,
}

/// LESS against GRPO over seeds present in both modes.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Comparison {
    pub grpo: ModeMeans,
    pub less: ModeMeans,
    pub paired_seeds: Vec<u64>,
    /// Paired seeds where LESS is strictly higher.
    pub less_wins_overlap: usize,
    pub less_wins_worst: usize,
    /// Seed-mean final accuracy of LESS minus that of GRPO, over paired seeds.
    pub accuracy_gap: f64,
}

impl Comparison {
    /// Paired seeds LESS must win, on each metric, to clear `fraction`.
    pub fn wins_needed(&self, fraction: f64) -> usize {
        (fraction * self.paired_seeds.len() as f64 - 1e-9).ceil().max(0.0) as usize
    }

    /// At least `fraction` of the paired seeds favour LESS on both overlap
    /// and worst@8, and LESS accuracy is no more than `tolerance` lower.
    pub fn less_majority(&self, fraction: f64, tolerance: f64) -> bool {
        let need = self.wins_needed(fraction);
        !self.paired_seeds.is_empty()
            && self.less_wins_overlap >= need
            && self.less_wins_worst >= need
            && self.accuracy_gap >= -tolerance
    }
}

pub fn compare_runs(runs: &[RunSummary]) -> Comparison {
    let means = |mode: Mode| {
        let sel: Vec<&RunSummary> = runs.iter().filter(|r| r.mode == mode).collect();
        let n = sel.len();
        if n == 0 {
            return ModeMeans::default();
        }
        let avg = |f: fn(&RunSummary) -> f64| sel.iter().map(|r| f(r)).sum::<f64>() / n as f64;
        ModeMeans {
            runs: n,
            accuracy: avg(|r| r.final_accuracy),
            worst: avg(|r| r.final_worst),
            std: avg(|r| r.final_std),
            overlap: avg(|r| r.final_overlap),
        }
    };
    let mut out = Comparison {
        grpo: means(Mode::Grpo),
        less: means(Mode::Less),
        ..Comparison::default()
    };
    let mut gap = 0.0;
    for g in runs.iter().filter(|r| r.mode == Mode::Grpo) {
        let Some(l) = runs.iter().find(|r| r.mode == Mode::Less && r.seed == g.seed) else {
            continue;
        };
        out.paired_seeds.push(g.seed);
        out.less_wins_overlap += usize::from(l.final_overlap > g.final_overlap);
        out.less_wins_worst += usize::from(l.final_worst > g.final_worst);
        gap += l.final_accuracy - g.final_accuracy;
    }
    if !out.paired_seeds.is_empty() {
        out.accuracy_gap = gap / out.paired_seeds.len() as f64;
    }
    out
}
