//! Diagnostics over segmented groups: overlap ratios by correctness
//! category, Pearson correlation, the incorrect/correct entropy ratio and
//! the avg@k / worst@k / std@k sampling metrics.
//!
//! Overlap ratios are token-mass weighted. A registry entry is
//!
//! * correct-only when `n_r ≥ 2` and `n_w = 0`,
//! * incorrect-only when `n_w ≥ 2` and `n_r = 0`,
//! * shared when `n_r ≥ 1` and `n_w ≥ 1`,
//! * a singleton when `n_r + n_w = 1`.
//!
//! The mass of a category is the number of segment tokens covered by
//! witnesses of its entries; each ratio divides by the total segment token
//! mass of the group. `all` is one minus the singleton share. Segment
//! tokens no witness reaches (a span strictly inside a longer entry from
//! another response) count as singleton mass, so the four masses always sum
//! to the total.

use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::registry::{SegmentRegistry, SegmentStats};
use crate::rollout::RolloutGroup;
use crate::segmentation::EntropyStructures;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OverlapCategory {
    CorrectOnly,
    Shared,
    IncorrectOnly,
    Singleton,
}

impl OverlapCategory {
    pub fn of(entry: &SegmentStats) -> Self {
        Self::from_counts(entry.n_correct, entry.n_incorrect)
    }

    pub fn from_counts(n_correct: usize, n_incorrect: usize) -> Self {
        match (n_correct, n_incorrect) {
            (r, w) if r >= 1 && w >= 1 => OverlapCategory::Shared,
            (r, 0) if r >= 2 => OverlapCategory::CorrectOnly,
            (0, w) if w >= 2 => OverlapCategory::IncorrectOnly,
            _ => OverlapCategory::Singleton,
        }
    }

    fn slot(self) -> usize {
        self as usize
    }
}

/// Token masses behind one overlap row.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OverlapMasses {
    /// All segment tokens of the group.
    pub total: usize,
    pub correct_only: usize,
    pub shared: usize,
    pub incorrect_only: usize,
    /// Singleton-entry tokens plus segment tokens no witness covers.
    pub singleton: usize,
}

/// Number of registry entries per category.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EntryCounts {
    pub correct_only: usize,
    pub shared: usize,
    pub incorrect_only: usize,
    pub singleton: usize,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OverlapRatios {
    pub all: f64,
    pub correct_only: f64,
    pub shared: f64,
    pub incorrect_only: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OverlapRow {
    pub masses: OverlapMasses,
    pub entries: EntryCounts,
}

impl OverlapRow {
    /// True when the group has no segment tokens; ratios are then all zero.
    pub fn empty_denominator(&self) -> bool {
        self.masses.total == 0
    }

    pub fn ratios(&self) -> OverlapRatios {
        let m = &self.masses;
        if m.total == 0 {
            return OverlapRatios::default();
        }
        let t = m.total as f64;
        OverlapRatios {
            all: 1.0 - m.singleton as f64 / t,
            correct_only: m.correct_only as f64 / t,
            shared: m.shared as f64 / t,
            incorrect_only: m.incorrect_only as f64 / t,
        }
    }

    fn accumulate(&mut self, other: &OverlapRow) {
        let (m, o) = (&mut self.masses, &other.masses);
        m.total += o.total;
        m.correct_only += o.correct_only;
        m.shared += o.shared;
        m.incorrect_only += o.incorrect_only;
        m.singleton += o.singleton;
        let (e, o) = (&mut self.entries, &other.entries);
        e.correct_only += o.correct_only;
        e.shared += o.shared;
        e.incorrect_only += o.incorrect_only;
        e.singleton += o.singleton;
    }
}

/// Per-group rows plus their mass-weighted aggregate.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct OverlapReport {
    pub rows: Vec<(String, OverlapRow)>,
    pub aggregate: OverlapRow,
}

impl OverlapReport {
    pub fn push(&mut self, query_id: impl Into<String>, row: OverlapRow) {
        self.aggregate.accumulate(&row);
        self.rows.push((query_id.into(), row));
    }
}

/// Sums masses and entry counts over rows.
pub fn aggregate_rows<'a>(rows: impl IntoIterator<Item = &'a OverlapRow>) -> OverlapRow {
    let mut acc = OverlapRow::default();
    for r in rows {
        acc.accumulate(r);
    }
    acc
}

/// Overlap row for one group whose registry was built from `structures`.
pub fn overlap_ratios(
    group: &RolloutGroup,
    structures: &[EntropyStructures],
    registry: &SegmentRegistry,
) -> OverlapRow {
    let mut row = OverlapRow::default();
    row.masses.total = structures.iter().map(EntropyStructures::seg_token_count).sum();

    // One category slot per token; the first witness to claim a token wins,
    // which keeps the category masses disjoint.
    let mut claimed: Vec<Vec<bool>> = group.responses.iter().map(|r| vec![false; r.len()]).collect();
    let mut mass = [0usize; 4];
    let mut count = [0usize; 4];
    for entry in registry.entries() {
        let cat = OverlapCategory::of(entry);
        count[cat.slot()] += 1;
        for w in &entry.occurrences {
            let Some(tokens) = claimed.get_mut(w.response_index) else {
                continue;
            };
            let end = (w.start + entry.key.len()).min(tokens.len());
            for t in &mut tokens[w.start..end] {
                if !*t {
                    *t = true;
                    mass[cat.slot()] += 1;
                }
            }
        }
    }

    use OverlapCategory::*;
    row.masses.correct_only = mass[CorrectOnly.slot()];
    row.masses.shared = mass[Shared.slot()];
    row.masses.incorrect_only = mass[IncorrectOnly.slot()];
    row.masses.singleton =
        row.masses.total - mass[CorrectOnly.slot()] - mass[Shared.slot()] - mass[IncorrectOnly.slot()];
    row.entries = EntryCounts {
        correct_only: count[CorrectOnly.slot()],
        shared: count[Shared.slot()],
        incorrect_only: count[IncorrectOnly.slot()],
        singleton: count[Singleton.slot()],
    };
    row
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correlation {
    pub r: f64,
    /// Two-sided p-value from Student's t with `n − 2` degrees of freedom.
    pub p: f64,
    pub n: usize,
}

/// Pearson product-moment correlation with a two-sided t-test p-value.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Result<Correlation> {
    if xs.len() != ys.len() {
        return Err(Error::domain(format!("{} xs but {} ys", xs.len(), ys.len())));
    }
    let n = xs.len();
    if n < 3 {
        return Err(Error::domain(format!("correlation needs at least 3 pairs, got {n}")));
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return Err(Error::domain("non-finite value in correlation input"));
    }
    let nf = n as f64;
    let mx = xs.iter().sum::<f64>() / nf;
    let my = ys.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        let (dx, dy) = (x - mx, y - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::UndefinedCorrelation(
            "one of the inputs has zero variance".into(),
        ));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(Correlation {
        r,
        p: correlation_p_value(r, n),
        n,
    })
}

/// Two-sided p-value of `t = r·sqrt((n−2)/(1−r²))` under Student's t with
/// `n − 2` degrees of freedom, via `P(|T| ≥ t) = I_{df/(df+t²)}(df/2, 1/2)`.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let one_minus_r2 = 1.0 - r * r;
    if one_minus_r2 <= 0.0 {
        return 0.0;
    }
    let t2 = r * r * df / one_minus_r2;
    beta_reg(df / 2.0, 0.5, df / (df + t2))
}

/// Mean entropy of incorrect responses over that of correct ones, each side
/// averaged per response first. `None` for one-sided groups or when the
/// correct side has zero mean entropy.
pub fn entropy_ratio(group: &RolloutGroup) -> Option<f64> {
    let mut sums = [0.0f64; 2];
    let mut counts = [0usize; 2];
    for r in &group.responses {
        let mean = r.entropies().iter().sum::<f64>() / r.len() as f64;
        let side = usize::from(r.correct());
        sums[side] += mean;
        counts[side] += 1;
    }
    if counts[0] == 0 || counts[1] == 0 {
        return None;
    }
    let wrong = sums[0] / counts[0] as f64;
    let right = sums[1] / counts[1] as f64;
    if right <= 0.0 {
        return None;
    }
    Some(wrong / right)
}

/// avg@k, worst@k and std@k over a prompts × samples score matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingMetrics {
    pub k: usize,
    /// Mean score over all prompt/sample pairs.
    pub avg: f64,
    /// Mean over prompts of the lowest of the `k` sample scores.
    pub worst: f64,
    /// Mean over prompts of the population std of the `k` sample scores.
    pub std: f64,
}

/// Metrics over the first `k` samples of every prompt, so smaller `k`
/// evaluate nested prefixes of the same draw.
pub fn sampling_metrics(scores: &[Vec<f64>], k: usize) -> Result<SamplingMetrics> {
    if k == 0 {
        return Err(Error::domain("k must be at least 1"));
    }
    if scores.is_empty() {
        return Err(Error::domain("no prompts to score"));
    }
    let (mut avg, mut worst, mut std) = (0.0, 0.0, 0.0);
    for (p, row) in scores.iter().enumerate() {
        if row.len() < k {
            return Err(Error::domain(format!(
                "prompt {p} has {} samples, fewer than k = {k}",
                row.len()
            )));
        }
        let s = &row[..k];
        let mean = s.iter().sum::<f64>() / k as f64;
        avg += mean;
        worst += s.iter().copied().fold(f64::INFINITY, f64::min);
        std += (s.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / k as f64).sqrt();
    }
    let n = scores.len() as f64;
    Ok(SamplingMetrics {
        k,
        avg: avg / n,
        worst: worst / n,
        std: std / n,
    })
}
