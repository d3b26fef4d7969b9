//! Correctness-aware rescaling of token advantages.
//!
//! With `A` the response's group-relative advantage, `N_r`/`N_w` the number
//! of correct/incorrect responses in the group and `(n_r, n_w)` the counts of
//! the registry entry covering a segment token:
//!
//! | token                                   | shaped value      |
//! |-----------------------------------------|-------------------|
//! | high-entropy                            | `A`               |
//! | fragment, correct response              | `A / N_r`         |
//! | fragment, incorrect response            | `A / N_w`         |
//! | segment, `n_r > 0`, `n_w > 0`           | `0`               |
//! | segment, `n_r > 0`, `n_w = 0`           | `(n_r / N_r) · A` |
//! | segment, `n_r = 0`, `n_w > 0`           | `(n_w / N_w) · A` |
//!
//! A segment that was deduplicated away (strictly contained in a longer
//! segment of another response) has no entry of its own and is shaped with
//! the fragment rule.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::registry::{build_registry, SegmentRegistry, SegmentStats};
use crate::rollout::RolloutGroup;
use crate::segmentation::{extract_structures, EntropyStructures, DEFAULT_MIN_SEG_LEN, DEFAULT_QUANTILE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapingConfig {
    /// Entropy quantile `h` for the per-response threshold.
    pub quantile: f64,
    /// Minimum segment length `μ`.
    pub min_seg_len: usize,
    /// Zero out segments seen in both correct and incorrect responses. When
    /// off, such tokens keep their base advantage.
    pub neutralize_shared: bool,
}

impl Default for ShapingConfig {
    fn default() -> Self {
        ShapingConfig {
            quantile: DEFAULT_QUANTILE,
            min_seg_len: DEFAULT_MIN_SEG_LEN,
            neutralize_shared: true,
        }
    }
}

impl ShapingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.quantile) {
            return Err(Error::config(format!("quantile {} outside [0, 1]", self.quantile)));
        }
        if self.min_seg_len == 0 {
            return Err(Error::config("minimum segment length must be at least 1"));
        }
        Ok(())
    }
}

/// Per-response structures plus the group registry built from them.
#[derive(Debug, Clone)]
pub struct GroupSegmentation {
    pub structures: Vec<EntropyStructures>,
    pub registry: SegmentRegistry,
}

pub fn segment_group(group: &RolloutGroup, quantile: f64, min_seg_len: usize) -> Result<GroupSegmentation> {
    let structures = group
        .responses
        .iter()
        .enumerate()
        .map(|(i, r)| extract_structures(r, i, quantile, min_seg_len))
        .collect::<Result<Vec<_>>>()?;
    let registry = build_registry(group, &structures)?;
    Ok(GroupSegmentation { structures, registry })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenCategory {
    High,
    Frag,
    /// Segment token covered by the registry entry at this index.
    Segment(usize),
    /// Segment token whose span has no registry entry of its own.
    UncoveredSegment,
}

/// Category of every token of response `response_index`.
pub fn token_categories(seg: &GroupSegmentation, response_index: usize, len: usize) -> Vec<TokenCategory> {
    let s = &seg.structures[response_index];
    let mut out = vec![TokenCategory::High; len];
    for f in &s.frags {
        out[f.offsets()].fill(TokenCategory::Frag);
    }
    for (k, span) in s.segs.iter().enumerate() {
        let cat = match seg.registry.covering_index(response_index, k) {
            Some(e) => TokenCategory::Segment(e),
            None => TokenCategory::UncoveredSegment,
        };
        out[span.offsets()].fill(cat);
    }
    out
}

/// Shaped advantages for every token of every response, given the base
/// advantages `base[i]` and a precomputed segmentation.
pub fn shaped_advantages(
    group: &RolloutGroup,
    base: &[f64],
    seg: &GroupSegmentation,
    config: &ShapingConfig,
) -> Result<Vec<Vec<f64>>> {
    if base.len() != group.size() || seg.structures.len() != group.size() {
        return Err(Error::domain(format!(
            "query `{}`: {} responses, {} advantages, {} structure sets",
            group.query_id,
            group.size(),
            base.len(),
            seg.structures.len()
        )));
    }
    let n_correct = group.num_correct();
    let n_incorrect = group.num_incorrect();
    let entries = seg.registry.entries();

    let mut out = Vec::with_capacity(group.size());
    for (i, (response, &a)) in group.responses.iter().zip(base).enumerate() {
        // correct_i = 1 implies N_r >= 1, and likewise for N_w.
        let side = if response.correct() { n_correct } else { n_incorrect };
        debug_assert!(side >= 1);
        let frag_value = a / side as f64;

        let cats = token_categories(seg, i, response.len());
        let values = cats
            .iter()
            .map(|cat| match *cat {
                TokenCategory::High => a,
                TokenCategory::Frag | TokenCategory::UncoveredSegment => frag_value,
                TokenCategory::Segment(e) => {
                    segment_value(&entries[e], a, n_correct, n_incorrect, config.neutralize_shared)
                }
            })
            .collect();
        out.push(values);
    }
    Ok(out)
}

fn segment_value(
    entry: &SegmentStats,
    a: f64,
    n_correct_group: usize,
    n_incorrect_group: usize,
    neutralize_shared: bool,
) -> f64 {
    match (entry.n_correct, entry.n_incorrect) {
        (r, w) if r > 0 && w > 0 => {
            if neutralize_shared {
                0.0
            } else {
                a
            }
        }
        (r, 0) => (r as f64 / n_correct_group as f64) * a,
        (0, w) => (w as f64 / n_incorrect_group as f64) * a,
        _ => unreachable!("registry entries have at least one witness"),
    }
}

fn base_advantages(group: &RolloutGroup) -> Result<Vec<f64>> {
    group
        .responses
        .iter()
        .enumerate()
        .map(|(i, r)| {
            r.base_advantage().ok_or_else(|| Error::Contract {
                query_id: group.query_id.clone(),
                response_index: i,
                message: "base advantage missing; compute group advantages first".into(),
            })
        })
        .collect()
}

/// Fills `shaped` on every response. Undersized groups are passed through
/// with their base advantages.
pub fn shape_group(mut group: RolloutGroup, config: &ShapingConfig) -> Result<RolloutGroup> {
    config.validate()?;
    let base = base_advantages(&group)?;
    let shaped = if group.is_undersized() {
        group
            .responses
            .iter()
            .zip(&base)
            .map(|(r, &a)| vec![a; r.len()])
            .collect()
    } else {
        let seg = segment_group(&group, config.quantile, config.min_seg_len)?;
        shaped_advantages(&group, &base, &seg, config)?
    };
    for (r, s) in group.responses.iter_mut().zip(shaped) {
        r.set_shaped(s)?;
    }
    Ok(group)
}

/// Shapes every group, in parallel across groups. Output order matches input order.
pub fn shape_batch(groups: Vec<RolloutGroup>, config: &ShapingConfig) -> Result<Vec<RolloutGroup>> {
    config.validate()?;
    groups.into_par_iter().map(|g| shape_group(g, config)).collect()
}
