use std::io::Write;
use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use less_core::analysis::{aggregate_rows, entropy_ratio, overlap_ratios, OverlapRow};
use less_core::registry::SegmentRegistry;
use less_core::rollout::load_rollout_groups;
use less_core::shaping::segment_group;
use less_core::RolloutGroup;
use rayon::prelude::*;
use serde::Serialize;

use crate::{create_output, open_input, SegmentationArgs};

#[derive(Args, Debug)]
pub struct AnalyzeArgs {
    /// Rollout file (`#less-rollouts v1`); shaped files are accepted too.
    #[arg(long)]
    input: PathBuf,
    /// Report destination.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    segmentation: SegmentationArgs,
    /// Add one row per group to the table and to the machine-readable section.
    #[arg(long)]
    per_group: bool,
    /// Append every group's registry: entry tokens, counts and witnesses.
    #[arg(long)]
    registry: bool,
}

struct GroupAnalysis {
    query_id: String,
    responses: usize,
    correct: usize,
    row: OverlapRow,
    entropy_ratio: Option<f64>,
    registry: SegmentRegistry,
}

#[derive(Serialize)]
struct MachineLine<'a> {
    record: &'a str,
    query_id: Option<&'a str>,
    responses: usize,
    correct: usize,
    seg_tokens: usize,
    all: f64,
    correct_only: f64,
    shared: f64,
    incorrect_only: f64,
    correct_only_tokens: usize,
    shared_tokens: usize,
    incorrect_only_tokens: usize,
    singleton_tokens: usize,
    correct_only_entries: usize,
    shared_entries: usize,
    incorrect_only_entries: usize,
    singleton_entries: usize,
    empty_denominator: bool,
    entropy_ratio: Option<f64>,
}

impl<'a> MachineLine<'a> {
    fn new(
        record: &'a str,
        query_id: Option<&'a str>,
        responses: usize,
        correct: usize,
        row: &OverlapRow,
        entropy_ratio: Option<f64>,
    ) -> Self {
        let r = row.ratios();
        MachineLine {
            record,
            query_id,
            responses,
            correct,
            seg_tokens: row.masses.total,
            all: r.all,
            correct_only: r.correct_only,
            shared: r.shared,
            incorrect_only: r.incorrect_only,
            correct_only_tokens: row.masses.correct_only,
            shared_tokens: row.masses.shared,
            incorrect_only_tokens: row.masses.incorrect_only,
            singleton_tokens: row.masses.singleton,
            correct_only_entries: row.entries.correct_only,
            shared_entries: row.entries.shared,
            incorrect_only_entries: row.entries.incorrect_only,
            singleton_entries: row.entries.singleton,
            empty_denominator: row.empty_denominator(),
            entropy_ratio,
        }
    }
}

fn analyze_group(g: &RolloutGroup, quantile: f64, min_seg_len: usize) -> less_core::Result<GroupAnalysis> {
    let seg = segment_group(g, quantile, min_seg_len)?;
    Ok(GroupAnalysis {
        query_id: g.query_id.clone(),
        responses: g.size(),
        correct: g.num_correct(),
        row: overlap_ratios(g, &seg.structures, &seg.registry),
        entropy_ratio: entropy_ratio(g),
        registry: seg.registry,
    })
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

fn table_row<W: Write>(
    w: &mut W,
    name: &str,
    responses: usize,
    row: &OverlapRow,
    ratio: Option<f64>,
) -> std::io::Result<()> {
    let r = row.ratios();
    writeln!(
        w,
        "{name:<24} {responses:>9} {:>10} {:>8.4} {:>12.4} {:>8.4} {:>14.4} {:>13}",
        row.masses.total,
        r.all,
        r.correct_only,
        r.shared,
        r.incorrect_only,
        fmt_opt(ratio)
    )
}

fn write_registry<W: Write>(w: &mut W, a: &GroupAnalysis) -> std::io::Result<()> {
    writeln!(w, "registry {} ({} entries)", a.query_id, a.registry.len())?;
    for (idx, e) in a.registry.entries().iter().enumerate() {
        let tokens: Vec<String> = e.key.iter().map(u32::to_string).collect();
        let witnesses: Vec<String> = e
            .occurrences
            .iter()
            .map(|w| format!("{}@{}", w.response_index, w.start))
            .collect();
        writeln!(
            w,
            "  {idx:>4}  n_r {:>2}  n_w {:>2}  tokens [{}]  witnesses {}",
            e.n_correct,
            e.n_incorrect,
            tokens.join(" "),
            witnesses.join(" ")
        )?;
    }
    Ok(())
}

pub fn run(args: AnalyzeArgs) -> anyhow::Result<()> {
    let groups =
        load_rollout_groups(open_input(&args.input)?).with_context(|| format!("reading {}", args.input.display()))?;
    let quantile = args.segmentation.quantile;
    let min_seg_len = args.segmentation.min_seg_len as usize;
    let analyses = groups
        .par_iter()
        .map(|g| analyze_group(g, quantile, min_seg_len))
        .collect::<less_core::Result<Vec<_>>>()?;

    let aggregate = aggregate_rows(analyses.iter().map(|a| &a.row));
    let ratios: Vec<f64> = analyses.iter().filter_map(|a| a.entropy_ratio).collect();
    let mean_ratio = (!ratios.is_empty()).then(|| ratios.iter().sum::<f64>() / ratios.len() as f64);
    let responses: usize = analyses.iter().map(|a| a.responses).sum();
    let correct: usize = analyses.iter().map(|a| a.correct).sum();

    let mut w = create_output(&args.out)?;
    writeln!(
        w,
        "# overlap report  quantile {quantile}  min-seg-len {min_seg_len}  groups {}  responses {responses}",
        analyses.len()
    )?;
    writeln!(
        w,
        "{:<24} {:>9} {:>10} {:>8} {:>12} {:>8} {:>14} {:>13}",
        "query_id", "responses", "seg_tokens", "all", "correct_only", "shared", "incorrect_only", "entropy_ratio"
    )?;
    if args.per_group {
        for a in &analyses {
            table_row(&mut w, &a.query_id, a.responses, &a.row, a.entropy_ratio)?;
        }
    }
    table_row(&mut w, "aggregate", responses, &aggregate, mean_ratio)?;

    writeln!(w)?;
    if args.per_group {
        for a in &analyses {
            let line = MachineLine::new(
                "group",
                Some(&a.query_id),
                a.responses,
                a.correct,
                &a.row,
                a.entropy_ratio,
            );
            writeln!(w, "{}", serde_json::to_string(&line)?)?;
        }
    }
    let line = MachineLine::new("aggregate", None, responses, correct, &aggregate, mean_ratio);
    writeln!(w, "{}", serde_json::to_string(&line)?)?;

    if args.registry {
        for a in &analyses {
            writeln!(w)?;
            write_registry(&mut w, a)?;
        }
    }
    w.flush()?;
    Ok(())
}
