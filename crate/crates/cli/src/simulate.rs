use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use less_core::simulator::{train, write_metrics_trace, Mode, TrainConfig};
use rayon::prelude::*;

use crate::{create_output, parse_positive, SegmentationArgs};

#[derive(Args, Debug)]
pub struct SimulateArgs {
    /// Advantage mode: `grpo` (plain group-relative) or `less` (segment shaped).
    #[arg(long, value_parser = ["grpo", "less"])]
    mode: String,
    /// Training steps per run.
    #[arg(long, default_value_t = 300)]
    steps: usize,
    /// Comma-separated run seeds; one metrics trace per seed.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    seeds: Vec<u64>,
    /// Single run seed, used when --seeds is absent.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Directory for the metrics traces.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    segmentation: SegmentationArgs,
    /// Keep the base advantage on shared segments (LESS mode only).
    #[arg(long)]
    keep_shared: bool,
    /// Fixed gradient step size.
    #[arg(long, default_value_t = 1000.0, value_parser = parse_positive)]
    learning_rate: f64,
    /// Responses sampled per prompt.
    #[arg(long, default_value_t = 8, value_parser = clap::value_parser!(u64).range(2..))]
    group_size: u64,
    /// Prompts per training step.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    prompts_per_step: u64,
    /// Operands per chain-arithmetic instance.
    #[arg(long, default_value_t = 4, value_parser = clap::value_parser!(u64).range(2..=9))]
    operands: u64,
    /// Evaluate worst@8 and std@8 every this many steps.
    #[arg(long, default_value_t = 25, value_parser = clap::value_parser!(u64).range(1..))]
    eval_every: u64,
}

pub fn run(args: SimulateArgs) -> anyhow::Result<()> {
    let mode: Mode = args.mode.parse()?;
    let mut config = TrainConfig {
        steps: args.steps,
        learning_rate: args.learning_rate,
        group_size: args.group_size as usize,
        prompts_per_step: args.prompts_per_step as usize,
        eval_every: args.eval_every as usize,
        ..TrainConfig::default()
    };
    config.shaping.quantile = args.segmentation.quantile;
    config.shaping.min_seg_len = args.segmentation.min_seg_len as usize;
    config.shaping.neutralize_shared = !args.keep_shared;
    config.task.num_operands = args.operands as usize;
    config.task.max_len = (less_core::simulator::task::reference_len(config.task.num_operands) + 11).min(64);
    config.validate()?;

    let seeds = if args.seeds.is_empty() {
        vec![args.seed]
    } else {
        args.seeds.clone()
    };
    std::fs::create_dir_all(&args.out).with_context(|| format!("cannot create {}", args.out.display()))?;

    seeds.par_iter().try_for_each(|&seed| -> anyhow::Result<()> {
        let outcome = train(&config, mode, seed).with_context(|| format!("{} run with seed {seed}", mode.as_str()))?;
        let path = args.out.join(format!("{}-seed{seed}.metrics", mode.as_str()));
        write_metrics_trace(&outcome.metrics, create_output(&path)?)
            .with_context(|| format!("writing {}", path.display()))?;
        if let Some(last) = outcome.metrics.last() {
            log::info!("{}: final batch accuracy {:.3}", path.display(), last.accuracy);
        }
        Ok(())
    })
}
