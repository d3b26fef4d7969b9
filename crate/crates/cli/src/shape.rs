use std::path::PathBuf;

use anyhow::Context;
use clap::Args;
use less_core::grpo::{assign_group_advantages, GrpoConfig};
use less_core::rollout::{load_rollout_groups, write_shaped_groups};
use less_core::shaping::{shape_batch, ShapingConfig};
use less_core::{Error, RolloutGroup};

use crate::{create_output, open_input, parse_positive, SegmentationArgs};

#[derive(Args, Debug)]
pub struct ShapeArgs {
    /// Rollout file (`#less-rollouts v1`).
    #[arg(long)]
    input: PathBuf,
    /// Destination of the shaped-advantage file.
    #[arg(long, visible_alias = "out")]
    output: PathBuf,
    #[command(flatten)]
    segmentation: SegmentationArgs,
    /// Keep the base advantage on segments seen in both correct and incorrect responses.
    #[arg(long)]
    keep_shared: bool,
    /// Reward std below which a group gets zero advantages.
    #[arg(long, default_value_t = 1e-8, value_parser = parse_positive)]
    std_floor: f64,
}

/// Groups whose records already carry `base_advantage` keep it; groups with
/// none get group-relative advantages from their rewards.
fn fill_base_advantages(groups: &mut [RolloutGroup], config: &GrpoConfig) -> less_core::Result<()> {
    for g in groups.iter_mut() {
        let present = g.responses.iter().filter(|r| r.base_advantage().is_some()).count();
        if present == 0 {
            assign_group_advantages(g, config)?;
        } else if present < g.size() {
            let missing = g
                .responses
                .iter()
                .position(|r| r.base_advantage().is_none())
                .unwrap_or(0);
            return Err(Error::Contract {
                query_id: g.query_id.clone(),
                response_index: missing,
                message: "base_advantage is set on some responses of the group but not this one".into(),
            });
        }
    }
    Ok(())
}

pub fn run(args: ShapeArgs) -> anyhow::Result<()> {
    let mut groups =
        load_rollout_groups(open_input(&args.input)?).with_context(|| format!("reading {}", args.input.display()))?;
    let grpo = GrpoConfig {
        std_floor: args.std_floor,
        ..GrpoConfig::default()
    };
    fill_base_advantages(&mut groups, &grpo).with_context(|| format!("reading {}", args.input.display()))?;

    let config = ShapingConfig {
        quantile: args.segmentation.quantile,
        min_seg_len: args.segmentation.min_seg_len as usize,
        neutralize_shared: !args.keep_shared,
    };
    let shaped = shape_batch(groups, &config)?;
    write_shaped_groups(&shaped, create_output(&args.output)?)
        .with_context(|| format!("writing {}", args.output.display()))?;
    log::info!("shaped {} groups into {}", shaped.len(), args.output.display());
    Ok(())
}
