//! Trains both modes over a few seeds and prints the end-of-run comparison.
//!
//! ```text
//! cargo run --release -p less-core --example dynamics -- [steps] [seeds] [lr]
//! ```

use less_core::simulator::{compare_runs, summarize_run, train, Mode, TrainConfig};
use rayon::prelude::*;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let mut cfg = TrainConfig::default();
    if let Some(s) = args.first() {
        cfg.steps = s.parse()?;
    }
    let seeds: u64 = args.get(1).map_or(Ok(5), |s| s.parse())?;
    if let Some(lr) = args.get(2) {
        cfg.learning_rate = lr.parse()?;
    }

    let jobs: Vec<(Mode, u64)> = [Mode::Grpo, Mode::Less]
        .into_iter()
        .flat_map(|m| (1..=seeds).map(move |s| (m, s)))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(mode, seed)| train(&cfg, mode, seed).and_then(|o| summarize_run(&o.metrics)))
        .collect::<Result<Vec<_>, _>>()?;
    for r in &runs {
        println!(
            "{:<4} seed {:>2}: acc {:.3} worst@8 {:.3} std@8 {:.3} overlap {:.3}",
            r.mode.as_str(),
            r.seed,
            r.final_accuracy,
            r.final_worst,
            r.final_std,
            r.final_overlap
        );
    }
    let c = compare_runs(&runs);
    println!(
        "LESS wins: overlap {}/{}, worst@8 {}/{}; accuracy gap {:+.3}",
        c.less_wins_overlap,
        c.paired_seeds.len(),
        c.less_wins_worst,
        c.paired_seeds.len(),
        c.accuracy_gap
    );
    Ok(())
}
