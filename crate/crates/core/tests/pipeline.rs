use less_core::analysis::{aggregate_rows, entropy_ratio, overlap_ratios, OverlapReport, OverlapRow};
use less_core::grpo::{
    align_policy_evals, assign_group_advantages, load_policy_evals, surrogate_loss, GrpoConfig, PolicyEvals,
};
use less_core::rollout::{load_rollout_groups, write_rollout_groups, write_shaped_groups};
use less_core::shaping::{segment_group, shape_batch, ShapingConfig};
use less_core::{Error, Response, RolloutGroup, TokenId};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_groups(seed: u64, count: usize) -> Vec<RolloutGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|q| {
            let phrases: Vec<Vec<TokenId>> = (0..3)
                .map(|_| (0..rng.gen_range(3..9)).map(|_| rng.gen_range(0..6)).collect())
                .collect();
            let responses = (0..rng.gen_range(2..=8))
                .map(|_| {
                    let (mut tokens, mut entropies) = (Vec::new(), Vec::new());
                    for _ in 0..rng.gen_range(1..5) {
                        tokens.push(rng.gen_range(0..6));
                        entropies.push(rng.gen_range(2.0..3.0));
                        for &t in phrases.choose(&mut rng).unwrap() {
                            tokens.push(t);
                            entropies.push(rng.gen_range(0.0..0.3));
                        }
                    }
                    let correct = rng.gen_bool(0.5);
                    Response::new(tokens, entropies, f64::from(u8::from(correct)), correct).unwrap()
                })
                .collect();
            RolloutGroup::new(format!("q{q}"), responses)
        })
        .collect()
}

#[test]
fn rollout_files_round_trip() {
    let groups = random_groups(1, 20);
    let mut buf = Vec::new();
    write_rollout_groups(&groups, &mut buf).unwrap();
    assert_eq!(load_rollout_groups(buf.as_slice()).unwrap(), groups);
}

#[test]
fn shaped_files_round_trip_and_reshaping_is_stable() {
    let mut groups = random_groups(2, 20);
    for g in &mut groups {
        assign_group_advantages(g, &GrpoConfig::default()).unwrap();
    }
    let config = ShapingConfig::default();
    let shaped = shape_batch(groups.clone(), &config).unwrap();
    let mut first = Vec::new();
    write_shaped_groups(&shaped, &mut first).unwrap();

    let reloaded = load_rollout_groups(first.as_slice()).unwrap();
    assert_eq!(reloaded, shaped);
    let again = shape_batch(reloaded, &config).unwrap();
    let mut second = Vec::new();
    write_shaped_groups(&again, &mut second).unwrap();
    assert_eq!(first, second);

    // Writing unshaped groups in the shaped format is refused.
    let err = write_shaped_groups(&groups, Vec::new()).unwrap_err();
    assert!(matches!(err, Error::Contract { response_index: 0, .. }));
}

#[test]
fn overlap_masses_partition_segment_tokens() {
    let mut report = OverlapReport::default();
    let mut rows: Vec<OverlapRow> = Vec::new();
    for g in random_groups(3, 200) {
        let seg = segment_group(&g, 0.8, 3).unwrap();
        let row = overlap_ratios(&g, &seg.structures, &seg.registry);
        let m = row.masses;
        assert_eq!(m.correct_only + m.shared + m.incorrect_only + m.singleton, m.total);
        assert_eq!(
            row.entries.correct_only + row.entries.shared + row.entries.incorrect_only + row.entries.singleton,
            seg.registry.len()
        );
        let r = row.ratios();
        for v in [r.all, r.correct_only, r.shared, r.incorrect_only] {
            assert!((0.0..=1.0).contains(&v));
        }
        if !row.empty_denominator() {
            let multi = r.correct_only + r.shared + r.incorrect_only;
            assert!((r.all - multi).abs() < 1e-12);
        }
        report.push(g.query_id.clone(), row);
        rows.push(row);
    }
    assert_eq!(report.aggregate, aggregate_rows(&rows));
    assert_eq!(report.rows.len(), 200);
    assert!(report.aggregate.masses.shared > 0 && report.aggregate.masses.correct_only > 0);
}

#[test]
fn entropy_ratio_needs_both_sides() {
    let r = |h: f64, correct| Response::new(vec![1, 2], vec![h, h], f64::from(u8::from(correct)), correct).unwrap();
    let g = RolloutGroup::new("a", vec![r(1.0, true), r(3.0, true), r(4.0, false)]);
    assert!((entropy_ratio(&g).unwrap() - 2.0).abs() < 1e-12);
    assert_eq!(
        entropy_ratio(&RolloutGroup::new("b", vec![r(1.0, true), r(2.0, true)])),
        None
    );
    assert_eq!(
        entropy_ratio(&RolloutGroup::new("c", vec![r(0.0, true), r(2.0, false)])),
        None
    );
}

#[test]
fn logprob_file_drives_the_surrogate() {
    let mut groups = random_groups(4, 3);
    for g in &mut groups {
        assign_group_advantages(g, &GrpoConfig::default()).unwrap();
    }
    let shaped = shape_batch(groups, &ShapingConfig::default()).unwrap();

    let mut text = String::from("#less-logprobs v1\n");
    for g in &shaped {
        for r in &g.responses {
            let lp: Vec<f64> = vec![-0.5; r.len()];
            let line = serde_json::json!({"query_id": g.query_id, "old": lp, "new": lp});
            text.push_str(&line.to_string());
            text.push('\n');
        }
    }
    let evals = align_policy_evals(&shaped, load_policy_evals(text.as_bytes()).unwrap()).unwrap();
    for (g, ev) in shaped.iter().zip(&evals) {
        let out = surrogate_loss(g, ev, &GrpoConfig::default()).unwrap();
        assert_eq!(out.clip_fraction, 0.0);
        // On policy the ratio is one, so the objective is the mean shaped advantage.
        let want: f64 = g
            .responses
            .iter()
            .map(|r| r.shaped().unwrap().iter().sum::<f64>() / r.len() as f64)
            .sum::<f64>()
            / g.size() as f64;
        assert!((out.objective - want).abs() < 1e-12);
        assert!((out.loss + want).abs() < 1e-12);
        let on: Vec<PolicyEvals> = g
            .responses
            .iter()
            .map(|r| PolicyEvals::on_policy(vec![-0.5; r.len()]))
            .collect();
        assert_eq!(surrogate_loss(g, &on, &GrpoConfig::default()).unwrap(), out);
    }

    let short = "#less-logprobs v1\n{\"query_id\":\"q0\",\"old\":[0.0],\"new\":[0.0]}\n";
    assert!(align_policy_evals(&shaped, load_policy_evals(short.as_bytes()).unwrap()).is_err());
}
