use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_less-shaper"));
    cmd.env_remove("LESS_SHAPER_THREADS").env_remove("RUST_LOG");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Three groups of four responses sharing a low-entropy phrase.
fn rollout_lines() -> Vec<String> {
    let mut lines = vec!["#less-rollouts v1".to_string()];
    for q in 0..3 {
        for i in 0..4 {
            let correct = i % 2 == 0;
            let mut tokens = vec![90 + i, 1, 2, 3, 4, 5, 80 + q];
            let mut entropies = vec![2.5, 0.1, 0.2, 0.1, 0.3, 0.1, 1.9];
            if correct {
                tokens.extend([6, 7, 8, 9, 6, 70]);
                entropies.extend([0.05, 0.1, 0.1, 0.2, 0.1, 2.2]);
            } else {
                tokens.extend([60 + i, 61, 62]);
                entropies.extend([1.2, 0.1, 0.1]);
            }
            lines.push(
                serde_json::json!({
                    "query_id": format!("q{q}"),
                    "tokens": tokens,
                    "entropies": entropies,
                    "reward": u8::from(correct),
                    "correct": u8::from(correct),
                })
                .to_string(),
            );
        }
    }
    lines
}

fn write_rollouts(dir: &Path) -> PathBuf {
    let path = dir.join("rollouts.jsonl");
    std::fs::write(&path, rollout_lines().join("\n") + "\n").unwrap();
    path
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn shape_writes_shaped_records() {
    let dir = TempDir::new().unwrap();
    let input = write_rollouts(dir.path());
    let out = dir.path().join("nested/shaped.jsonl");
    let o = run(&["shape", "--input", p(&input), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let text = std::fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("#less-rollouts v1"));
    let records: Vec<serde_json::Value> = lines.map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 12);
    for r in &records {
        let n = r["tokens"].as_array().unwrap().len();
        let shaped = r["shaped"].as_array().unwrap();
        assert_eq!(shaped.len(), n);
        let a = r["base_advantage"].as_f64().unwrap();
        assert!((a.abs() - 1.0).abs() < 1e-12);
        // The shared phrase 1 2 3 4 5 is neutralized.
        assert!(shaped[1..6].iter().all(|v| v.as_f64() == Some(0.0)));
        // High-entropy opener keeps the full advantage.
        assert_eq!(shaped[0].as_f64(), Some(a));
    }
}

#[test]
fn shaping_is_byte_stable() {
    let dir = TempDir::new().unwrap();
    let input = write_rollouts(dir.path());
    let a = dir.path().join("a.jsonl");
    let b = dir.path().join("b.jsonl");
    let c = dir.path().join("c.jsonl");
    assert!(run(&["shape", "--input", p(&input), "--output", p(&a)])
        .status
        .success());
    assert!(run(&["shape", "--input", p(&input), "--out", p(&b)]).status.success());
    // Re-shaping a shaped file keeps its advantages and output.
    let o = bin()
        .env("LESS_SHAPER_THREADS", "1")
        .args(["shape", "--input", p(&a), "--output", p(&c)])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let first = std::fs::read(&a).unwrap();
    assert_eq!(first, std::fs::read(&b).unwrap());
    assert_eq!(first, std::fs::read(&c).unwrap());
}

#[test]
fn keep_shared_restores_base_advantage() {
    let dir = TempDir::new().unwrap();
    let input = write_rollouts(dir.path());
    let out = dir.path().join("kept.jsonl");
    let o = run(&[
        "shape",
        "--input",
        p(&input),
        "--output",
        p(&out),
        "--keep-shared",
        "--min-seg-len",
        "5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let first: serde_json::Value = serde_json::from_str(text.lines().nth(1).unwrap()).unwrap();
    let a = first["base_advantage"].as_f64().unwrap();
    assert!(first["shaped"].as_array().unwrap()[1..6]
        .iter()
        .all(|v| v.as_f64() == Some(a)));
}

#[test]
fn missing_input_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let o = run(&["shape", "--output", p(&dir.path().join("x"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("--input"), "{err}");
    assert!(err.contains("Usage"), "{err}");
}

#[test]
fn unknown_flags_and_bad_values_are_usage_errors() {
    let dir = TempDir::new().unwrap();
    let input = write_rollouts(dir.path());
    let out = dir.path().join("x");
    assert_eq!(
        run(&["shape", "--input", p(&input), "--output", p(&out), "--bogus"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(&["shape", "--input", p(&input), "--output", p(&out), "--quantile", "1.5"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(
        run(&["shape", "--input", p(&input), "--output", p(&out), "--min-seg-len", "0"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert!(!out.exists());
}

#[test]
fn malformed_record_reports_its_line() {
    let dir = TempDir::new().unwrap();
    let mut lines = rollout_lines();
    while lines.len() < 16 {
        lines.push(lines[1].clone());
    }
    lines.truncate(16);
    lines.push("{\"query_id\": \"q9\", \"tokens\": [1, 2], \"entropies\": [0.1]".into());
    let input = dir.path().join("bad.jsonl");
    std::fs::write(&input, lines.join("\n")).unwrap();
    let out = dir.path().join("shaped.jsonl");
    let o = run(&["shape", "--input", p(&input), "--output", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 17"), "{}", stderr(&o));
}

#[test]
fn inconsistent_record_is_a_data_error() {
    let dir = TempDir::new().unwrap();
    let input = dir.path().join("bad.jsonl");
    std::fs::write(
        &input,
        "#less-rollouts v1\n{\"query_id\":\"q\",\"tokens\":[1,2],\"entropies\":[0.1],\"reward\":1,\"correct\":1}\n",
    )
    .unwrap();
    let o = run(&["analyze", "--input", p(&input), "--out", p(&dir.path().join("a.txt"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let o = run(&[
        "shape",
        "--input",
        p(&dir.path().join("absent")),
        "--output",
        p(&dir.path().join("s")),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn analyze_reports_overlap() {
    let dir = TempDir::new().unwrap();
    let input = write_rollouts(dir.path());
    let out = dir.path().join("analysis.txt");
    let o = run(&[
        "analyze",
        "--input",
        p(&input),
        "--out",
        p(&out),
        "--per-group",
        "--registry",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.starts_with("# overlap report"));
    let records: Vec<serde_json::Value> = text
        .lines()
        .filter(|l| l.starts_with('{'))
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(records.len(), 4);
    let agg = records.last().unwrap();
    assert_eq!(agg["record"], "aggregate");
    assert_eq!(agg["responses"], 12);
    let (all, co, sh, io) = (
        agg["all"].as_f64().unwrap(),
        agg["correct_only"].as_f64().unwrap(),
        agg["shared"].as_f64().unwrap(),
        agg["incorrect_only"].as_f64().unwrap(),
    );
    assert!(sh > 0.0 && co > 0.0);
    assert!((all - (co + sh + io)).abs() < 1e-12);
    assert_eq!(text.matches("registry q").count(), 3);
}

#[test]
fn simulate_then_compare() {
    let dir = TempDir::new().unwrap();
    let runs = dir.path().join("runs");
    for mode in ["grpo", "less"] {
        let o = run(&[
            "simulate",
            "--mode",
            mode,
            "--steps",
            "4",
            "--seeds",
            "1,2",
            "--prompts-per-step",
            "2",
            "--eval-every",
            "2",
            "--out",
            p(&runs),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
    }
    let trace = std::fs::read_to_string(runs.join("less-seed2.metrics")).unwrap();
    assert!(trace.starts_with("#less-metrics v1\n"));
    assert_eq!(trace.lines().count(), 5);
    let last: serde_json::Value = serde_json::from_str(trace.lines().last().unwrap()).unwrap();
    for key in [
        "step",
        "mode",
        "seed",
        "accuracy",
        "overlap_correct_only",
        "advantage_mass",
        "worst@8",
        "std@8",
    ] {
        assert!(last.get(key).is_some(), "missing {key}");
    }
    assert_eq!(last["step"], 4);

    let o = run(&["report", "--compare", p(&runs)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("paired seeds: 2"), "{text}");
    assert!(text.contains("seed majority"), "{text}");

    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    assert_eq!(run(&["report", "--compare", p(&empty)]).status.code(), Some(2));
}

#[test]
fn report_correlates_pairs() {
    let dir = TempDir::new().unwrap();
    let pairs = dir.path().join("pairs.txt");
    std::fs::write(&pairs, "# x y\n1 2\n2, 4\n3 6\n4 8.0\n").unwrap();
    let out = dir.path().join("r.txt");
    let o = run(&["report", "--correlate", p(&pairs), "--out", p(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert!(text.contains("n 4") && text.contains("r 1.000000"), "{text}");

    std::fs::write(&pairs, "1 1\n1 2\n1 3\n").unwrap();
    assert_eq!(run(&["report", "--correlate", p(&pairs)]).status.code(), Some(2));
}

#[test]
fn report_recomputes_the_loss() {
    let dir = TempDir::new().unwrap();
    let input = write_rollouts(dir.path());
    let shaped = dir.path().join("shaped.jsonl");
    assert!(run(&["shape", "--input", p(&input), "--output", p(&shaped)])
        .status
        .success());

    let mut logprobs = vec!["#less-logprobs v1".to_string()];
    for line in std::fs::read_to_string(&shaped).unwrap().lines().skip(1) {
        let r: serde_json::Value = serde_json::from_str(line).unwrap();
        let n = r["tokens"].as_array().unwrap().len();
        logprobs.push(
            serde_json::json!({"query_id": r["query_id"], "old": vec![-1.0; n], "new": vec![-1.0; n]}).to_string(),
        );
    }
    let lp = dir.path().join("lp.jsonl");
    std::fs::write(&lp, logprobs.join("\n")).unwrap();
    let o = run(&["report", "--loss", "--shaped", p(&shaped), "--logprobs", p(&lp)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("mean loss over 3 groups"), "{text}");

    // --loss needs both inputs; a positive KL weight needs reference values.
    assert_eq!(
        run(&["report", "--loss", "--shaped", p(&shaped)]).status.code(),
        Some(1)
    );
    let o = run(&[
        "report",
        "--loss",
        "--shaped",
        p(&shaped),
        "--logprobs",
        p(&lp),
        "--kl-coeff",
        "0.1",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn help_lists_defaults() {
    let o = run(&["--help"]);
    assert_eq!(o.status.code(), Some(0));
    for sub in ["shape", "analyze", "simulate", "report"] {
        assert!(stdout(&o).contains(sub));
    }
    let o = run(&["shape", "--help"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(
        text.contains("[default: 0.8]") && text.contains("[default: 5]"),
        "{text}"
    );
    let o = run(&["simulate", "--help"]);
    assert!(stdout(&o).contains("[default: 300]"));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
}

#[test]
fn bad_thread_count_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let input = write_rollouts(dir.path());
    for bad in ["0", "many", "-3"] {
        let o = bin()
            .env("LESS_SHAPER_THREADS", bad)
            .args(["shape", "--input", p(&input), "--output", p(&dir.path().join("s"))])
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(1));
        assert!(stderr(&o).contains("LESS_SHAPER_THREADS"));
    }
}
