use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use promptpfn::bench::{mean_rank_and_wins, ExperimentReport};
use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_promptpfn"))
}

fn run(dir: &Path, args: &str) -> Output {
    bin()
        .current_dir(dir)
        .args(args.split_whitespace())
        .output()
        .expect("spawn")
}

fn ok(dir: &Path, args: &str) -> Output {
    let out = run(dir, args);
    assert!(
        out.status.success(),
        "{args} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string(v).unwrap()).unwrap();
}

/// Two shifted Gaussian-ish clusters from a fixed LCG, with a string group column.
fn write_blobs(path: &Path, n: usize, with_group: bool) {
    let mut state = 12345u64;
    let mut uniform = || {
        state = state
            .wrapping_mul(6364136223846793005)
            .wrapping_add(1442695040888963407);
        (state >> 11) as f64 / (1u64 << 53) as f64
    };
    let mut s = String::from(if with_group { "x,y,group,label\n" } else { "x,y,label\n" });
    for i in 0..n {
        let c = i % 2;
        let x = 2.0 * c as f64 + uniform() - 0.5;
        let y = -(c as f64) + uniform() - 0.5;
        if with_group {
            let g = if uniform() < 0.5 { "a" } else { "b" };
            s += &format!("{x:.4},{y:.4},{g},{}\n", if c == 1 { "yes" } else { "no" });
        } else {
            s += &format!("{x:.4},{y:.4},{}\n", if c == 1 { "yes" } else { "no" });
        }
    }
    fs::write(path, s).unwrap();
}

fn setup(dir: &Path) {
    write_json(
        &dir.join("prior.json"),
        &json!({
            "d_max": 4, "c_max": 4, "n_total": 64,
            "feature_count_range": [1, 4], "class_count_range": [2, 4], "label_noise": 0.0,
            "kind_weights": {"random-mlp": 0.25, "gaussian-mixture": 0.25, "linear-threshold": 0.5}
        }),
    );
    write_json(
        &dir.join("model.json"),
        &json!({"e": 16, "layers": 1, "heads": 2, "ff_mult": 2, "d_max": 4, "c_max": 4, "n_ctx_max": 512}),
    );
    write_json(
        &dir.join("tune.json"),
        &json!({"p": 4, "epochs": 3, "max_val_size": 100, "ctx_upper_bound": 64}),
    );
    write_blobs(&dir.join("blobs.csv"), 300, true);
    write_blobs(&dir.join("xy.csv"), 200, false);
    ok(
        dir,
        "pretrain --config prior.json --model-config model.json --steps 30 --out m",
    );
}

#[test]
fn pretrain_tune_predict_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    assert!(dir.join("m/pretrain_report.json").exists());

    ok(dir, "tune --model m --data blobs.csv --config tune.json --out t");
    let report = ExperimentReport::load(&dir.join("t/report.jsonl")).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].dataset, "blobs");

    ok(dir, "predict --model m --data blobs.csv --prompt t/prompt --out p");
    let metrics: Value = serde_json::from_str(&fs::read_to_string(dir.join("p/metrics.json")).unwrap()).unwrap();
    let acc = metrics["accuracy"].as_f64().unwrap();
    assert!(
        (acc - report.rows[0].accuracy).abs() < 1e-12,
        "predict {acc} vs tune {}",
        report.rows[0].accuracy
    );
    let csv = fs::read_to_string(dir.join("p/predictions.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "row,label,predicted,p_0,p_1");
    assert_eq!(csv.lines().count(), 1 + metrics["rows"].as_u64().unwrap() as usize);

    ok(dir, "tune --model m --data blobs.csv --variant light --out r");
    for f in ["decision.json", "search.json", "report.jsonl"] {
        assert!(dir.join("r").join(f).exists(), "missing {f}");
    }
}

#[test]
fn context_tools_and_fairness_write_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);

    ok(dir, "sketch --data blobs.csv --method kmeans --n 20 --out s");
    let s: Value = serde_json::from_str(&fs::read_to_string(dir.join("s/sketch.json")).unwrap()).unwrap();
    assert_eq!(s["indices"].as_array().unwrap().len(), 20);

    ok(
        dir,
        "select-features --data blobs.csv --method pca --d-target 2 --out f",
    );
    assert!(dir.join("f/transform.json").exists());
    ok(
        dir,
        "predict --model m --data blobs.csv --transform f/transform.json --out fp",
    );

    write_json(
        &dir.join("fair.json"),
        &json!({"protected_column": "group", "protected_value": "a", "lambda": 1.0}),
    );
    ok(
        dir,
        "fair-tune --model m --data blobs.csv --spec fair.json --config tune.json --out fr",
    );
    let fr: Value = serde_json::from_str(&fs::read_to_string(dir.join("fr/fair_report.json")).unwrap()).unwrap();
    let dp = fr["dp"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&dp));
    let rows = ExperimentReport::load(&dir.join("fr/report.jsonl")).unwrap().rows;
    assert_eq!(rows[0].extra["dp"], dp);

    ok(dir, "grid-export --model m --data xy.csv --resolution 4 --out g");
    let grid = fs::read_to_string(dir.join("g/grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 16);
    assert_eq!(grid.lines().next().unwrap(), "x,y,p_0,p_1");
}

#[test]
fn bench_light_and_stats_agree_with_library() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    write_json(
        &dir.join("suite.json"),
        &json!({"datasets": [{"path": "blobs.csv"}, {"path": "xy.csv"}], "folds": 2}),
    );
    ok(dir, "bench --suite suite.json --model m --out b");
    let report = ExperimentReport::load(&dir.join("b/results.jsonl")).unwrap();
    assert_eq!(report.rows.len(), 2 * 2 * 2);
    assert_eq!(
        report.algorithms(),
        vec!["routed-light".to_string(), "zero-shot".to_string()]
    );
    for r in &report.rows {
        assert!((0.0..=1.0).contains(&r.accuracy));
        assert!(r.runtime_seconds >= 0.0);
    }

    let out = ok(dir, "stats --report b/results.jsonl");
    let printed: Value = serde_json::from_slice(&out.stdout).unwrap();
    let expected = mean_rank_and_wins(&report).unwrap();
    for (alg, (rank, wins)) in expected {
        let got = &printed["ranks_and_wins"][&alg];
        assert!((got[0].as_f64().unwrap() - rank).abs() < 1e-12);
        assert!((got[1].as_f64().unwrap() - wins).abs() < 1e-12);
    }
    assert!(printed["significance"]["skipped"].is_string());

    ok(dir, "stats --report b/results.jsonl --out st");
    let saved: Value = serde_json::from_str(&fs::read_to_string(dir.join("st/stats.json")).unwrap()).unwrap();
    assert_eq!(saved, printed);
}

#[test]
fn exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    assert_eq!(run(dir, "--help").status.code(), Some(0));
    assert_eq!(run(dir, "no-such-command").status.code(), Some(1));
    assert_eq!(run(dir, "tune --data x.csv").status.code(), Some(1));
    let missing = run(dir, "tune --model nowhere --data x.csv --out o");
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).starts_with("error:"));
}
