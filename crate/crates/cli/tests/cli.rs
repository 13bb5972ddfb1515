//! End-to-end tests over the compiled binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn footfall(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_footfall"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn write(path: &Path, content: &str) {
    std::fs::write(path, content).unwrap();
}

const TINY_CONFIG: &str = r#"
[synthetic]
city = "alpha"
num_pois = 6
num_days = 40
noise = 0.15
seed = 42
start_date = "2020-06-15"

[[synthetic.categories]]
label = "Hotel"
base_rate = 14.0
weekly_profile = [0.8, 0.8, 0.8, 0.8, 0.9, 1.5, 1.5]

[[synthetic.categories]]
label = "Bank"
base_rate = 6.0
weekly_profile = [1.3, 1.2, 1.2, 1.2, 1.2, 0.3, 0.2]

[model]
d_model = 16
num_heads = 2
encoder_layers = 1
decoder_layers = 1
ffn_dim = 32
max_len = 128
dropout = 0.0
tie_embeddings = false

[training]
learning_rate = 1e-3
epochs = 2
batch_size = 16
seed = 5
"#;

fn with_protocol(cities: &[(&str, &str)]) -> String {
    let mut cfg = TINY_CONFIG.to_string();
    cfg.push_str("\n[protocol]\nseeds = [1]\njobs = 2\n");
    for (name, path) in cities {
        cfg.push_str(&format!("\n[[protocol.cities]]\nname = \"{name}\"\npath = \"{path}\"\n"));
    }
    cfg
}

#[test]
fn synth_writes_expected_rows_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("run.toml"), TINY_CONFIG);
    let out = footfall(&["--config", "run.toml", "synth", "--out", "data.csv"], dir.path());
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("data.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 * 40);
    assert!(csv.starts_with("poi_id,category,city,date,visits\n"));

    let out2 = footfall(&["--config", "run.toml", "synth", "--out", "data2.csv"], dir.path());
    assert!(out2.status.success());
    let csv2 = std::fs::read_to_string(dir.path().join("data2.csv")).unwrap();
    assert_eq!(csv, csv2, "same config and seed must be byte-identical");
}

#[test]
fn synth_rejects_malformed_config_with_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("bad.toml"), "[synthetic]\nnum_poiz = 5\n");
    let out = footfall(&["--config", "bad.toml", "synth", "--out", "x.csv"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("num_poiz"), "message should name the key: {stderr}");
    assert!(!dir.path().join("x.csv").exists());
}

#[test]
fn ingest_normalizes_and_rejects_gaps() {
    let dir = tempfile::tempdir().unwrap();
    write(
        &dir.path().join("raw.csv"),
        "poi_id,category,city,date,visits\n1,Hotel,miami,2020-06-16,7\n1,Hotel,miami,2020-06-15,5\n",
    );
    let out = footfall(&["ingest", "--input", "raw.csv", "--out", "clean.csv"], dir.path());
    assert!(out.status.success());
    let clean = std::fs::read_to_string(dir.path().join("clean.csv")).unwrap();
    assert!(clean.contains("1,Hotel,miami,2020-06-15,5\n1,Hotel,miami,2020-06-16,7"));

    write(
        &dir.path().join("gap.csv"),
        "poi_id,category,city,date,visits\n1,Hotel,miami,2020-06-15,5\n1,Hotel,miami,2020-06-17,7\n",
    );
    let out = footfall(&["ingest", "--input", "gap.csv", "--out", "bad.csv"], dir.path());
    assert_eq!(out.status.code(), Some(3));
    assert!(!dir.path().join("bad.csv").exists(), "partial outputs must be removed");
}

/// The worked single-window fixture: one POI whose only window matches the
/// documented template examples.
fn table_fixture_csv() -> String {
    let counts = [11u32, 11, 10, 12, 9, 12, 6, 13, 10, 15, 16, 8, 8, 13, 19, 11];
    let start = chrono::NaiveDate::from_ymd_opt(2020, 6, 17).unwrap();
    let mut csv = String::from("poi_id,category,city,date,visits\n");
    for (k, c) in counts.iter().enumerate() {
        let d = start + chrono::Duration::days(k as i64);
        csv.push_str(&format!("385,Limited-Service Restaurant,miami,{d},{c}\n"));
    }
    csv
}

#[test]
fn prompt_emits_exact_template_strings() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("fixture.csv"), &table_fixture_csv());
    let out = footfall(
        &["prompt", "--data", "fixture.csv", "--variant", "a", "--out", "corpus.jsonl"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let corpus = std::fs::read_to_string(dir.path().join("corpus.jsonl")).unwrap();
    let record: serde_json::Value = serde_json::from_str(corpus.lines().next().unwrap()).unwrap();
    assert_eq!(
        record["input"],
        "Place-of-Interest (POI) 385 is a Limited-Service Restaurant. From June 17, 2020, Wednesday to July 01, 2020, Wednesday, there were 11, 11, 10, 12, 9, 12, 6, 13, 10, 15, 16, 8, 8, 13, 19 people visiting POI 385 on each day. On July 02, 2020, Thursday,"
    );
    assert_eq!(record["target"], "there will be 11 people visiting POI 385.");
    assert_eq!(record["mobility_target"], 11);
}

#[test]
fn prompt_no_dates_simplified_template() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("fixture.csv"), &table_fixture_csv());
    let out = footfall(
        &["prompt", "--data", "fixture.csv", "--variant", "c", "--no-dates", "--out", "c.jsonl"],
        dir.path(),
    );
    assert!(out.status.success());
    let corpus = std::fs::read_to_string(dir.path().join("c.jsonl")).unwrap();
    let record: serde_json::Value = serde_json::from_str(corpus.lines().next().unwrap()).unwrap();
    assert_eq!(
        record["input"],
        "there were 11, 11, 10, 12, 9, 12, 6, 13, 10, 15, 16, 8, 8, 13, 19 people visiting POI on each day."
    );
    assert_eq!(record["target"], "11");
    assert_eq!(record["category"], "Limited-Service Restaurant");
}

#[test]
fn prompt_on_empty_dataset_is_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("empty.csv"), "poi_id,category,city,date,visits\n");
    let out = footfall(
        &["prompt", "--data", "empty.csv", "--variant", "b", "--out", "x.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn unknown_variant_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("fixture.csv"), &table_fixture_csv());
    let out = footfall(
        &["prompt", "--data", "fixture.csv", "--variant", "z", "--out", "x.jsonl"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn train_then_eval_smoke() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("run.toml"), TINY_CONFIG);
    let out = footfall(&["--config", "run.toml", "synth", "--out", "data.csv"], dir.path());
    assert!(out.status.success());

    let out = footfall(
        &["--config", "run.toml", "train", "--data", "data.csv", "--out", "run"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let run = dir.path().join("run");
    for artifact in ["metrics.csv", "best.mobl", "vocab.txt", "config.toml", "run.log"] {
        assert!(run.join(artifact).exists(), "{artifact} missing");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.lines().count() >= 2);
    for line in metrics.lines().skip(1) {
        for field in line.split(',') {
            let v: f64 = field.parse().unwrap();
            assert!(v.is_finite());
        }
    }

    let out = footfall(
        &[
            "--config",
            "run.toml",
            "eval",
            "--checkpoint",
            "run/best.mobl",
            "--vocab",
            "run/vocab.txt",
            "--data",
            "data.csv",
            "--out",
            "metrics_eval.csv",
        ],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let eval_csv = std::fs::read_to_string(dir.path().join("metrics_eval.csv")).unwrap();
    assert!(eval_csv.starts_with("rmse,mae,parse_fail,oov_rate\n"));
    let values: Vec<f64> =
        eval_csv.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect();
    assert!(values.iter().all(|v| v.is_finite()));
}

#[test]
fn baseline_lr_exact_on_linear_fixture() {
    let dir = tempfile::tempdir().unwrap();
    // Perfectly linear counts: the affine map is exactly representable.
    let start = chrono::NaiveDate::from_ymd_opt(2020, 6, 15).unwrap();
    let mut csv = String::from("poi_id,category,city,date,visits\n");
    for poi in 0..2u32 {
        for day in 0..60i64 {
            let d = start + chrono::Duration::days(day);
            let v = 5 + poi as i64 + 2 * day;
            csv.push_str(&format!("{poi},Shop,nyc,{d},{v}\n"));
        }
    }
    write(&dir.path().join("linear.csv"), &csv);
    let out = footfall(
        &["baseline", "--name", "lr", "--data", "linear.csv", "--out", "lr.csv"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let metrics = std::fs::read_to_string(dir.path().join("lr.csv")).unwrap();
    let rmse: f64 = metrics.lines().nth(1).unwrap().split(',').next().unwrap().parse().unwrap();
    assert!(rmse < 1e-6, "rmse {rmse}");
}

#[test]
fn unknown_baseline_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("fixture.csv"), &table_fixture_csv());
    let out = footfall(
        &["baseline", "--name", "oracle", "--data", "fixture.csv", "--out", "x.csv"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn protocol_date_ablation_two_reports_per_city() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("run.toml"), TINY_CONFIG);
    for (city, seed) in [("alpha", "41"), ("beta", "43")] {
        let out = footfall(
            &["--config", "run.toml", "--seed", seed, "synth", "--out", &format!("{city}.csv")],
            dir.path(),
        );
        assert!(out.status.success());
    }
    // --seed also rewrites training seeds, so the protocol config is written
    // separately with its own seed list.
    let proto = with_protocol(&[("alpha", "alpha.csv"), ("beta", "beta.csv")]);
    write(&dir.path().join("proto.toml"), &proto);
    let out = footfall(
        &["--config", "proto.toml", "protocol", "--name", "date_ablation", "--out", "reports"],
        dir.path(),
    );
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    let aggregate = std::fs::read_to_string(dir.path().join("reports/aggregate.csv")).unwrap();
    for city in ["alpha", "beta"] {
        let rows = aggregate.lines().filter(|l| l.contains(&format!(",{city},{city},"))).count();
        assert_eq!(rows, 2, "expected with/without rows for {city}:\n{aggregate}");
    }
    for artifact in ["per_seed.csv", "aggregate.csv", "long.csv", "config.toml"] {
        assert!(dir.path().join("reports").join(artifact).exists());
    }
}

#[test]
fn protocol_requires_cities() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("run.toml"), TINY_CONFIG);
    let out = footfall(
        &["--config", "run.toml", "protocol", "--name", "standard", "--out", "r"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn unknown_protocol_is_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let proto = with_protocol(&[("alpha", "alpha.csv")]);
    write(&dir.path().join("proto.toml"), &proto);
    let out = footfall(
        &["--config", "proto.toml", "protocol", "--name", "mystery", "--out", "r"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn corrupt_checkpoint_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("fixture.csv"), &table_fixture_csv());
    std::fs::write(dir.path().join("bad.mobl"), b"NOPE").unwrap();
    std::fs::write(dir.path().join("vocab.txt"), "[PAD]\n[UNK]\n[CLS]\n[BOS]\n[EOS]\n11\n").unwrap();
    let out = footfall(
        &[
            "eval",
            "--checkpoint",
            "bad.mobl",
            "--vocab",
            "vocab.txt",
            "--data",
            "fixture.csv",
            "--out",
            "m.csv",
        ],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    write(&dir.path().join("run.toml"), TINY_CONFIG);
    let a = footfall(&["--config", "run.toml", "--seed", "7", "synth", "--out", "a.csv"], dir.path());
    let b = footfall(&["--config", "run.toml", "--seed", "8", "synth", "--out", "b.csv"], dir.path());
    assert!(a.status.success() && b.status.success());
    let a = std::fs::read_to_string(dir.path().join("a.csv")).unwrap();
    let b = std::fs::read_to_string(dir.path().join("b.csv")).unwrap();
    assert_ne!(a, b);
}
