use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mole_cli::commands::{CHECKPOINT_FILE, CONFIG_FILE, LOG_FILE, REPORT_FILE, RUN_FILE};
use mole_cli::config::{load, Overrides};
use serde_json::Value;

fn mole(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mole"))
        .args(args)
        .current_dir(dir)
        .env("MOLE_DATA_DIR", dir.join("datasets"))
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout_json(o: &Output) -> Value {
    let text = String::from_utf8_lossy(&o.stdout);
    serde_json::from_str(text.lines().last().expect("a record")).expect("json record")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const BLOBS: &str = r#"
arch = "adult_mlp"
suite = "mine"
[data]
format = "synth"
kind = "gaussian_blobs"
[data.params]
samples = 200
[train]
epochs = 4
batch_size = 50
lr = 0.01
critic_lr = 0.001
critic_steps = 2
"#;

fn blobs_config(dir: &Path) -> String {
    fs::write(dir.join("blobs.toml"), BLOBS).unwrap();
    "blobs.toml".into()
}

#[test]
fn unknown_key_is_rejected_by_name() {
    let t = tempfile::tempdir().unwrap();
    fs::write(t.path().join("bad.toml"), "[train]\nlearningrate = 0.1\n").unwrap();
    let o = mole(t.path(), &["train", "--config", "bad.toml", "--out", "r"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("learningrate"), "{}", stderr(&o));
    assert!(!t.path().join("r").exists());

    let o = mole(t.path(), &["train", "--set", "trian.epochs=3", "--out", "r"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("trian"), "{}", stderr(&o));
}

#[test]
fn train_writes_a_complete_run_directory_and_eval_agrees() {
    let t = tempfile::tempdir().unwrap();
    let cfg = blobs_config(t.path());
    let o = mole(t.path(), &["train", "--config", &cfg, "--out", "run", "--seed", "4"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let run = t.path().join("run");
    for f in [CONFIG_FILE, RUN_FILE, CHECKPOINT_FILE, REPORT_FILE, LOG_FILE] {
        assert!(run.join(f).is_file(), "missing {f}");
    }
    let record: Value = serde_json::from_str(&fs::read_to_string(run.join(RUN_FILE)).unwrap()).unwrap();
    assert_eq!(record["seed"], 4);
    assert_eq!(record["dataset_digest"].as_str().unwrap().len(), 64);

    let report: Value = serde_json::from_str(&fs::read_to_string(run.join(REPORT_FILE)).unwrap()).unwrap();
    for m in report["modules"].as_array().unwrap() {
        assert_eq!(m["trajectory"].as_array().unwrap().len(), 4);
    }
    let log = fs::read_to_string(run.join(LOG_FILE)).unwrap();
    let lines: Vec<Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3 * 4 + 1);
    assert_eq!(lines.last().unwrap()["record"], "summary");

    for (split, key) in [("test", "test_accuracy"), ("train", "train_accuracy")] {
        let o = mole(t.path(), &["eval", "--run", "run", "--split", split]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let acc = stdout_json(&o)["accuracy"].as_f64().unwrap();
        assert_eq!(acc.to_bits(), report[key].as_f64().unwrap().to_bits());
    }

    // The persisted config reproduces the run from anywhere.
    let o = mole(t.path(), &["train", "--config", "run/config.toml", "--out", "again"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let again = t.path().join("again");
    assert_eq!(fs::read(run.join(CHECKPOINT_FILE)).unwrap(), fs::read(again.join(CHECKPOINT_FILE)).unwrap());
}

#[test]
fn identical_runs_are_byte_identical() {
    let t = tempfile::tempdir().unwrap();
    let cfg = blobs_config(t.path());
    for (dir, threads) in [("a", "1"), ("b", "3")] {
        let o = mole(t.path(), &["train", "--config", &cfg, "--out", dir, "--threads", threads]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = mole(t.path(), &["probe", "--run", dir, "--samples", "30"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = mole(t.path(), &["export-embeddings", "--run", dir]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in [CHECKPOINT_FILE, REPORT_FILE, RUN_FILE, "probe.jsonl", "embeddings.tsv"] {
        let a = fs::read(t.path().join("a").join(f)).unwrap();
        let b = fs::read(t.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let o = mole(t.path(), &["train", "--config", &cfg, "--out", "c", "--seed", "1"]);
    assert_eq!(code(&o), 0);
    assert_ne!(
        fs::read(t.path().join("a").join(CHECKPOINT_FILE)).unwrap(),
        fs::read(t.path().join("c").join(CHECKPOINT_FILE)).unwrap()
    );
}

#[test]
fn corrupt_or_mismatched_checkpoints_exit_2() {
    let t = tempfile::tempdir().unwrap();
    let cfg = blobs_config(t.path());
    assert_eq!(code(&mole(t.path(), &["train", "--config", &cfg, "--out", "run", "--set", "mode=bp"])), 0);
    let ckpt = t.path().join("run").join(CHECKPOINT_FILE);
    let mut bytes = fs::read(&ckpt).unwrap();
    bytes[0] = b'X';
    fs::write(t.path().join("bad.ckpt"), &bytes).unwrap();
    let o = mole(t.path(), &["eval", "--run", "run", "--checkpoint", "bad.ckpt"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("parse error"), "{}", stderr(&o));

    fs::write(t.path().join("short.ckpt"), &fs::read(&ckpt).unwrap()[..40]).unwrap();
    assert_eq!(code(&mole(t.path(), &["eval", "--run", "run", "--checkpoint", "short.ckpt"])), 2);

    let o = mole(
        t.path(),
        &["eval", "--run", "run", "--set", "data.kind=two_community", "--set", "data.params.dim=8"],
    );
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("incompatible"), "{}", stderr(&o));
}

#[test]
fn numeric_failure_exits_3_with_diagnostics() {
    let t = tempfile::tempdir().unwrap();
    let cfg = blobs_config(t.path());
    let o = mole(
        t.path(),
        &["train", "--config", &cfg, "--out", "run", "--set", "mode=bp", "--set", "train.lr=1e300"],
    );
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let diag = t.path().join("run").join("diagnostics.json");
    assert!(stderr(&o).contains("diagnostics.json"));
    let d: Value = serde_json::from_str(&fs::read_to_string(diag).unwrap()).unwrap();
    assert_eq!(d["command"], "train");
}

#[test]
fn small_probe_warns_but_succeeds() {
    let t = tempfile::tempdir().unwrap();
    let cfg = blobs_config(t.path());
    assert_eq!(code(&mole(t.path(), &["train", "--config", &cfg, "--out", "run"])), 0);
    let o = mole(t.path(), &["probe", "--run", "run", "--samples", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("low-n"));
    let dpi = stdout_json(&o);
    assert_eq!((dpi["samples"].as_u64(), dpi["low_n"].as_bool()), (Some(10), Some(true)));
    let lines = fs::read_to_string(t.path().join("run/probe.jsonl")).unwrap();
    // Input plus three module outputs, then the check.
    assert_eq!(lines.lines().count(), 5);

    let o = mole(t.path(), &["probe", "--run", "run", "--split", "train", "--samples", "150"]);
    assert!(!stderr(&o).contains("low-n"));
    assert_eq!(stdout_json(&o)["low_n"], false);

    let o = mole(t.path(), &["probe", "--run", "run", "--set", "probe.split=\"train\"", "--samples", "150"]);
    assert_eq!(stdout_json(&o)["split"], "train");
}

fn write_tu(dir: &Path, indicator: &str) {
    let w = |name: &str, body: &str| fs::write(dir.join(format!("M_{name}.txt")), body).unwrap();
    w("A", "1, 2\n2, 1\n2, 3\n3, 2\n4, 5\n5, 4\n");
    w("graph_indicator", indicator);
    w("graph_labels", "1\n-1\n");
    w("node_labels", "0\n1\n2\n6\n6\n");
}

#[test]
fn import_is_idempotent_and_reports_truncation_lines() {
    let t = tempfile::tempdir().unwrap();
    let src = t.path().join("tu");
    fs::create_dir(&src).unwrap();
    write_tu(&src, "1\n1\n1\n2\n2\n");
    for out in ["a.jsonl", "b.jsonl"] {
        let o = mole(t.path(), &["import", "tu-graph", "--input", "tu", "--prefix", "M", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert_eq!(stdout_json(&o)["count"], 2);
    }
    assert_eq!(fs::read(t.path().join("a.jsonl")).unwrap(), fs::read(t.path().join("b.jsonl")).unwrap());

    write_tu(&src, "1\n1\n1\n2\n");
    let o = mole(t.path(), &["import", "tu-graph", "--input", "tu", "--prefix", "M", "--out", "c.jsonl"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));

    let mut content = String::new();
    for i in 0..30 {
        content.push_str(&format!("p{i} {} 1 {}\n", i % 2, ["A", "B"][i % 2]));
    }
    fs::write(src.join("x.content"), &content).unwrap();
    fs::write(src.join("x.cites"), "p0 p1\np1 p2\n").unwrap();
    for out in ["ga", "gb"] {
        let o = mole(t.path(), &["import", "planetoid-like", "--input", "tu", "--prefix", "x", "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
    }
    for f in ["features.txt", "edges.txt", "labels.txt", "mask.txt", "test.txt"] {
        assert_eq!(fs::read(t.path().join("ga").join(f)).unwrap(), fs::read(t.path().join("gb").join(f)).unwrap());
    }
    fs::write(src.join("x.content"), "p0 1 0 A\np1 1\n").unwrap();
    let o = mole(t.path(), &["import", "planetoid-like", "--input", "tu", "--prefix", "x", "--out", "gc"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn synth_containers_load_back() {
    let t = tempfile::tempdir().unwrap();
    let cases = [
        ("gaussian_blobs", "blobs.csv", "table", "samples=120"),
        ("bar_patterns", "bars", "mnist", "samples=60"),
        ("two_community", "comm", "nodegraph", "samples=60"),
        ("motif_graphs", "motif.jsonl", "multigraph", "samples=40"),
    ];
    for (kind, out, format, param) in cases {
        let o = mole(t.path(), &["synth", "--kind", kind, "--seed", "2", "--param", param, "--out", out]);
        assert_eq!(code(&o), 0, "{kind}: {}", stderr(&o));
        let rec = stdout_json(&o);
        let path = t.path().join(out);
        let cfg = load(
            None,
            &Overrides {
                set: vec![format!("data.format={format}"), format!("data.path={}", path.display())],
                ..Overrides::default()
            },
        )
        .unwrap();
        let d = mole_cli::dataset::load_dataset(&cfg.data).unwrap();
        assert_eq!(d.len() as u64, rec["samples"].as_u64().unwrap(), "{kind}");
    }
    let o = mole(t.path(), &["synth", "--kind", "gaussian_blobs", "--param", "sampels=3", "--out", "x.csv"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("sampels"));
}

#[test]
fn missing_dataset_is_a_user_error() {
    let t = tempfile::tempdir().unwrap();
    let o = mole(t.path(), &["train", "--out", "r"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("datasets/adult/adult.data"), "{}", stderr(&o));
}
