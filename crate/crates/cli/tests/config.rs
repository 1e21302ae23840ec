use std::fs;
use std::path::Path;

use mole::data::SynthKind;
use mole::trainer::{Suite, TrainMode};
use mole_cli::config::{from_table, load, read_table, DataFormat, Overrides, RunConfig};
use mole_cli::CliError;

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn key_of(e: CliError) -> Option<String> {
    match e {
        CliError::Config { key, .. } => key,
        other => panic!("expected a config error, got {other}"),
    }
}

fn with_root(set: &[&str]) -> Overrides {
    let mut s: Vec<String> = vec!["data_root=/nonexistent".into()];
    s.extend(set.iter().map(|a| a.to_string()));
    Overrides {
        set: s,
        ..Overrides::default()
    }
}

#[test]
fn defaults_apply_without_a_file() {
    let c = load(None, &with_root(&[])).unwrap();
    assert_eq!((c.mode, c.suite, c.seed, c.threads), (TrainMode::Mole, Suite::Matrix, 0, 1));
    assert_eq!((c.train.epochs, c.train.batch_size, c.train.lr), (30, 128, 1e-3));
    assert_eq!(c.data.format, DataFormat::Adult);
    assert_eq!(c.data.path.as_deref(), Some(Path::new("/nonexistent/adult/adult.data")));
    assert_eq!(c.data.test_path.as_deref(), Some(Path::new("/nonexistent/adult/adult.test")));
    assert_eq!(c.probe.samples, 1000);
    assert_eq!(c.probe.tolerance_bits, 0.15);
}

#[test]
fn flags_beat_file_beat_includes_beat_defaults() {
    let t = tempfile::tempdir().unwrap();
    fs::create_dir(t.path().join("shared")).unwrap();
    write(
        t.path(),
        "shared/base.toml",
        "seed = 1\nsuite = \"mine\"\n[train]\nepochs = 5\nlr = 0.1\nbatch_size = 16\n",
    );
    write(t.path(), "shared/extra.toml", "[train]\nbatch_size = 32\ncritic_steps = 9\n");
    let file = write(
        t.path(),
        "run.toml",
        "include = [\"shared/base.toml\", \"shared/extra.toml\"]\nseed = 2\ndata_root = \"/d\"\n[train]\nepochs = 7\n",
    );
    let c = load(Some(&file), &Overrides::default()).unwrap();
    assert_eq!((c.seed, c.suite), (2, Suite::Mine));
    assert_eq!((c.train.epochs, c.train.lr, c.train.batch_size, c.train.critic_steps), (7, 0.1, 32, 9));
    assert_eq!(c.train.critic_lr, 1e-4);

    let ov = Overrides {
        seed: Some(11),
        out: Some("elsewhere".into()),
        threads: Some(4),
        set: vec!["seed=3".into(), "train.epochs=9".into(), "train.modules.1.lr=0.5".into()],
    };
    let c = load(Some(&file), &ov).unwrap();
    assert_eq!((c.seed, c.threads, c.train.epochs), (11, 4, 9));
    assert_eq!(c.out, Path::new("elsewhere"));
    assert_eq!(c.train.modules[&1].lr, Some(0.5));
}

#[test]
fn resolved_config_round_trips() {
    let ov = with_root(&[
        "data.format=synth",
        "data.kind=bar_patterns",
        "data.params.samples=60",
        "train.modules.0.epochs=2",
        "mode=bp",
    ]);
    let c = load(None, &ov).unwrap();
    let p = c.data.params.as_ref().unwrap();
    assert_eq!((p.samples, p.dim, p.classes), (60, 28, 10));
    assert_eq!(c.data.kind, Some(SynthKind::BarPatterns));

    let t = tempfile::tempdir().unwrap();
    let f = write(t.path(), "resolved.toml", &c.to_toml());
    let again = from_table(read_table(&f).unwrap()).unwrap().resolve().unwrap();
    assert_eq!(again, c);
    assert_eq!(c.clone().resolve().unwrap(), c);
}

#[test]
fn strictness() {
    let t = tempfile::tempdir().unwrap();
    let bad = |body: &str| {
        let f = write(t.path(), "c.toml", body);
        key_of(load(Some(&f), &with_root(&[])).unwrap_err())
    };
    assert_eq!(bad("[train]\nlearningrate = 1.0\n").as_deref(), Some("train.learningrate"));
    assert_eq!(bad("sed = 1\n").as_deref(), Some("sed"));
    assert_eq!(bad("[probe]\nsample = 1\n").as_deref(), Some("probe.sample"));
    assert_eq!(bad("[data]\nkind = \"gaussian_blobs\"\n").as_deref(), Some("data.kind"));
    assert_eq!(bad("[data]\nformat = \"synth\"\n").as_deref(), Some("data.kind"));
    assert_eq!(bad("[data]\nformat = \"table\"\n").as_deref(), Some("data.path"));
    assert_eq!(bad("[train]\nbatch_size = 0\n").as_deref(), Some("train"));
    assert_eq!(bad("[train.modules.first]\nlr = 1.0\n").as_deref(), Some("train.modules"));
    assert_eq!(bad("[data]\nformat = \"synth\"\nkind = \"blobs\"\n").as_deref(), Some("data.kind"));
    assert_eq!(bad("suite = \"dim\"\n").as_deref(), Some("suite"));
    assert_eq!(bad("threads = 0\n").as_deref(), Some("threads"));

    write(t.path(), "a.toml", "include = \"b.toml\"\n");
    write(t.path(), "b.toml", "include = \"a.toml\"\n");
    let e = load(Some(&t.path().join("a.toml")), &Overrides::default()).unwrap_err();
    assert_eq!(key_of(e).as_deref(), Some("include"));

    let ov = Overrides {
        seed: Some(u64::MAX),
        ..with_root(&[])
    };
    assert_eq!(key_of(load(None, &ov).unwrap_err()).as_deref(), Some("seed"));
}

#[test]
fn relative_dataset_paths_use_the_data_root() {
    let c = load(None, &with_root(&["data.format=multigraph", "data.path=g.jsonl"])).unwrap();
    assert_eq!(c.data.path.as_deref(), Some(Path::new("/nonexistent/g.jsonl")));
    let c = load(None, &with_root(&["data.format=nodegraph", "data.path=/abs/cora"])).unwrap();
    assert_eq!(c.data.path.as_deref(), Some(Path::new("/abs/cora")));
    let c = load(None, &with_root(&["data.format=mnist"])).unwrap();
    assert_eq!(c.data.train_limit, Some(10_000));
    assert_eq!(RunConfig::default().probe_seed(), 0);
}
