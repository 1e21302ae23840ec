//! The subcommands, as library functions returning their summary records.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use mole::data::{
    import_planetoid, import_tu, synth_generate, synth_motif_records, write_idx_images, write_idx_labels,
    write_multigraph, write_nodegraph, Dataset, Features, SynthKind, SynthParams,
};
use mole::layers::{reference_architecture, Architecture};
use mole::probe::{dpi_check, export_embeddings, info_plane, silhouette, subsample, DpiReport, InfoPlanePoint};
use mole::trainer::{build_plan, checkpoint, train_bp, train_sequential, Model, TrainMode, TrainReport};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::dataset::{load_dataset, write_table};
use crate::error::{io_err, CliError, CliResult};

pub const CONFIG_FILE: &str = "config.toml";
pub const RUN_FILE: &str = "run.json";
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const REPORT_FILE: &str = "report.json";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.json";
pub const PROBE_FILE: &str = "probe.jsonl";
pub const EMBEDDINGS_FILE: &str = "embeddings.tsv";

/// Probes on fewer samples than this are flagged as unreliable.
pub const LOW_N_THRESHOLD: usize = 100;

/// Reference architecture with its input width and class count fitted to `data`.
pub fn fitted_architecture(cfg: &RunConfig, data: &Dataset) -> CliResult<Architecture> {
    Ok(reference_architecture(cfg.arch).with_io(data.input_width(), data.class_count)?)
}

/// Identity of a run: enough, with the resolved config, to repeat it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub mode: TrainMode,
    pub arch: String,
    pub suite: Option<String>,
    pub dataset_source: String,
    pub dataset_digest: String,
    pub dataset_samples: usize,
    pub toolkit_version: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub record: String,
    pub out: PathBuf,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| io_err(path, e))
}

fn json_line(v: &impl Serialize) -> String {
    serde_json::to_string(v).expect("record serializes")
}

/// Trains per `cfg.mode` and fills the run directory.
pub fn cmd_train(cfg: &RunConfig) -> CliResult<TrainSummary> {
    let data = load_dataset(&cfg.data)?;
    let arch = fitted_architecture(cfg, &data)?;
    let out = &cfg.out;
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    write_file(&out.join(CONFIG_FILE), cfg.to_toml())?;
    let run = RunRecord {
        seed: cfg.seed,
        mode: cfg.mode,
        arch: cfg.arch.as_str().into(),
        suite: (cfg.mode == TrainMode::Mole).then(|| cfg.suite.to_string()),
        dataset_source: data.provenance.source.clone(),
        dataset_digest: data.provenance.digest.clone(),
        dataset_samples: data.len(),
        toolkit_version: env!("CARGO_PKG_VERSION").into(),
    };
    write_file(&out.join(RUN_FILE), serde_json::to_string_pretty(&run).expect("run record serializes") + "\n")?;

    let result = match cfg.mode {
        TrainMode::Mole => build_plan(&arch, cfg.suite, &cfg.train, cfg.seed).and_then(|p| train_sequential(&p, &data)),
        TrainMode::Bp => train_bp(&arch, &data, &cfg.train, cfg.seed),
    };
    let (model, report) = match result {
        Ok(r) => r,
        Err(e) if e.is_numeric() => return Err(numeric_failure(out, "train", e)),
        Err(e) => return Err(e.into()),
    };
    checkpoint::save(&model, &out.join(CHECKPOINT_FILE))?;
    write_file(&out.join(REPORT_FILE), serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    let mut log = Vec::new();
    report.write_log(&mut log)?;
    write_file(&out.join(LOG_FILE), log)?;
    Ok(TrainSummary {
        record: "train".into(),
        out: out.clone(),
        train_accuracy: report.train_accuracy,
        test_accuracy: report.test_accuracy,
    })
}

fn numeric_failure(dir: &Path, command: &str, e: mole::Error) -> CliError {
    #[derive(Serialize)]
    struct Diagnostics<'a> {
        record: &'a str,
        command: &'a str,
        error: String,
    }
    let path = dir.join(DIAGNOSTICS_FILE);
    let body = json_line(&Diagnostics {
        record: "diagnostics",
        command,
        error: e.to_string(),
    }) + "\n";
    // The numeric error is what gets reported; a failed write only loses the copy.
    let _ = fs::create_dir_all(dir).and_then(|_| fs::write(&path, body));
    CliError::Numeric {
        source: e,
        diagnostics: path,
    }
}

pub fn read_report(dir: &Path) -> CliResult<TrainReport> {
    let path = dir.join(REPORT_FILE);
    let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

/// A checkpoint and the dataset it is evaluated on.
pub struct Loaded {
    pub model: Model,
    pub data: Dataset,
}

pub fn load_for_eval(checkpoint_path: &Path, cfg: &RunConfig) -> CliResult<Loaded> {
    let model = checkpoint::load(checkpoint_path)?;
    let data = load_dataset(&cfg.data)?;
    model.check_data(&data)?;
    Ok(Loaded { model, data })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub record: String,
    pub split: String,
    pub samples: usize,
    pub accuracy: f64,
}

pub fn cmd_eval(checkpoint_path: &Path, cfg: &RunConfig, split: &str) -> CliResult<EvalRecord> {
    let Loaded { model, data } = load_for_eval(checkpoint_path, cfg)?;
    let accuracy = model.accuracy(&data, split)?;
    Ok(EvalRecord {
        record: "eval".into(),
        split: split.into(),
        samples: data.split(split)?.len(),
        accuracy,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerRecord {
    pub record: String,
    #[serde(flatten)]
    pub point: InfoPlanePoint,
    /// Class separation of the layer's representation; informational.
    pub silhouette: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpiRecord {
    pub record: String,
    pub split: String,
    pub samples: usize,
    pub low_n: bool,
    pub tolerance_bits: f64,
    /// Reported only; not part of `pass`.
    pub i_tx: DpiReport,
    pub i_ty: DpiReport,
    /// I(Y';Y) ≤ I(X;Y) + tolerance.
    pub endpoint_pass: bool,
    pub pass: bool,
}

pub struct ProbeOutput {
    pub layers: Vec<LayerRecord>,
    pub dpi: DpiRecord,
}

pub fn probe_model(model: &Model, data: &Dataset, cfg: &RunConfig) -> CliResult<ProbeOutput> {
    let p = &cfg.probe;
    let seed = cfg.probe_seed();
    let points = info_plane(model, data, &p.split, p.samples, seed)?;
    let idx = subsample(data.split(&p.split)?, p.samples, seed);
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let mut sil = vec![silhouette(&mole::probe::input_rows(data, &idx)?.flatten_rows(), &labels)?];
    for t in model.module_outputs(data, &idx)? {
        sil.push(silhouette(&t.flatten_rows(), &labels)?);
    }
    let tx: Vec<f64> = points.iter().map(|q| q.i_tx_bits).collect();
    let ty: Vec<f64> = points.iter().map(|q| q.i_ty_bits).collect();
    let i_tx = dpi_check(&tx, p.tolerance_bits);
    let i_ty = dpi_check(&ty, p.tolerance_bits);
    let endpoint_pass = ty[ty.len() - 1] <= ty[0] + p.tolerance_bits;
    let n = points[0].n;
    let dpi = DpiRecord {
        record: "dpi".into(),
        split: p.split.clone(),
        samples: n,
        low_n: n < LOW_N_THRESHOLD,
        tolerance_bits: p.tolerance_bits,
        pass: i_ty.pass && endpoint_pass,
        i_tx,
        i_ty,
        endpoint_pass,
    };
    let layers = points
        .into_iter()
        .zip(sil)
        .map(|(point, silhouette)| LayerRecord {
            record: "info_plane".into(),
            point,
            silhouette,
        })
        .collect();
    Ok(ProbeOutput { layers, dpi })
}

/// Writes one `info_plane` line per layer and a closing `dpi` line.
pub fn cmd_probe(checkpoint_path: &Path, cfg: &RunConfig, out: &Path) -> CliResult<DpiRecord> {
    let Loaded { model, data } = load_for_eval(checkpoint_path, cfg)?;
    let probe = match probe_model(&model, &data, cfg) {
        Ok(p) => p,
        Err(CliError::Core(e)) if e.is_numeric() => {
            return Err(numeric_failure(out.parent().unwrap_or(Path::new(".")), "probe", e))
        }
        Err(e) => return Err(e),
    };
    let mut body = String::new();
    for l in &probe.layers {
        body.push_str(&json_line(l));
        body.push('\n');
    }
    body.push_str(&json_line(&probe.dpi));
    body.push('\n');
    write_file(out, body)?;
    Ok(probe.dpi)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountRecord {
    pub record: String,
    pub path: PathBuf,
    pub count: usize,
}

pub fn cmd_export(checkpoint_path: &Path, cfg: &RunConfig, split: &str, out: &Path) -> CliResult<CountRecord> {
    let Loaded { model, data } = load_for_eval(checkpoint_path, cfg)?;
    let count = export_embeddings(&model, &data, split, out)?;
    Ok(CountRecord {
        record: "embeddings".into(),
        path: out.to_path_buf(),
        count,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum ImportFormat {
    /// `{prefix}_A.txt`, `_graph_indicator.txt`, `_graph_labels.txt`,
    /// `_node_labels.txt` → one graph-record file.
    TuGraph,
    /// `{prefix}.content` and `{prefix}.cites` → a node-graph directory.
    PlanetoidLike,
}

pub fn cmd_import(format: ImportFormat, input: &Path, prefix: &str, output: &Path) -> CliResult<CountRecord> {
    let count = match format {
        ImportFormat::TuGraph => {
            let records = import_tu(input, prefix)?;
            if let Some(dir) = output.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
            }
            write_file(output, write_multigraph(&records))?;
            records.len()
        }
        ImportFormat::PlanetoidLike => import_planetoid(
            &input.join(format!("{prefix}.content")),
            &input.join(format!("{prefix}.cites")),
            output,
        )?,
    };
    Ok(CountRecord {
        record: "import".into(),
        path: output.to_path_buf(),
        count,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub record: String,
    pub kind: SynthKind,
    pub path: PathBuf,
    pub samples: usize,
    pub digest: String,
}

/// Writes a generated dataset in the matching container: a `table` CSV for
/// blobs, MNIST-layout IDX files for bars (pixels rounded to 1/255), a
/// node-graph directory for communities and graph records for motifs.
pub fn cmd_synth(kind: SynthKind, params: &SynthParams, seed: u64, out: &Path) -> CliResult<SynthRecord> {
    let d = synth_generate(kind, params, seed)?;
    let parent = |p: &Path| -> CliResult<()> {
        match p.parent().filter(|d| !d.as_os_str().is_empty()) {
            Some(dir) => fs::create_dir_all(dir).map_err(|e| io_err(dir, e)),
            None => Ok(()),
        }
    };
    match kind {
        SynthKind::GaussianBlobs => {
            parent(out)?;
            write_table(&d, out)?;
        }
        SynthKind::BarPatterns => write_idx_dir(&d, out)?,
        SynthKind::TwoCommunity => write_nodegraph(&d, out)?,
        SynthKind::MotifGraphs => {
            parent(out)?;
            write_file(out, write_multigraph(&synth_motif_records(params, seed)?))?;
        }
    }
    Ok(SynthRecord {
        record: "synth".into(),
        kind,
        path: out.to_path_buf(),
        samples: d.len(),
        digest: d.provenance.digest.clone(),
    })
}

fn write_idx_dir(d: &Dataset, dir: &Path) -> CliResult<()> {
    let Features::Dense(x) = &d.features else {
        return Err(CliError::usage("bar patterns are dense images"));
    };
    let shape = x.shape();
    let (rows, cols) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    if d.labels.iter().any(|&y| y > 9) {
        return Err(CliError::usage("the IDX layout holds digit labels 0..9 only"));
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let flat = x.clone().flatten_rows();
    for (split, stem) in [("train", "train"), ("test", "t10k")] {
        let idx = d.split(split)?;
        let mut pixels = Vec::with_capacity(idx.len() * rows * cols);
        for &i in idx {
            pixels.extend(flat.row(i).iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
        }
        let labels: Vec<u8> = idx.iter().map(|&i| d.labels[i] as u8).collect();
        write_file(&dir.join(format!("{stem}-images-idx3-ubyte")), write_idx_images(idx.len(), rows, cols, &pixels))?;
        write_file(&dir.join(format!("{stem}-labels-idx1-ubyte")), write_idx_labels(&labels))?;
    }
    Ok(())
}

/// Prints a record as one JSON line.
pub fn emit(out: &mut impl Write, record: &impl Serialize) -> CliResult<()> {
    writeln!(out, "{}", json_line(record)).map_err(|e| io_err("<stdout>", e))
}
