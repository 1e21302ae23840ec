//! Run configuration.
//!
//! A TOML file, optionally pulling shared defaults from other files through
//! a top-level `include` (a path or a list of paths, relative to the
//! including file; later entries win, the including file wins over all).
//! Command-line values override file values, which override defaults.
//! Unknown keys are errors.

use std::path::{Path, PathBuf};

use mole::data::{SynthKind, SynthParams};
use mole::layers::ArchName;
use mole::probe::{DEFAULT_DPI_TOLERANCE, DEFAULT_PROBE_SAMPLES};
use mole::trainer::{Hyper, Suite, TrainMode};
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{io_err, CliError, CliResult};

pub const DATA_DIR_ENV: &str = "MOLE_DATA_DIR";
/// Training images kept from the MNIST train file unless configured.
pub const DEFAULT_MNIST_TRAIN_LIMIT: usize = 10_000;
const MAX_INCLUDE_DEPTH: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// `mole` (module-wise) or `bp` (end-to-end).
    pub mode: TrainMode,
    pub arch: ArchName,
    /// Estimator suite for module-wise training.
    pub suite: Suite,
    pub seed: u64,
    /// Run directory.
    pub out: PathBuf,
    /// Worker threads. Results do not depend on it.
    pub threads: usize,
    /// Root for relative dataset paths; defaults to `$MOLE_DATA_DIR`, then `data`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_root: Option<PathBuf>,
    pub data: DataConfig,
    pub train: Hyper,
    pub probe: ProbeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: TrainMode::Mole,
            arch: ArchName::AdultMlp,
            suite: Suite::Matrix,
            seed: 0,
            out: PathBuf::from("runs/latest"),
            threads: 1,
            data_root: None,
            data: DataConfig::default(),
            train: Hyper::default(),
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataFormat {
    /// `adult.data` and `adult.test`.
    #[default]
    Adult,
    /// One Adult-schema CSV split 2/3 – 1/3.
    AdultSingle,
    /// A directory with the four MNIST IDX files.
    Mnist,
    /// Line-delimited JSON graph records.
    Multigraph,
    /// A node-graph container directory.
    Nodegraph,
    /// Numeric CSV with a header; the last column is the class label.
    Table,
    /// Generated in memory.
    Synth,
}

impl DataFormat {
    fn default_path(self) -> Option<&'static str> {
        match self {
            DataFormat::Adult => Some("adult/adult.data"),
            DataFormat::Mnist => Some("mnist"),
            DataFormat::Multigraph => Some("mutagenicity/mutagenicity.jsonl"),
            DataFormat::Nodegraph => Some("cora"),
            DataFormat::AdultSingle | DataFormat::Table | DataFormat::Synth => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub format: DataFormat,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    /// Adult test file.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test_path: Option<PathBuf>,
    /// MNIST training images to keep.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train_limit: Option<usize>,
    /// Generator, for `synth`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kind: Option<SynthKind>,
    /// Generator parameters; unset fields take the generator's defaults.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub params: Option<SynthParams>,
    /// Generator seed, independent of the run seed.
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// Samples drawn for the information-plane estimates.
    pub samples: usize,
    pub tolerance_bits: f64,
    pub split: String,
    /// Subsampling seed; the run seed when unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            samples: DEFAULT_PROBE_SAMPLES,
            tolerance_bits: DEFAULT_DPI_TOLERANCE,
            split: "test".into(),
            seed: None,
        }
    }
}

/// Values given on the command line.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    /// `dotted.key=value` assignments; values are TOML, bare words are strings.
    pub set: Vec<String>,
}

/// Reads a file and everything it includes into one table.
pub fn read_table(path: &Path) -> CliResult<Table> {
    read_table_inner(path, &mut Vec::new())
}

fn read_table_inner(path: &Path, stack: &mut Vec<PathBuf>) -> CliResult<Table> {
    let canonical = path.canonicalize().map_err(|e| io_err(path, e))?;
    if stack.contains(&canonical) {
        return Err(CliError::config("include", format!("{} includes itself", path.display())));
    }
    if stack.len() >= MAX_INCLUDE_DEPTH {
        return Err(CliError::config("include", "includes nested too deeply"));
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut table: Table =
        toml::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let includes = match table.remove("include") {
        None => Vec::new(),
        Some(Value::String(s)) => vec![s],
        Some(Value::Array(items)) => items
            .into_iter()
            .map(|v| match v {
                Value::String(s) => Ok(s),
                other => Err(CliError::config("include", format!("expected a path, got {other}"))),
            })
            .collect::<CliResult<_>>()?,
        Some(other) => return Err(CliError::config("include", format!("expected a path or list, got {other}"))),
    };
    let base_dir = path.parent().unwrap_or(Path::new("."));
    stack.push(canonical);
    let mut merged = Table::new();
    for inc in includes {
        merge(&mut merged, read_table_inner(&base_dir.join(inc), stack)?);
    }
    stack.pop();
    merge(&mut merged, table);
    Ok(merged)
}

/// Deep merge; values in `top` replace those in `base` except that tables
/// are merged key by key.
pub fn merge(base: &mut Table, top: Table) {
    for (k, v) in top {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

/// Applies one `dotted.key=value` assignment.
pub fn assign(table: &mut Table, assignment: &str) -> CliResult<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| CliError::usage(format!("expected key=value, got {assignment:?}")))?;
    let key = key.trim();
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::usage(format!("bad key {key:?}")));
    }
    if parts[0] == "include" {
        return Err(CliError::config("include", "includes can only be given in files"));
    }
    let value = parse_value(raw.trim());
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = match entry {
            Value::Table(t) => t,
            _ => return Err(CliError::config(key, format!("`{p}` is not a table"))),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> Value {
    toml::from_str::<Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Strictly deserializes a merged table, naming the offending key on failure.
pub fn from_table(mut table: Table) -> CliResult<RunConfig> {
    fill_synth_params(&mut table)?;
    let value = Value::Table(table);
    serde_path_to_error::deserialize::<_, RunConfig>(value).map_err(|e| {
        let key = e.path().to_string();
        let inner = e.into_inner();
        CliError::Config {
            key: (key != ".").then_some(key),
            msg: first_line(&inner.to_string()),
        }
    })
}

/// Completes a partial `data.params` table from the generator's defaults.
fn fill_synth_params(table: &mut Table) -> CliResult<()> {
    let Some(Value::Table(data)) = table.get_mut("data") else {
        return Ok(());
    };
    let Some(kind) = data.get("kind") else {
        return Ok(());
    };
    let kind: SynthKind = match kind {
        Value::String(s) => s.parse().map_err(|e: mole::Error| CliError::config("data.kind", e.to_string()))?,
        other => return Err(CliError::config("data.kind", format!("expected a string, got {other}"))),
    };
    let defaults = Value::try_from(SynthParams::for_kind(kind)).expect("params serialize");
    let Value::Table(mut full) = defaults else {
        unreachable!("params serialize to a table")
    };
    match data.remove("params") {
        None => {}
        Some(Value::Table(given)) => merge(&mut full, given),
        Some(other) => return Err(CliError::config("data.params", format!("expected a table, got {other}"))),
    }
    data.insert("params".into(), Value::Table(full));
    Ok(())
}

/// File (if any), then `--set` assignments, then the dedicated flags.
pub fn load(path: Option<&Path>, overrides: &Overrides) -> CliResult<RunConfig> {
    let mut table = match path {
        Some(p) => read_table(p)?,
        None => Table::new(),
    };
    for a in &overrides.set {
        assign(&mut table, a)?;
    }
    if let Some(seed) = overrides.seed {
        let seed = i64::try_from(seed).map_err(|_| CliError::config("seed", "must not exceed 2^63 - 1"))?;
        table.insert("seed".into(), Value::Integer(seed));
    }
    if let Some(out) = &overrides.out {
        table.insert("out".into(), Value::String(out.display().to_string()));
    }
    if let Some(threads) = overrides.threads {
        table.insert("threads".into(), Value::Integer(threads as i64));
    }
    from_table(table)?.resolve()
}

impl RunConfig {
    /// Applies remaining defaults, makes dataset paths absolute and checks
    /// that every set field applies. Resolving twice changes nothing.
    pub fn resolve(mut self) -> CliResult<RunConfig> {
        if i64::try_from(self.seed).is_err() {
            return Err(CliError::config("seed", "must not exceed 2^63 - 1"));
        }
        if self.threads == 0 {
            return Err(CliError::config("threads", "must be at least 1"));
        }
        self.train.validate().map_err(|e| CliError::config("train", e.to_string()))?;
        if self.probe.samples < 2 {
            return Err(CliError::config("probe.samples", "need at least 2 samples"));
        }
        if !(self.probe.tolerance_bits >= 0.0) || !self.probe.tolerance_bits.is_finite() {
            return Err(CliError::config("probe.tolerance_bits", "must be finite and non-negative"));
        }
        let root = match self.data_root.take() {
            Some(r) => r,
            None => std::env::var_os(DATA_DIR_ENV).map_or_else(|| PathBuf::from("data"), PathBuf::from),
        };
        let root = absolute(&root, "data_root")?;
        let d = &mut self.data;
        let fmt = d.format;
        let unused = |key: &str, set: bool| -> CliResult<()> {
            if set {
                Err(CliError::config(format!("data.{key}"), format!("not used by format {fmt:?}")))
            } else {
                Ok(())
            }
        };
        unused("kind", fmt != DataFormat::Synth && d.kind.is_some())?;
        unused("params", fmt != DataFormat::Synth && d.params.is_some())?;
        unused("path", fmt == DataFormat::Synth && d.path.is_some())?;
        unused("test_path", fmt != DataFormat::Adult && d.test_path.is_some())?;
        unused("train_limit", fmt != DataFormat::Mnist && d.train_limit.is_some())?;
        match fmt {
            DataFormat::Synth => {
                let kind = d.kind.ok_or_else(|| CliError::config("data.kind", "required for synthetic data"))?;
                d.params.get_or_insert_with(|| SynthParams::for_kind(kind));
            }
            _ => {
                let path = match (d.path.take(), fmt.default_path()) {
                    (Some(p), _) => p,
                    (None, Some(p)) => PathBuf::from(p),
                    (None, None) => return Err(CliError::config("data.path", format!("required for format {fmt:?}"))),
                };
                d.path = Some(absolute(&root.join(path), "data.path")?);
                if fmt == DataFormat::Adult {
                    let test = d.test_path.take().unwrap_or_else(|| PathBuf::from("adult/adult.test"));
                    d.test_path = Some(absolute(&root.join(test), "data.test_path")?);
                }
                if fmt == DataFormat::Mnist && d.train_limit.is_none() {
                    d.train_limit = Some(DEFAULT_MNIST_TRAIN_LIMIT);
                }
            }
        }
        self.data_root = Some(root);
        Ok(self)
    }

    pub fn probe_seed(&self) -> u64 {
        self.probe.seed.unwrap_or(self.seed)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved config serializes")
    }
}

fn first_line(s: &str) -> String {
    s.lines().next().unwrap_or_default().trim().to_string()
}

fn absolute(p: &Path, key: &str) -> CliResult<PathBuf> {
    std::path::absolute(p).map_err(|e| CliError::config(key, format!("{}: {e}", p.display())))
}
