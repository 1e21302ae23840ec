//! Dataset construction from a resolved `[data]` section.

use std::path::Path;

use mole::data::{
    digest_bytes, load_mnist_dir, load_multigraph, load_nodegraph, load_tabular_csv, load_tabular_csv_pair, split,
    synth_generate, Dataset, DatasetKind, Features, NodegraphPaths, Provenance,
};
use mole::Tensor;

use crate::config::{DataConfig, DataFormat};
use crate::error::{io_err, CliError, CliResult};

pub fn load_dataset(cfg: &DataConfig) -> CliResult<Dataset> {
    let path = || {
        cfg.path
            .as_deref()
            .ok_or_else(|| CliError::config("data.path", "missing (config not resolved)"))
    };
    let d = match cfg.format {
        DataFormat::Adult => {
            let test = cfg
                .test_path
                .as_deref()
                .ok_or_else(|| CliError::config("data.test_path", "missing (config not resolved)"))?;
            load_tabular_csv_pair(path()?, test)?
        }
        DataFormat::AdultSingle => load_tabular_csv(path()?)?,
        DataFormat::Mnist => load_mnist_dir(path()?, cfg.train_limit)?,
        DataFormat::Multigraph => load_multigraph(path()?)?,
        DataFormat::Nodegraph => load_nodegraph(&NodegraphPaths::in_dir(path()?))?,
        DataFormat::Table => load_table(path()?)?,
        DataFormat::Synth => {
            let kind = cfg.kind.ok_or_else(|| CliError::config("data.kind", "required for synthetic data"))?;
            let params = cfg.params.clone().unwrap_or_else(|| mole::data::SynthParams::for_kind(kind));
            synth_generate(kind, &params, cfg.seed)?
        }
    };
    Ok(d)
}

/// Numeric CSV with a header row; the last column is a non-negative integer
/// label. Split 80/20, stratified, with seed 0.
pub fn load_table(path: &Path) -> CliResult<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    let bad = |line: u64, msg: String| CliError::usage(format!("parse error in {} line {line}: {msg}", path.display()));
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_reader(bytes.as_slice());
    let width = reader
        .headers()
        .map_err(|e| bad(1, e.to_string()))?
        .len();
    if width < 2 {
        return Err(bad(1, "need at least one feature column and a label column".into()));
    }
    let mut values = Vec::new();
    let mut labels = Vec::new();
    for rec in reader.records() {
        let rec = rec.map_err(|e| bad(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != width {
            return Err(bad(line, format!("{} fields, expected {width}", rec.len())));
        }
        for f in rec.iter().take(width - 1) {
            let v: f64 = f.trim().parse().map_err(|_| bad(line, format!("bad number {f:?}")))?;
            if !v.is_finite() {
                return Err(bad(line, format!("non-finite value {f:?}")));
            }
            values.push(v);
        }
        let y = &rec[width - 1];
        labels.push(y.trim().parse::<usize>().map_err(|_| bad(line, format!("bad label {y:?}")))?);
    }
    if labels.len() < 2 {
        return Err(bad(1, "fewer than two rows".into()));
    }
    let classes = labels.iter().max().map_or(2, |m| (m + 1).max(2));
    let x = Tensor::new(vec![labels.len(), width - 1], values)?;
    let d = Dataset::new(
        DatasetKind::Tabular,
        Features::Dense(x),
        labels,
        None,
        classes,
        Provenance {
            source: path.display().to_string(),
            digest: digest_bytes([b"table-v1".as_slice(), &bytes]),
        },
    )?;
    Ok(split(d, &[0.8, 0.2], 0)?)
}

/// Writes dense tabular data in the `table` layout.
pub fn write_table(d: &Dataset, path: &Path) -> CliResult<()> {
    let Features::Dense(x) = &d.features else {
        return Err(CliError::usage("only dense tabular data can be written as a table"));
    };
    if x.shape().len() != 2 {
        return Err(CliError::usage("only rank-2 features can be written as a table"));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    let csv_err = |e: csv::Error| CliError::usage(format!("{}: {e}", path.display()));
    let d_in = x.shape()[1];
    let mut header: Vec<String> = (0..d_in).map(|j| format!("x{j}")).collect();
    header.push("label".into());
    w.write_record(&header).map_err(csv_err)?;
    for (i, y) in d.labels.iter().enumerate() {
        let mut row: Vec<String> = x.row(i).iter().map(|v| format!("{v:?}")).collect();
        row.push(y.to_string());
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| io_err(path, e))
}
