//! Training traces and the line-delimited epoch log.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, Units};
use crate::layers::{ArchName, ObjectiveTag};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    Mole,
    Bp,
}

/// The run of one module, or of the whole network for end-to-end training
/// (`module` is `None`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleTrace {
    pub module: Option<usize>,
    pub tag: ObjectiveTag,
    pub estimator: Option<EstimatorKind>,
    pub units: Units,
    /// Sample-weighted mean objective per epoch, measured before each update.
    pub trajectory: Vec<f64>,
    pub skipped_batches: usize,
    #[serde(skip)]
    pub epoch_ms: Vec<u64>,
}

impl ModuleTrace {
    pub fn wall_ms(&self) -> u64 {
        self.epoch_ms.iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub arch: ArchName,
    pub suite: Option<String>,
    pub seed: u64,
    pub modules: Vec<ModuleTrace>,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub config: serde_json::Value,
}

#[derive(Serialize)]
struct EpochRecord<'a> {
    record: &'a str,
    module: Option<usize>,
    epoch: usize,
    objective: f64,
    wall_ms: u64,
}

#[derive(Serialize)]
struct SummaryRecord<'a> {
    record: &'a str,
    mode: TrainMode,
    arch: ArchName,
    seed: u64,
    module_wall_ms: Vec<u64>,
    train_accuracy: f64,
    test_accuracy: f64,
}

impl TrainReport {
    /// One JSON object per epoch, then a summary line.
    pub fn write_log(&self, out: &mut impl Write) -> Result<()> {
        let io = |e: std::io::Error| Error::io("<log>", e);
        for m in &self.modules {
            for (epoch, &objective) in m.trajectory.iter().enumerate() {
                let rec = EpochRecord {
                    record: "epoch",
                    module: m.module,
                    epoch,
                    objective,
                    wall_ms: m.epoch_ms.get(epoch).copied().unwrap_or(0),
                };
                writeln!(out, "{}", to_json(&rec)?).map_err(io)?;
            }
        }
        let summary = SummaryRecord {
            record: "summary",
            mode: self.mode,
            arch: self.arch,
            seed: self.seed,
            module_wall_ms: self.modules.iter().map(ModuleTrace::wall_ms).collect(),
            train_accuracy: self.train_accuracy,
            test_accuracy: self.test_accuracy,
        };
        writeln!(out, "{}", to_json(&summary)?).map_err(io)
    }
}

fn to_json(v: &impl Serialize) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::contract(format!("cannot serialize log record: {e}")))
}
