//! Dataset containers, loaders and synthetic generators.

mod adult;
mod graphs;
mod idx;
mod synth;

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layers::GraphBatch;
use crate::rng::{permutation, seeded};
use crate::tensor::Tensor;

pub use adult::{
    encode_adult, load_tabular_csv, load_tabular_csv_pair, read_csv_records, AdultRecord, ADULT_CATEGORICAL,
    ADULT_FEATURES, ADULT_INTEGER,
};
pub use graphs::{
    import_planetoid, import_tu, load_multigraph, load_nodegraph, parse_multigraph, write_multigraph,
    write_nodegraph, GraphRecord, NodegraphPaths, MUTAGENICITY_ELEMENTS,
};
pub use idx::{load_idx, load_mnist_dir, read_idx_images, read_idx_labels, write_idx_images, write_idx_labels};
pub use synth::{synth_generate, synth_motif_records, SynthKind, SynthParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    Tabular,
    Grid,
    Multigraph,
    Nodegraph,
}

#[derive(Clone, Debug)]
pub enum Features {
    /// One row per sample: `[n, d]` or `[n, C, H, W]`.
    Dense(Tensor),
    /// One graph per sample.
    Graphs(Vec<GraphBatch>),
    /// One graph whose nodes are the samples.
    Graph(GraphBatch),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub source: String,
    pub digest: String,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub kind: DatasetKind,
    pub features: Features,
    pub labels: Vec<usize>,
    /// Labeled training nodes; present exactly for node-graph datasets.
    pub label_mask: Option<Vec<bool>>,
    pub splits: BTreeMap<String, Vec<usize>>,
    pub class_count: usize,
    pub provenance: Provenance,
}

impl Dataset {
    pub fn new(
        kind: DatasetKind,
        features: Features,
        labels: Vec<usize>,
        label_mask: Option<Vec<bool>>,
        class_count: usize,
        provenance: Provenance,
    ) -> Result<Self> {
        let d = Dataset {
            kind,
            features,
            labels,
            label_mask,
            splits: BTreeMap::new(),
            class_count,
            provenance,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        let feature_ok = match (&self.features, self.kind) {
            (Features::Dense(t), DatasetKind::Tabular) => t.ndim() == 2,
            (Features::Dense(t), DatasetKind::Grid) => t.ndim() == 4,
            (Features::Graphs(_), DatasetKind::Multigraph) => true,
            (Features::Graph(_), DatasetKind::Nodegraph) => true,
            _ => false,
        };
        if !feature_ok {
            return Err(Error::contract(format!("features do not fit a {:?} dataset", self.kind)));
        }
        if self.labels.len() != n {
            return Err(Error::contract(format!("{} labels for {n} samples", self.labels.len())));
        }
        if let Some(&y) = self.labels.iter().find(|&&y| y >= self.class_count) {
            return Err(Error::contract(format!("label {y} out of range for {} classes", self.class_count)));
        }
        match (&self.label_mask, self.kind) {
            (Some(m), DatasetKind::Nodegraph) if m.len() == n => {}
            (None, k) if k != DatasetKind::Nodegraph => {}
            _ => return Err(Error::contract("a label mask must be present exactly for node-graph datasets")),
        }
        let mut seen = vec![false; n];
        for (name, idx) in &self.splits {
            for &i in idx {
                if i >= n {
                    return Err(Error::contract(format!("split `{name}` index {i} out of range")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::contract(format!("split `{name}` overlaps another split at {i}")));
                }
            }
        }
        Ok(())
    }

    /// Number of samples (rows, graphs, or nodes).
    pub fn len(&self) -> usize {
        match &self.features {
            Features::Dense(t) => t.rows(),
            Features::Graphs(g) => g.len(),
            Features::Graph(g) => g.num_nodes(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Shape of one sample as seen by the first layer: `[d]`, `[C, H, W]`,
    /// or `[node feature width]` for graphs.
    pub fn sample_shape(&self) -> Vec<usize> {
        match &self.features {
            Features::Dense(t) => t.shape()[1..].to_vec(),
            Features::Graphs(g) => vec![g.first().map_or(0, GraphBatch::feature_dim)],
            Features::Graph(g) => vec![g.feature_dim()],
        }
    }

    /// Width handed to the first layer: features, or input channels for grids.
    pub fn input_width(&self) -> usize {
        self.sample_shape()[0]
    }

    pub fn split(&self, name: &str) -> Result<&[usize]> {
        self.splits
            .get(name)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::contract(format!("dataset has no `{name}` split")))
    }

    /// Split indices whose labels may be used for supervision.
    pub fn labeled(&self, indices: &[usize]) -> Vec<usize> {
        match &self.label_mask {
            Some(m) => indices.iter().copied().filter(|&i| m[i]).collect(),
            None => indices.to_vec(),
        }
    }

    pub fn is_graph(&self) -> bool {
        matches!(self.kind, DatasetKind::Multigraph | DatasetKind::Nodegraph)
    }
}

/// Hex SHA-256 of the given byte chunks.
pub fn digest_bytes<'a>(chunks: impl IntoIterator<Item = &'a [u8]>) -> String {
    let mut h = Sha256::new();
    for c in chunks {
        h.update((c.len() as u64).to_le_bytes());
        h.update(c);
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn check_fractions(fractions: &[f64]) -> Result<()> {
    if fractions.is_empty() || fractions.iter().any(|&f| !(f > 0.0)) {
        return Err(Error::contract("split fractions must be positive"));
    }
    let total: f64 = fractions.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!("split fractions sum to {total}, expected 1")));
    }
    Ok(())
}

/// Contiguous partition sizes for `n` items, rounding so the parts cover `n`.
fn part_sizes(n: usize, fractions: &[f64]) -> Vec<usize> {
    let mut sizes = Vec::with_capacity(fractions.len());
    let mut acc = 0.0;
    let mut taken = 0;
    for (k, f) in fractions.iter().enumerate() {
        acc += f;
        let end = if k + 1 == fractions.len() {
            n
        } else {
            ((acc * n as f64).round() as usize).min(n)
        };
        sizes.push(end.saturating_sub(taken));
        taken = taken.max(end);
    }
    sizes
}

/// Default split names for two or three parts.
pub fn split_names(parts: usize) -> Vec<String> {
    match parts {
        1 => vec!["train".into()],
        2 => vec!["train".into(), "test".into()],
        3 => vec!["train".into(), "val".into(), "test".into()],
        k => (0..k).map(|i| format!("part{i}")).collect(),
    }
}

/// Seeded shuffle then contiguous partition into `train`/`test` (or
/// `train`/`val`/`test`). Stratified by class except for node graphs.
/// Replaces any existing splits.
pub fn split(mut dataset: Dataset, fractions: &[f64], seed: u64) -> Result<Dataset> {
    check_fractions(fractions)?;
    let n = dataset.len();
    let names = split_names(fractions.len());
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); fractions.len()];
    let mut rng = seeded(seed);
    if dataset.kind == DatasetKind::Nodegraph {
        let order = permutation(n, &mut rng);
        let mut start = 0;
        for (k, size) in part_sizes(n, fractions).into_iter().enumerate() {
            parts[k].extend_from_slice(&order[start..start + size]);
            start += size;
        }
    } else {
        for class in 0..dataset.class_count {
            let members: Vec<usize> = (0..n).filter(|&i| dataset.labels[i] == class).collect();
            if members.is_empty() {
                continue;
            }
            if members.len() < fractions.len() {
                return Err(Error::Stratification(format!(
                    "class {class} has {} samples for {} splits",
                    members.len(),
                    fractions.len()
                )));
            }
            let order = permutation(members.len(), &mut rng);
            let mut start = 0;
            for (k, size) in part_sizes(members.len(), fractions).into_iter().enumerate() {
                parts[k].extend(order[start..start + size].iter().map(|&j| members[j]));
                start += size;
            }
        }
        for p in &mut parts {
            p.sort_unstable();
            let mut order = permutation(p.len(), &mut rng);
            // shuffled within the split so classes interleave
            order.iter_mut().for_each(|o| *o = p[*o]);
            *p = order;
        }
    }
    dataset.splits = names.into_iter().zip(parts).collect();
    dataset.validate()?;
    Ok(dataset)
}
