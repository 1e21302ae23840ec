//! Seeded synthetic datasets.
//!
//! - `gaussian_blobs`: class c has mean `separation/√2 · e_c` and unit
//!   isotropic noise, so any two means are `separation` apart.
//! - `bar_patterns`: `side × side` images; classes below `classes/2` draw a
//!   horizontal bar, the rest a vertical one, at a class-specific offset
//!   jittered by one pixel, plus clipped Gaussian pixel noise.
//! - `two_community`: stochastic block model with `classes` equal blocks
//!   (edge probability `p_in` inside, `p_out` across); features are the
//!   block indicator plus Gaussian noise. `labeled_per_class` nodes per
//!   block are labeled (the `train` split); 40% of the rest are test nodes.
//! - `motif_graphs`: random trees of 8–15 atoms drawn from elements
//!   {0, 1, 3, 4, 5} with a few extra bonds; class 1 graphs also carry a
//!   nitro-like motif (element 2 bonded to two element-3 atoms).

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::graphs::{assign_node_splits, multigraph_dataset, GraphRecord};
use super::{digest_bytes, split, Dataset, DatasetKind, Features, Provenance};
use crate::error::{Error, Result};
use crate::layers::GraphBatch;
use crate::rng::{permutation, seeded, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    GaussianBlobs,
    BarPatterns,
    TwoCommunity,
    MotifGraphs,
}

impl SynthKind {
    pub const ALL: [SynthKind; 4] = [
        SynthKind::GaussianBlobs,
        SynthKind::BarPatterns,
        SynthKind::TwoCommunity,
        SynthKind::MotifGraphs,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SynthKind::GaussianBlobs => "gaussian_blobs",
            SynthKind::BarPatterns => "bar_patterns",
            SynthKind::TwoCommunity => "two_community",
            SynthKind::MotifGraphs => "motif_graphs",
        }
    }

    pub fn dataset_kind(self) -> DatasetKind {
        match self {
            SynthKind::GaussianBlobs => DatasetKind::Tabular,
            SynthKind::BarPatterns => DatasetKind::Grid,
            SynthKind::TwoCommunity => DatasetKind::Nodegraph,
            SynthKind::MotifGraphs => DatasetKind::Multigraph,
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SynthKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "synthetic dataset",
                name: s.to_string(),
            })
    }
}

/// Generator parameters. Fields a generator does not use are ignored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthParams {
    /// Rows, images, nodes or graphs.
    pub samples: usize,
    pub classes: usize,
    /// Feature width (blobs, communities) or image side (bars).
    pub dim: usize,
    pub separation: f64,
    pub noise: f64,
    pub p_in: f64,
    pub p_out: f64,
    pub labeled_per_class: usize,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            samples: 1000,
            classes: 2,
            dim: 8,
            separation: 5.0,
            noise: 1.0,
            p_in: 0.1,
            p_out: 0.01,
            labeled_per_class: 20,
        }
    }
}

impl SynthParams {
    pub fn for_kind(kind: SynthKind) -> Self {
        let base = SynthParams::default();
        match kind {
            SynthKind::GaussianBlobs => base,
            SynthKind::BarPatterns => SynthParams {
                classes: 10,
                dim: 28,
                noise: 0.3,
                ..base
            },
            SynthKind::TwoCommunity => SynthParams {
                samples: 200,
                dim: 16,
                ..base
            },
            SynthKind::MotifGraphs => SynthParams { samples: 400, ..base },
        }
    }

    fn check(&self, kind: SynthKind) -> Result<()> {
        let bad = |m: String| Err(Error::contract(format!("{kind}: {m}")));
        if self.classes < 2 {
            return bad(format!("need at least 2 classes, got {}", self.classes));
        }
        if self.samples < 2 * self.classes {
            return bad(format!("{} samples are too few for {} classes", self.samples, self.classes));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() || !self.separation.is_finite() {
            return bad("noise must be finite and non-negative".into());
        }
        match kind {
            SynthKind::GaussianBlobs if self.dim < self.classes => {
                bad(format!("dim {} is below the class count {}", self.dim, self.classes))
            }
            SynthKind::BarPatterns if self.dim < 4 || self.classes.div_ceil(2) * 2 > self.dim => {
                bad(format!("side {} cannot hold {} distinct bars", self.dim, self.classes))
            }
            SynthKind::TwoCommunity
                if !(0.0..=1.0).contains(&self.p_in) || !(0.0..=1.0).contains(&self.p_out) =>
            {
                bad("edge probabilities must lie in [0, 1]".into())
            }
            SynthKind::TwoCommunity if self.dim < self.classes => {
                bad(format!("dim {} is below the class count {}", self.dim, self.classes))
            }
            SynthKind::TwoCommunity if self.labeled_per_class == 0 || self.labeled_per_class * self.classes >= self.samples => {
                bad(format!("{} labeled nodes per class do not fit", self.labeled_per_class))
            }
            SynthKind::MotifGraphs if self.classes != 2 => bad("motif graphs are binary".into()),
            _ => Ok(()),
        }
    }
}

fn gauss(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Balanced labels `i mod classes` in shuffled order.
fn balanced_labels(n: usize, classes: usize, rng: &mut Rng) -> Vec<usize> {
    permutation(n, rng).into_iter().map(|i| i % classes).collect()
}

fn blobs(p: &SynthParams, rng: &mut Rng) -> Result<(Features, Vec<usize>)> {
    let labels = balanced_labels(p.samples, p.classes, rng);
    let shift = p.separation / std::f64::consts::SQRT_2;
    let mut data = Vec::with_capacity(p.samples * p.dim);
    for &y in &labels {
        for j in 0..p.dim {
            let mean = if j == y { shift } else { 0.0 };
            data.push(mean + p.noise * gauss(rng));
        }
    }
    Ok((Features::Dense(Tensor::new(vec![p.samples, p.dim], data)?), labels))
}

fn bars(p: &SynthParams, rng: &mut Rng) -> Result<(Features, Vec<usize>)> {
    let side = p.dim;
    let labels = balanced_labels(p.samples, p.classes, rng);
    let per_axis = p.classes.div_ceil(2);
    let stride = side / per_axis;
    let mut data = Vec::with_capacity(p.samples * side * side);
    for &y in &labels {
        let (vertical, slot) = if y < per_axis { (false, y) } else { (true, y - per_axis) };
        let centre = slot * stride + stride / 2;
        let jitter: i64 = rng.gen_range(-1..=1);
        let at = (centre as i64 + jitter).clamp(0, side as i64 - 1) as usize;
        for r in 0..side {
            for c in 0..side {
                let line = if vertical { c } else { r };
                let on = line.abs_diff(at) <= 1;
                let v = if on { 1.0 } else { 0.0 } + p.noise * gauss(rng);
                data.push(v.clamp(0.0, 1.0));
            }
        }
    }
    let x = Tensor::new(vec![p.samples, 1, side, side], data)?;
    Ok((Features::Dense(x), labels))
}

fn communities(p: &SynthParams, rng: &mut Rng) -> Result<(Features, Vec<usize>, Vec<bool>, Vec<usize>)> {
    let n = p.samples;
    let labels = balanced_labels(n, p.classes, rng);
    let mut edges = Vec::new();
    for u in 0..n {
        for v in u + 1..n {
            let prob = if labels[u] == labels[v] { p.p_in } else { p.p_out };
            if rng.gen::<f64>() < prob {
                edges.push((u, v));
            }
        }
    }
    let mut data = Vec::with_capacity(n * p.dim);
    for &y in &labels {
        for j in 0..p.dim {
            data.push(if j == y { 1.0 } else { 0.0 } + p.noise * gauss(rng));
        }
    }
    let mut mask = vec![false; n];
    let mut taken = vec![0usize; p.classes];
    let mut rest = Vec::new();
    for i in permutation(n, rng) {
        if taken[labels[i]] < p.labeled_per_class {
            taken[labels[i]] += 1;
            mask[i] = true;
        } else {
            rest.push(i);
        }
    }
    let mut test: Vec<usize> = rest[..(rest.len() * 2) / 5].to_vec();
    test.sort_unstable();
    let graph = GraphBatch::single(Tensor::new(vec![n, p.dim], data)?, &edges)?;
    Ok((Features::Graph(graph), labels, mask, test))
}

const BASE_ELEMENTS: [usize; 5] = [0, 1, 3, 4, 5];

fn motif_record(label: usize, rng: &mut Rng) -> GraphRecord {
    let size = rng.gen_range(8..16);
    let mut nodes: Vec<usize> = (0..size).map(|_| BASE_ELEMENTS[rng.gen_range(0..BASE_ELEMENTS.len())]).collect();
    let mut edges: Vec<(usize, usize)> = (1..size).map(|v| (rng.gen_range(0..v), v)).collect();
    for _ in 0..rng.gen_range(0..3) {
        let (u, v) = (rng.gen_range(0..size), rng.gen_range(0..size));
        if u != v && !edges.contains(&(u.min(v), u.max(v))) {
            edges.push((u.min(v), u.max(v)));
        }
    }
    if label == 1 {
        let anchor = rng.gen_range(0..size);
        let n = nodes.len();
        nodes.extend([2, 3, 3]);
        edges.extend([(anchor, n), (n, n + 1), (n, n + 2)]);
    }
    GraphRecord { nodes, edges, label }
}

pub fn synth_generate(kind: SynthKind, params: &SynthParams, seed: u64) -> Result<Dataset> {
    params.check(kind)?;
    let mut rng = seeded(seed);
    let header = serde_json::to_vec(&(kind, params, seed)).expect("params serialize");
    let digest = digest_bytes([b"synth-v1".as_slice(), &header]);
    let provenance = Provenance {
        source: format!("synth:{kind}"),
        digest: digest.clone(),
    };
    match kind {
        SynthKind::GaussianBlobs | SynthKind::BarPatterns => {
            let (features, labels) = if kind == SynthKind::GaussianBlobs {
                blobs(params, &mut rng)?
            } else {
                bars(params, &mut rng)?
            };
            let d = Dataset::new(kind.dataset_kind(), features, labels, None, params.classes, provenance)?;
            split(d, &[0.8, 0.2], seed)
        }
        SynthKind::TwoCommunity => {
            let (features, labels, mask, test) = communities(params, &mut rng)?;
            let n = labels.len();
            let mut d = Dataset::new(kind.dataset_kind(), features, labels, Some(mask), params.classes, provenance)?;
            let mut is_test = vec![false; n];
            test.iter().for_each(|&i| is_test[i] = true);
            assign_node_splits(&mut d, &is_test)?;
            Ok(d)
        }
        SynthKind::MotifGraphs => {
            let records = motif_records(params, &mut rng);
            multigraph_dataset(&records, provenance.source, digest)
        }
    }
}

fn motif_records(params: &SynthParams, rng: &mut Rng) -> Vec<GraphRecord> {
    let labels = balanced_labels(params.samples, 2, rng);
    labels.iter().map(|&y| motif_record(y, rng)).collect()
}

/// The graph records behind `synth_generate(MotifGraphs, params, seed)`.
pub fn synth_motif_records(params: &SynthParams, seed: u64) -> Result<Vec<GraphRecord>> {
    params.check(SynthKind::MotifGraphs)?;
    Ok(motif_records(params, &mut seeded(seed)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kinds_and_params_validate() {
        for k in SynthKind::ALL {
            let d = synth_generate(k, &SynthParams::for_kind(k), 1).unwrap();
            assert_eq!(d.kind, k.dataset_kind());
            assert_eq!(k.as_str().parse::<SynthKind>().unwrap(), k);
        }
        let bad = SynthParams {
            classes: 1,
            ..SynthParams::default()
        };
        assert!(synth_generate(SynthKind::GaussianBlobs, &bad, 0).is_err());
        assert!("blobs".parse::<SynthKind>().is_err());
    }

    #[test]
    fn motif_records_are_valid() {
        let mut rng = seeded(4);
        for y in [0, 1, 0, 1] {
            let r = motif_record(y, &mut rng);
            assert_eq!(r.nodes.contains(&2), y == 1);
            assert!(r.to_graph().is_ok());
        }
    }
}
