//! Post-hoc analysis of trained models: accuracy, information-plane points,
//! data-processing checks, and per-layer embedding export.

use std::io::{BufRead, Write};
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Features};
use crate::error::{Error, Result};
use crate::estimators::{gram_matrix, renyi_entropy, Bandwidth, GramMatrix, DEFAULT_ALPHA};
use crate::rng::{permutation, seeded};
use crate::tensor::Tensor;
use crate::trainer::Model;

pub const DEFAULT_PROBE_SAMPLES: usize = 1000;
pub const DEFAULT_DPI_TOLERANCE: f64 = 0.15;

pub fn accuracy(model: &Model, data: &Dataset, split: &str) -> Result<f64> {
    model.accuracy(data, split)
}

/// Fraction of rows whose arg-max (lowest index on ties) equals the label.
pub fn argmax_accuracy(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    if scores.ndim() != 2 || scores.rows() != labels.len() {
        return Err(Error::dim(
            "accuracy",
            format!("scores {:?} for {} labels", scores.shape(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Err(Error::contract("accuracy of an empty split"));
    }
    let hits = scores.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InfoPlanePoint {
    /// 0 is the input itself; `k` is the output of module `k − 1`.
    pub layer: usize,
    pub i_tx_bits: f64,
    pub i_ty_bits: f64,
    pub n: usize,
    pub bandwidth_t: f64,
    pub bandwidth_x: f64,
    pub bandwidth_y: f64,
}

/// Gram matrices of `X` and one-hot `Y` with their entropies, shared by
/// every layer's estimate.
pub struct InfoPlaneProbe {
    ax: GramMatrix,
    ay: GramMatrix,
    sx: f64,
    sy: f64,
    alpha: f64,
}

fn hadamard(a: &GramMatrix, b: &GramMatrix) -> Result<GramMatrix> {
    let mut h: Vec<f64> = a.entries().data().iter().zip(b.entries().data()).map(|(x, y)| x * y).collect();
    let n = a.size();
    let tr: f64 = (0..n).map(|i| h[i * n + i]).sum();
    h.iter_mut().for_each(|v| *v /= tr);
    // exact symmetry for the wrapper's check
    for i in 0..n {
        for j in 0..i {
            h[j * n + i] = h[i * n + j];
        }
    }
    GramMatrix::from_normalized(Tensor::new(vec![n, n], h)?)
}

impl InfoPlaneProbe {
    pub fn new(x: &Tensor, labels: &[usize], classes: usize, alpha: f64) -> Result<Self> {
        if x.rows() != labels.len() {
            return Err(Error::dim("info_plane", format!("{} inputs for {} labels", x.rows(), labels.len())));
        }
        let ax = gram_matrix(x, Bandwidth::Median)?;
        let ay = gram_matrix(&Tensor::one_hot(labels, classes)?, Bandwidth::Median)?;
        Ok(InfoPlaneProbe {
            sx: renyi_entropy(&ax, alpha)?,
            sy: renyi_entropy(&ay, alpha)?,
            ax,
            ay,
            alpha,
        })
    }

    /// `I(T;X)` and `I(T;Y)` in bits for one representation, clamped at 0.
    pub fn point(&self, layer: usize, t: &Tensor) -> Result<InfoPlanePoint> {
        if t.rows() != self.ax.size() {
            return Err(Error::dim(
                "info_plane",
                format!("{} representation rows for {} samples", t.rows(), self.ax.size()),
            ));
        }
        let at = gram_matrix(t, Bandwidth::Median)?;
        let st = renyi_entropy(&at, self.alpha)?;
        let s_tx = renyi_entropy(&hadamard(&at, &self.ax)?, self.alpha)?;
        let s_ty = renyi_entropy(&hadamard(&at, &self.ay)?, self.alpha)?;
        Ok(InfoPlanePoint {
            layer,
            i_tx_bits: (st + self.sx - s_tx).max(0.0),
            i_ty_bits: (st + self.sy - s_ty).max(0.0),
            n: t.rows(),
            bandwidth_t: at.bandwidth(),
            bandwidth_x: self.ax.bandwidth(),
            bandwidth_y: self.ay.bandwidth(),
        })
    }
}

/// At most `cap` of `indices`, drawn with `seed`, in ascending order.
pub fn subsample(indices: &[usize], cap: usize, seed: u64) -> Vec<usize> {
    if indices.len() <= cap {
        return indices.to_vec();
    }
    let mut rng = seeded(seed);
    let mut pick: Vec<usize> = permutation(indices.len(), &mut rng)[..cap].iter().map(|&p| indices[p]).collect();
    pick.sort_unstable();
    pick
}

/// One row per sample of the raw input: feature rows, images, mean node
/// features per graph, or node feature rows.
pub fn input_rows(data: &Dataset, indices: &[usize]) -> Result<Tensor> {
    match &data.features {
        Features::Dense(x) => x.select_rows(indices),
        Features::Graphs(graphs) => {
            let rows = indices
                .iter()
                .map(|&i| {
                    let g = graphs
                        .get(i)
                        .ok_or_else(|| Error::contract(format!("graph index {i} out of range")))?;
                    let f = g.node_features();
                    let d = f.row_len();
                    let mut mean = vec![0.0; d];
                    for v in 0..f.rows() {
                        mean.iter_mut().zip(f.row(v)).for_each(|(m, x)| *m += x);
                    }
                    let n = f.rows().max(1) as f64;
                    Ok(mean.into_iter().map(|m| m / n).collect())
                })
                .collect::<Result<Vec<Vec<f64>>>>()?;
            Tensor::from_rows(&rows)
        }
        Features::Graph(g) => g.node_features().select_rows(indices),
    }
}

/// Information-plane points for the input and every module output, on a
/// seeded subsample of at most `samples` points of `split`.
pub fn info_plane(model: &Model, data: &Dataset, split: &str, samples: usize, seed: u64) -> Result<Vec<InfoPlanePoint>> {
    if samples < 2 {
        return Err(Error::contract("the information plane needs at least 2 samples"));
    }
    let idx = subsample(data.split(split)?, samples, seed);
    if idx.len() < 2 {
        return Err(Error::contract(format!("split `{split}` has fewer than 2 samples")));
    }
    let x = input_rows(data, &idx)?;
    let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
    let probe = InfoPlaneProbe::new(&x, &labels, data.class_count, DEFAULT_ALPHA)?;
    let mut points = vec![probe.point(0, &x)?];
    for (k, t) in model.module_outputs(data, &idx)?.iter().enumerate() {
        points.push(probe.point(k + 1, t)?);
    }
    Ok(points)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpiViolation {
    pub from: usize,
    pub to: usize,
    pub increase_bits: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpiReport {
    pub pass: bool,
    pub tolerance_bits: f64,
    pub violations: Vec<DpiViolation>,
}

/// Flags each adjacent pair of a layer-ordered sequence that increases by
/// more than `tolerance_bits`.
pub fn dpi_check(values: &[f64], tolerance_bits: f64) -> DpiReport {
    let violations: Vec<DpiViolation> = values
        .windows(2)
        .enumerate()
        .filter(|(_, w)| w[1] - w[0] > tolerance_bits)
        .map(|(i, w)| DpiViolation {
            from: i,
            to: i + 1,
            increase_bits: w[1] - w[0],
        })
        .collect();
    DpiReport {
        pass: violations.is_empty(),
        tolerance_bits,
        violations,
    }
}

/// The I(T;Y) sequence of a list of points.
pub fn dpi_check_points(points: &[InfoPlanePoint], tolerance_bits: f64) -> DpiReport {
    let v: Vec<f64> = points.iter().map(|p| p.i_ty_bits).collect();
    dpi_check(&v, tolerance_bits)
}

/// Projection onto the two leading principal axes.
#[derive(Clone, Debug, PartialEq)]
pub struct Pca2 {
    pub mean: Vec<f64>,
    /// Unit principal axes; a missing axis is all zeros.
    pub axes: [Vec<f64>; 2],
    /// Sample variance (divisor `n − 1`) along each axis.
    pub explained: [f64; 2],
    /// `[n, 2]` coordinates of the centered rows.
    pub projection: Tensor,
}

/// Principal axes are sign-fixed so their largest-magnitude entry is positive.
pub fn pca2(rows: &Tensor) -> Result<Pca2> {
    let x = rows.clone().flatten_rows();
    let (n, d) = (x.rows(), x.row_len());
    if n == 0 || d == 0 {
        return Err(Error::contract("PCA of an empty matrix"));
    }
    let mut mean = vec![0.0; d];
    for i in 0..n {
        mean.iter_mut().zip(x.row(i)).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let c = DMatrix::from_fn(n, d, |i, j| x.at2(i, j) - mean[j]);
    let denom = (n.max(2) - 1) as f64;
    // decompose the smaller of the covariance and the Gram matrix
    let (vals, vecs) = if d <= n {
        let cov = (c.transpose() * &c) / denom;
        let e = SymmetricEigen::new(cov);
        (e.eigenvalues, e.eigenvectors)
    } else {
        let gram = (&c * c.transpose()) / denom;
        let e = SymmetricEigen::new(gram);
        let mut axes = c.transpose() * &e.eigenvectors;
        for mut col in axes.column_iter_mut() {
            let norm = col.norm();
            if norm > 0.0 {
                col /= norm;
            }
        }
        (e.eigenvalues, axes)
    };
    let mut order: Vec<usize> = (0..vals.len()).collect();
    order.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]));
    let mut axes = [vec![0.0; d], vec![0.0; d]];
    let mut explained = [0.0; 2];
    for (slot, &j) in order.iter().take(2).enumerate() {
        let col = vecs.column(j);
        if col.norm() == 0.0 {
            continue;
        }
        let peak = col.iter().copied().max_by(|a, b| a.abs().total_cmp(&b.abs())).unwrap_or(0.0);
        let sign = if peak < 0.0 { -1.0 } else { 1.0 };
        axes[slot] = col.iter().map(|v| v * sign).collect();
        explained[slot] = vals[j].max(0.0);
    }
    let mut proj = Vec::with_capacity(n * 2);
    for i in 0..n {
        for axis in &axes {
            proj.push((0..d).map(|j| c[(i, j)] * axis[j]).sum());
        }
    }
    Ok(Pca2 {
        mean,
        axes,
        explained,
        projection: Tensor::new(vec![n, 2], proj)?,
    })
}

/// Mean silhouette coefficient under Euclidean distance, or `None` with
/// fewer than two clusters.
pub fn silhouette(rows: &Tensor, labels: &[usize]) -> Result<Option<f64>> {
    let x = rows.clone().flatten_rows();
    let n = x.rows();
    if n != labels.len() {
        return Err(Error::dim("silhouette", format!("{n} rows for {} labels", labels.len())));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let sizes = labels.iter().fold(vec![0usize; classes], |mut s, &y| {
        s[y] += 1;
        s
    });
    if sizes.iter().filter(|&&s| s > 0).count() < 2 {
        return Ok(None);
    }
    let mut total = 0.0;
    for i in 0..n {
        let mut sums = vec![0.0; classes];
        for j in 0..n {
            if i != j {
                let d: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                sums[labels[j]] += d.sqrt();
            }
        }
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..classes)
            .filter(|&c| c != own && sizes[c] > 0)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let m = a.max(b);
        if m > 0.0 {
            total += (b - a) / m;
        }
    }
    Ok(Some(total / n as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingRecord {
    /// Module `layer − 1`'s output.
    pub layer: usize,
    pub sample: usize,
    pub label: usize,
    pub pc: [f64; 2],
    pub vector: Vec<f64>,
}

pub const EMBEDDING_HEADER: &str = "layer\tsample\tlabel\tpc1\tpc2\tvector";

/// Flattened module outputs of every sample in `split`, with per-layer PCA
/// coordinates.
pub fn embedding_records(model: &Model, data: &Dataset, split: &str) -> Result<Vec<EmbeddingRecord>> {
    let idx = data.split(split)?;
    let mut out = Vec::new();
    for (k, t) in model.module_outputs(data, idx)?.into_iter().enumerate() {
        let t = t.flatten_rows();
        let pca = pca2(&t)?;
        for (r, &i) in idx.iter().enumerate() {
            out.push(EmbeddingRecord {
                layer: k + 1,
                sample: i,
                label: data.labels[i],
                pc: [pca.projection.at2(r, 0), pca.projection.at2(r, 1)],
                vector: t.row(r).to_vec(),
            });
        }
    }
    Ok(out)
}

/// Tab-separated records under a header row; the vector column holds
/// space-separated values in shortest round-trip form.
pub fn write_embeddings(records: &[EmbeddingRecord], out: &mut impl Write, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    writeln!(out, "{EMBEDDING_HEADER}").map_err(io)?;
    for r in records {
        let v: Vec<String> = r.vector.iter().map(|x| format!("{x:?}")).collect();
        writeln!(
            out,
            "{}\t{}\t{}\t{:?}\t{:?}\t{}",
            r.layer,
            r.sample,
            r.label,
            r.pc[0],
            r.pc[1],
            v.join(" ")
        )
        .map_err(io)?;
    }
    Ok(())
}

pub fn export_embeddings(model: &Model, data: &Dataset, split: &str, path: &Path) -> Result<usize> {
    let records = embedding_records(model, data, split)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_embeddings(&records, &mut w, path)?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(records.len())
}

pub fn read_embeddings(input: impl BufRead, path: &Path) -> Result<Vec<EmbeddingRecord>> {
    let mut lines = input.lines();
    let bad = |line: usize, msg: String| Error::parse(path, Some(line), msg);
    match lines.next() {
        Some(Ok(h)) if h == EMBEDDING_HEADER => {}
        Some(Err(e)) => return Err(Error::io(path, e)),
        _ => return Err(bad(1, "missing embedding header".into())),
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let no = i + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 6 {
            return Err(bad(no, format!("expected 6 columns, found {}", cols.len())));
        }
        let int = |s: &str, what: &str| s.parse::<usize>().map_err(|e| bad(no, format!("{what}: {e}")));
        let real = |s: &str| s.parse::<f64>().map_err(|e| bad(no, format!("value `{s}`: {e}")));
        out.push(EmbeddingRecord {
            layer: int(cols[0], "layer")?,
            sample: int(cols[1], "sample")?,
            label: int(cols[2], "label")?,
            pc: [real(cols[3])?, real(cols[4])?],
            vector: cols[5].split(' ').filter(|s| !s.is_empty()).map(real).collect::<Result<_>>()?,
        });
    }
    Ok(out)
}
