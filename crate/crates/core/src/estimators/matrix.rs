//! Matrix-based Rényi entropy and mutual information.
//!
//! Samples are mapped to a trace-normalized RBF Gram matrix `A`, whose
//! spectrum stands in for a probability distribution:
//! `S_α(A) = log2(Σ λ_i^α) / (1 − α)`. Joint entropy uses the normalized
//! Hadamard product `A∘B / tr(A∘B)`, and `I(A;B) = S(A) + S(B) − S(A∘B)`.
//!
//! Inputs with more than two axes (`[n, C, ...]`) are treated channel by
//! channel: each channel gets its own Gram matrix and the normalized
//! matrices are averaged.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use super::{EstimatorKind, MIEstimate};
use crate::autodiff::{pairwise_sq_dist, Tape, Var, EIGEN_FLOOR};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_ALPHA: f64 = 1.01;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the batch, or 1 when that median is 0.
    Median,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GramMatrix {
    entries: Tensor,
    bandwidth: f64,
    trace_normalized: bool,
}

impl GramMatrix {
    /// Wraps an existing trace-one symmetric PSD matrix.
    pub fn from_normalized(entries: Tensor) -> Result<Self> {
        let n = square_dim(&entries)?;
        let d = entries.data();
        for i in 0..n {
            for j in 0..i {
                if (d[i * n + j] - d[j * n + i]).abs() > 1e-12 {
                    return Err(Error::contract("Gram matrix is not symmetric"));
                }
            }
        }
        let tr: f64 = (0..n).map(|i| d[i * n + i]).sum();
        if (tr - 1.0).abs() > 1e-12 {
            return Err(Error::contract(format!("Gram matrix trace is {tr}, expected 1")));
        }
        Ok(GramMatrix {
            entries,
            bandwidth: f64::NAN,
            trace_normalized: true,
        })
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn size(&self) -> usize {
        self.entries.rows()
    }

    /// The RBF bandwidth; for multi-channel input, the mean over channels.
    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    pub fn trace_normalized(&self) -> bool {
        self.trace_normalized
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let n = self.size();
        let m = DMatrix::from_row_slice(n, n, self.entries.data());
        let mut ev: Vec<f64> = SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }
}

fn square_dim(t: &Tensor) -> Result<usize> {
    match t.shape() {
        [n, m] if n == m => Ok(*n),
        s => Err(Error::dim("gram", format!("expected a square matrix, got {s:?}"))),
    }
}

/// Median of the pairwise Euclidean distances of the rows of `x`, falling
/// back to 1 when the median is 0.
pub fn median_bandwidth(x: &Tensor) -> Result<f64> {
    let (n, d) = as_rows(x)?;
    let sq = pairwise_sq_dist(x.data(), n, d);
    Ok(median_of_upper(&sq, n))
}

fn median_of_upper(sq: &[f64], n: usize) -> f64 {
    match median_pairs(sq, n) {
        MedianPairs::One(k) => sq[k].sqrt(),
        MedianPairs::Two(a, b) => 0.5 * (sq[a].sqrt() + sq[b].sqrt()),
        MedianPairs::Zero => 1.0,
    }
}

/// Which upper-triangle entries of a squared-distance matrix hold the median
/// distance.
enum MedianPairs {
    One(usize),
    Two(usize, usize),
    /// The median distance is 0.
    Zero,
}

fn median_pairs(sq: &[f64], n: usize) -> MedianPairs {
    let mut flat: Vec<usize> = (0..n)
        .flat_map(|i| ((i + 1)..n).map(move |j| i * n + j))
        .collect();
    let m = flat.len();
    let hi = m / 2;
    let by_dist = |a: &usize, b: &usize| sq[*a].total_cmp(&sq[*b]).then(a.cmp(b));
    let (lower_part, &mut upper, _) = flat.select_nth_unstable_by(hi, by_dist);
    let pick = if m % 2 == 1 {
        MedianPairs::One(upper)
    } else {
        let lower = *lower_part.iter().max_by(|a, b| by_dist(a, b)).expect("two or more pairs");
        MedianPairs::Two(lower, upper)
    };
    let zero = match pick {
        MedianPairs::One(k) => sq[k] == 0.0,
        MedianPairs::Two(a, b) => sq[a] + sq[b] == 0.0,
        MedianPairs::Zero => true,
    };
    if zero {
        MedianPairs::Zero
    } else {
        pick
    }
}

fn as_rows(x: &Tensor) -> Result<(usize, usize)> {
    if x.ndim() == 0 {
        return Err(Error::dim("gram", "scalar input"));
    }
    Ok((x.rows(), x.row_len()))
}

fn check_samples(shape: &[usize], finite: bool) -> Result<()> {
    if shape.is_empty() || shape[0] < 2 {
        return Err(Error::contract(format!("Gram matrix needs at least 2 samples, got shape {shape:?}")));
    }
    if !finite {
        return Err(Error::numeric("gram", "non-finite samples"));
    }
    Ok(())
}

/// Per-channel `[n, features]` views of a sample tensor.
fn channels<'t>(x: Var<'t>) -> Result<Vec<Var<'t>>> {
    let shape = x.shape();
    let n = shape[0];
    match shape.len() {
        1 => Ok(vec![x.reshape(&[n, 1])?]),
        2 => Ok(vec![x]),
        _ => {
            let rest: usize = shape[2..].iter().product();
            (0..shape[1])
                .map(|c| x.slice(1, c, c + 1)?.reshape(&[n, rest]))
                .collect()
        }
    }
}

fn rbf<'t>(x: Var<'t>, bandwidth: Bandwidth) -> Result<(Var<'t>, f64)> {
    let n = x.shape()[0];
    let sq = x.pairwise_sq_dist()?;
    let tape = sq.tape();
    // 2σ², differentiable in x when the median is data-dependent
    let two_var = match bandwidth {
        Bandwidth::Fixed(s) => tape.constant_owned(Tensor::scalar(2.0 * s * s)),
        Bandwidth::Median => {
            let flat = sq.reshape(&[n * n, 1])?;
            let entry = |k: usize| flat.gather(&[k])?.reshape(&[]);
            match median_pairs(sq.value().data(), n) {
                MedianPairs::One(k) => entry(k)?.scale(2.0)?,
                MedianPairs::Two(a, b) => {
                    let root = |k| entry(k)?.ln()?.scale(0.5)?.exp();
                    let sigma = if sq.value().data()[a] == 0.0 {
                        root(b)?.scale(0.5)?
                    } else {
                        root(a)?.add(root(b)?)?.scale(0.5)?
                    };
                    sigma.mul(sigma)?.scale(2.0)?
                }
                MedianPairs::Zero => tape.constant_owned(Tensor::scalar(2.0)),
            }
        }
    };
    let sigma = (two_var.item()? / 2.0).sqrt();
    let k = sq.div(two_var)?.neg()?.exp()?;
    let a = k.div(k.trace()?)?;
    Ok((a, sigma))
}

/// Recorded Gram matrix of `x`, averaged over channels for inputs with more
/// than two axes. Returns the matrix and the mean bandwidth.
pub fn gram_var<'t>(x: Var<'t>, bandwidth: Bandwidth) -> Result<(Var<'t>, f64)> {
    check_samples(&x.shape(), x.value().is_finite())?;
    if let Bandwidth::Fixed(s) = bandwidth {
        if !(s > 0.0 && s.is_finite()) {
            return Err(Error::contract(format!("bandwidth must be positive, got {s}")));
        }
    }
    let parts = channels(x)?;
    let count = parts.len();
    let mut acc: Option<Var<'t>> = None;
    let mut sigma_sum = 0.0;
    for p in parts {
        let (a, s) = rbf(p, bandwidth)?;
        sigma_sum += s;
        acc = Some(match acc {
            None => a,
            Some(prev) => prev.add(a)?,
        });
    }
    let a = acc.expect("at least one channel");
    let a = if count > 1 { a.scale(1.0 / count as f64)? } else { a };
    Ok((a, sigma_sum / count as f64))
}

pub fn gram_matrix(samples: &Tensor, bandwidth: Bandwidth) -> Result<GramMatrix> {
    let tape = Tape::new(usize::MAX);
    let (a, sigma) = gram_var(tape.constant(samples), bandwidth)?;
    Ok(GramMatrix {
        entries: a.value(),
        bandwidth: sigma,
        trace_normalized: true,
    })
}

fn check_alpha(alpha: f64) -> Result<()> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(Error::contract(format!("Rényi order must be positive, got {alpha}")));
    }
    if alpha == 1.0 {
        return Err(Error::contract("Rényi order 1 is undefined here; use an order near 1 such as 1.01"));
    }
    Ok(())
}

/// `S_α(A)` in bits for a recorded trace-one matrix.
pub fn renyi_entropy_var<'t>(a: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    check_alpha(alpha)?;
    a.trace_power(alpha)?
        .ln()?
        .scale(1.0 / ((1.0 - alpha) * std::f64::consts::LN_2))
}

/// `S_α(A)` in bits, from the eigenvalues of `A` above the numerical floor.
pub fn renyi_entropy(a: &GramMatrix, alpha: f64) -> Result<f64> {
    check_alpha(alpha)?;
    if !a.trace_normalized {
        return Err(Error::contract("Rényi entropy needs a trace-normalized matrix"));
    }
    let s: f64 = a
        .eigenvalues()
        .into_iter()
        .filter(|&l| l >= EIGEN_FLOOR)
        .map(|l| l.powf(alpha))
        .sum();
    Ok(s.log2() / (1.0 - alpha))
}

fn mi_from_grams<'t>(a: Var<'t>, b: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    let h = a.mul(b)?;
    let joint = h.div(h.trace()?)?;
    renyi_entropy_var(a, alpha)?
        .add(renyi_entropy_var(b, alpha)?)?
        .sub(renyi_entropy_var(joint, alpha)?)
}

/// Recorded `I(x; z)` in bits with median-heuristic bandwidths.
pub fn matrix_mi_var<'t>(x: Var<'t>, z: Var<'t>, alpha: f64) -> Result<Var<'t>> {
    let (xs, zs) = (x.shape(), z.shape());
    if xs.first() != zs.first() {
        return Err(Error::dim(
            "matrix_mi",
            format!("batch sizes differ: {xs:?} vs {zs:?}"),
        ));
    }
    let (a, _) = gram_var(x, Bandwidth::Median)?;
    let (b, _) = gram_var(z, Bandwidth::Median)?;
    mi_from_grams(a, b, alpha)
}

/// `I(x; z)` in bits. The reported value is clamped at 0 from below.
pub fn matrix_mi(x: &Tensor, z: &Tensor, alpha: f64) -> Result<MIEstimate> {
    let tape = Tape::new(usize::MAX);
    let v = matrix_mi_var(tape.constant(x), tape.constant(z), alpha)?.item()?;
    Ok(MIEstimate::new(v.max(0.0), EstimatorKind::Matrix, x.shape()[0]))
}
