//! The neural (Donsker-Varadhan) estimator on paired samples.

use super::critic::{CriticNet, CriticVars, DvParts};
use super::{EstimatorKind, MIEstimate};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn check_batch(x: &[usize], z: &[usize], marginal: &[usize]) -> Result<usize> {
    let n = x.first().copied().unwrap_or(0);
    if z.first() != Some(&n) || marginal.len() != n {
        return Err(Error::dim(
            "mine",
            format!("x {x:?}, z {z:?} and a marginal permutation of {} disagree", marginal.len()),
        ));
    }
    if n < 2 {
        return Err(Error::contract("the DV bound needs a batch of at least 2"));
    }
    if marginal.iter().any(|&j| j >= n) {
        return Err(Error::contract("marginal permutation index out of range"));
    }
    Ok(n)
}

fn rows<'t>(v: Var<'t>) -> Result<Var<'t>> {
    if v.shape().len() == 2 {
        Ok(v)
    } else {
        v.flatten_rows()
    }
}

/// Joint pairs `(x_i, z_i)` against marginal pairs `(x_i, z_{marginal[i]})`.
pub fn mine_parts<'t>(
    critic: &CriticVars<'t>,
    x: Var<'t>,
    z: Var<'t>,
    marginal: &[usize],
) -> Result<DvParts<'t>> {
    let n = check_batch(&x.shape(), &z.shape(), marginal)?;
    let (x, z) = (rows(x)?, rows(z)?);
    let joint: Vec<(usize, usize)> = (0..n).map(|i| (i, i)).collect();
    let marg: Vec<(usize, usize)> = (0..n).map(|i| (i, marginal[i])).collect();
    Ok(DvParts {
        joint: critic.score_pairs(x, z, &joint)?.mean()?,
        marginal: critic.score_pairs(x, z, &marg)?.reshape(&[n, 1])?,
    })
}

/// `E_joint[T] − log E_marginal[e^T]` in nats.
pub fn mine_dv_bound(critic: &CriticNet, x: &Tensor, z: &Tensor, marginal: &[usize]) -> Result<MIEstimate> {
    let tape = Tape::new(usize::MAX);
    let vars = critic.register(&tape, false)?;
    let parts = mine_parts(&vars, tape.constant(x), tape.constant(z), marginal)?;
    let v = parts.bound()?.item()?;
    Ok(MIEstimate::new(v, EstimatorKind::Mine, x.shape()[0]))
}

/// One bias-corrected ascent step on the critic at learning rate `lr`.
/// Returns the bound before the step.
pub fn mine_train_step(critic: &mut CriticNet, x: &Tensor, z: &Tensor, marginal: &[usize], lr: f64) -> Result<f64> {
    critic.optimizer.lr = lr;
    critic.train_step(|tape, vars| mine_parts(vars, tape.constant(x), tape.constant(z), marginal))
}
