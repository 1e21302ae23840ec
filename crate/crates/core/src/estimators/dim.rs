//! Local-patch MI for feature maps: each spatial position's channel vector
//! is scored against the sample's global vector, negatives being other
//! samples' global vectors at the same position.

use super::critic::{CriticNet, CriticVars, DvParts};
use super::{EstimatorKind, MIEstimate};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// DV parts with one marginal group per spatial position.
pub fn dim_local_parts<'t>(
    critic: &CriticVars<'t>,
    feature_map: Var<'t>,
    global: Var<'t>,
    marginal: &[usize],
) -> Result<DvParts<'t>> {
    let fs = feature_map.shape();
    if fs.len() != 4 {
        return Err(Error::dim("dim_local", format!("feature map must be [n, C, H, W], got {fs:?}")));
    }
    let (n, c, positions) = (fs[0], fs[1], fs[2] * fs[3]);
    if n < 2 {
        return Err(Error::contract("local MI needs a batch of at least 2"));
    }
    if global.shape()[0] != n || marginal.len() != n {
        return Err(Error::dim("dim_local", format!("batch of {n} against global {:?}", global.shape())));
    }
    let global = if global.shape().len() == 2 { global } else { global.flatten_rows()? };
    let local = feature_map.permute(&[0, 2, 3, 1])?.reshape(&[n * positions, c])?;
    let joint: Vec<(usize, usize)> = (0..n * positions).map(|k| (k, k / positions)).collect();
    let marg: Vec<(usize, usize)> = (0..n * positions).map(|k| (k, marginal[k / positions])).collect();
    Ok(DvParts {
        joint: critic.score_pairs(local, global, &joint)?.mean()?,
        marginal: critic.score_pairs(local, global, &marg)?.reshape(&[n, positions])?,
    })
}

/// Mean over positions of the per-position DV bound, in nats.
pub fn dim_local_mi(
    feature_map: &Tensor,
    global: &Tensor,
    critic: &CriticNet,
    marginal: &[usize],
) -> Result<MIEstimate> {
    let tape = Tape::new(usize::MAX);
    let vars = critic.register(&tape, false)?;
    let parts = dim_local_parts(&vars, tape.constant(feature_map), tape.constant(global), marginal)?;
    let v = parts.bound()?.item()?;
    Ok(MIEstimate::new(v, EstimatorKind::DimLocal, feature_map.shape()[0]))
}
