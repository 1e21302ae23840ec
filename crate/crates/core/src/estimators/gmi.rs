//! A reduced topology-aware MI for graphs: a feature term scoring each node
//! representation against the inputs of its closed 1-hop neighborhood, and
//! an edge term contrasting `sigmoid(h_u · h_v)` on true edges with sampled
//! non-edges. The terms are weighted 0.5/0.5; without edges the feature term
//! carries full weight.

use serde::{Deserialize, Serialize};

use super::critic::{CriticNet, CriticVars, DvParts};
use super::{EstimatorKind, MIEstimate};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::GraphBatch;
use crate::rng::{marginal_permutation, Rng};
use crate::tensor::Tensor;
use rand::Rng as _;

/// The random parts of one estimate: the node permutation for feature
/// negatives and the sampled non-edges.
#[derive(Clone, Debug, PartialEq)]
pub struct GmiSample {
    pub marginal: Vec<usize>,
    pub non_edges: Vec<(usize, usize)>,
}

impl GmiSample {
    /// One negative per true edge, drawn uniformly from node pairs that are
    /// not edges. Fewer are returned if such pairs are too rare to find.
    pub fn draw(graph: &GraphBatch, rng: &mut Rng) -> Self {
        let n = graph.num_nodes();
        let marginal = marginal_permutation(n, rng);
        let want = graph.edges().len();
        let mut non_edges = Vec::with_capacity(want);
        if n >= 2 {
            let mut attempts = 0;
            while non_edges.len() < want && attempts < 100 * want.max(1) {
                attempts += 1;
                let u = rng.gen_range(0..n);
                let v = rng.gen_range(0..n);
                if u != v && !graph.has_edge(u, v) {
                    non_edges.push((u, v));
                }
            }
        }
        GmiSample { marginal, non_edges }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GmiBreakdown {
    pub feature: f64,
    /// `None` when the edge term was skipped.
    pub edge: Option<f64>,
    pub feature_weight: f64,
    pub edge_weight: f64,
}

/// DV parts of the feature term. `repr` plays the critic's `x`, `input` its `z`.
pub fn gmi_feature_parts<'t>(
    critic: &CriticVars<'t>,
    input: Var<'t>,
    repr: Var<'t>,
    graph: &GraphBatch,
    marginal: &[usize],
) -> Result<DvParts<'t>> {
    let n = graph.num_nodes();
    if input.shape()[0] != n || repr.shape()[0] != n || marginal.len() != n {
        return Err(Error::dim(
            "gmi_lite",
            format!("graph of {n} nodes against input {:?} and repr {:?}", input.shape(), repr.shape()),
        ));
    }
    let mut pairs = Vec::new();
    let mut weights = Vec::new();
    for v in 0..n {
        let start = pairs.len();
        pairs.push((v, v));
        pairs.extend(graph.neighbors(v).map(|u| (v, u)));
        let w = 1.0 / (n * (pairs.len() - start)) as f64;
        weights.resize(pairs.len(), w);
    }
    let tape = repr.tape();
    let joint = critic
        .score_pairs(repr, input, &pairs)?
        .mul(tape.constant_owned(Tensor::vector(weights)))?
        .sum()?;
    let marg: Vec<(usize, usize)> = (0..n).map(|v| (v, marginal[v])).collect();
    Ok(DvParts {
        joint,
        marginal: critic.score_pairs(repr, input, &marg)?.reshape(&[n, 1])?,
    })
}

fn edge_scores<'t>(repr: Var<'t>, pairs: &[(usize, usize)]) -> Result<Var<'t>> {
    let (us, vs): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
    repr.gather(&us)?.mul(repr.gather(&vs)?)?.sum_axis(1)?.sigmoid()
}

/// The edge term, or `None` without edges or sampled non-edges.
pub fn gmi_edge_term<'t>(repr: Var<'t>, graph: &GraphBatch, non_edges: &[(usize, usize)]) -> Result<Option<Var<'t>>> {
    if graph.edges().is_empty() || non_edges.is_empty() {
        return Ok(None);
    }
    let parts = DvParts {
        joint: edge_scores(repr, graph.edges())?.mean()?,
        marginal: edge_scores(repr, non_edges)?.reshape(&[non_edges.len(), 1])?,
    };
    Ok(Some(parts.bound()?))
}

/// Recorded weighted objective and its breakdown.
pub fn gmi_lite_var<'t>(
    critic: &CriticVars<'t>,
    input: Var<'t>,
    repr: Var<'t>,
    graph: &GraphBatch,
    sample: &GmiSample,
) -> Result<(Var<'t>, GmiBreakdown)> {
    let repr = if repr.shape().len() == 2 { repr } else { repr.flatten_rows()? };
    let input = if input.shape().len() == 2 { input } else { input.flatten_rows()? };
    let feature = gmi_feature_parts(critic, input, repr, graph, &sample.marginal)?.bound()?;
    let edge = gmi_edge_term(repr, graph, &sample.non_edges)?;
    let (fw, ew) = if edge.is_some() { (0.5, 0.5) } else { (1.0, 0.0) };
    let breakdown = GmiBreakdown {
        feature: feature.item()?,
        edge: edge.map(|e| e.item()).transpose()?,
        feature_weight: fw,
        edge_weight: ew,
    };
    let total = match edge {
        Some(e) => feature.scale(fw)?.add(e.scale(ew)?)?,
        None => feature,
    };
    Ok((total, breakdown))
}

/// Value form, in nats.
pub fn gmi_lite(
    input: &Tensor,
    repr: &Tensor,
    graph: &GraphBatch,
    critic: &CriticNet,
    sample: &GmiSample,
) -> Result<(MIEstimate, GmiBreakdown)> {
    let tape = Tape::new(usize::MAX);
    let vars = critic.register(&tape, false)?;
    let (v, b) = gmi_lite_var(&vars, tape.constant(input), tape.constant(repr), graph, sample)?;
    Ok((MIEstimate::new(v.item()?, EstimatorKind::GmiLite, graph.num_nodes()), b))
}
