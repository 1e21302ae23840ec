//! Parameters of a whole network and value-only forward passes.

use crate::autodiff::{Tape, Var};
use crate::data::{Dataset, DatasetKind, Features};
use crate::error::{Error, Result};
use crate::layers::{init_params, layer_forward, Architecture, GraphBatch, LayerParams, LayerSpec, ParamVars};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

const CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub arch: Architecture,
    /// `params[k][j]` belongs to layer `j` of module `k`.
    pub params: Vec<Vec<LayerParams>>,
    pub trained: Vec<bool>,
    pub seed: u64,
}

impl Model {
    /// Layer `i` of the flattened stack is initialized from `derive_seed(seed, i)`.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let mut global = 0u64;
        let mut params = Vec::with_capacity(arch.modules.len());
        for m in &arch.modules {
            let mut layers = Vec::with_capacity(m.layers.len());
            for l in &m.layers {
                layers.push(init_params(l, derive_seed(seed, global))?);
                global += 1;
            }
            params.push(layers);
        }
        Ok(Model {
            arch: arch.clone(),
            trained: vec![false; params.len()],
            params,
            seed,
        })
    }

    pub fn module_count(&self) -> usize {
        self.arch.modules.len()
    }

    /// Whether module `k`'s output has been pooled from nodes to graphs.
    pub fn pooled_after(&self, k: usize) -> bool {
        self.arch.modules[..=k]
            .iter()
            .any(|m| m.layers.iter().any(|l| matches!(l, LayerSpec::MeanPool)))
    }

    fn uses_graph(&self) -> bool {
        self.arch.layers().any(LayerSpec::needs_graph)
    }

    /// Checks the dataset kind and sample shape against the layer chain.
    pub fn check_data(&self, data: &Dataset) -> Result<()> {
        let graph_arch = self.uses_graph();
        if graph_arch != data.is_graph() {
            return Err(Error::Incompatible(format!(
                "{} does not fit a {:?} dataset",
                self.arch.name, data.kind
            )));
        }
        let pools = self.pooled_after(self.module_count() - 1);
        if data.kind == DatasetKind::Multigraph && !pools {
            return Err(Error::Incompatible(format!("{} has no graph pooling for graph labels", self.arch.name)));
        }
        if data.kind == DatasetKind::Nodegraph && pools {
            return Err(Error::Incompatible(format!("{} pools graphs but labels are per node", self.arch.name)));
        }
        let shapes = self
            .arch
            .shape_trace(&data.sample_shape())
            .map_err(|e| Error::Incompatible(format!("{} on this dataset: {e}", self.arch.name)))?;
        if shapes.last().map(Vec::as_slice) != Some(&[data.class_count][..]) {
            return Err(Error::Incompatible(format!(
                "{} outputs {:?} but the dataset has {} classes",
                self.arch.name,
                shapes.last(),
                data.class_count
            )));
        }
        Ok(())
    }

    /// Every tensor of module `k` in a fixed order: name, shape, then
    /// little-endian values.
    pub fn module_bytes(&self, k: usize) -> Vec<u8> {
        let mut out = Vec::new();
        for (j, layer) in self.params[k].iter().enumerate() {
            for (name, t) in &layer.tensors {
                out.extend_from_slice(format!("{j}/{name}{:?}", t.shape()).as_bytes());
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Runs modules `range` on value inputs, returning each module's output.
    pub(crate) fn run_values(
        &self,
        range: std::ops::Range<usize>,
        input: &Tensor,
        graph: Option<&GraphBatch>,
    ) -> Result<Vec<Tensor>> {
        let mut outs = Vec::with_capacity(range.len());
        let mut cur = input.clone();
        for k in range {
            let tape = Tape::new(usize::MAX);
            let vars = register_module(&self.params[k], &tape, false);
            let y = module_forward(&self.arch.modules[k].layers, &vars, tape.constant_owned(cur), graph)?;
            cur = y.value();
            if !cur.is_finite() {
                return Err(Error::numeric("forward", format!("module {k} produced non-finite values")));
            }
            outs.push(cur.clone());
        }
        Ok(outs)
    }

    /// Per-module outputs for the listed samples, one row per sample in the
    /// given order. Node outputs of multi-graph data are averaged per graph.
    pub fn module_outputs(&self, data: &Dataset, indices: &[usize]) -> Result<Vec<Tensor>> {
        self.check_data(data)?;
        let k = self.module_count();
        match &data.features {
            Features::Dense(x) => {
                let mut parts: Vec<Vec<Tensor>> = vec![Vec::new(); k];
                for chunk in indices.chunks(CHUNK) {
                    let outs = self.run_values(0..k, &x.select_rows(chunk)?, None)?;
                    for (p, o) in parts.iter_mut().zip(outs) {
                        p.push(o);
                    }
                }
                parts.iter().map(|p| concat_or_empty(p)).collect()
            }
            Features::Graphs(graphs) => {
                let mut parts: Vec<Vec<Tensor>> = vec![Vec::new(); k];
                for chunk in indices.chunks(CHUNK) {
                    let batch = merge_graphs(graphs, chunk)?;
                    let outs = self.run_values(0..k, batch.node_features(), Some(&batch))?;
                    for (m, (p, o)) in parts.iter_mut().zip(outs).enumerate() {
                        p.push(if self.pooled_after(m) { o } else { pool_values(&o, &batch)? });
                    }
                }
                parts.iter().map(|p| concat_or_empty(p)).collect()
            }
            Features::Graph(g) => {
                let outs = self.run_values(0..k, g.node_features(), Some(g))?;
                outs.iter().map(|o| o.select_rows(indices)).collect()
            }
        }
    }

    /// Output-module probabilities for the listed samples.
    pub fn predict(&self, data: &Dataset, indices: &[usize]) -> Result<Tensor> {
        let mut outs = self.module_outputs(data, indices)?;
        Ok(outs.pop().expect("at least one module"))
    }

    /// Fraction of the split's samples whose arg-max prediction equals the label.
    pub fn accuracy(&self, data: &Dataset, split: &str) -> Result<f64> {
        let idx = data.split(split)?;
        if idx.is_empty() {
            return Err(Error::contract(format!("split `{split}` is empty")));
        }
        let pred = self.predict(data, idx)?.argmax_rows();
        let hits = pred.iter().zip(idx).filter(|(p, &i)| **p == data.labels[i]).count();
        Ok(hits as f64 / idx.len() as f64)
    }
}

fn concat_or_empty(parts: &[Tensor]) -> Result<Tensor> {
    if parts.is_empty() {
        return Err(Error::contract("no samples selected"));
    }
    Tensor::concat_rows(parts)
}

pub(crate) fn merge_graphs(graphs: &[GraphBatch], indices: &[usize]) -> Result<GraphBatch> {
    let parts: Vec<GraphBatch> = indices
        .iter()
        .map(|&i| {
            graphs
                .get(i)
                .cloned()
                .ok_or_else(|| Error::contract(format!("graph index {i} out of range")))
        })
        .collect::<Result<_>>()?;
    GraphBatch::merge(&parts)
}

/// Mean of node rows per graph.
pub(crate) fn pool_values(nodes: &Tensor, graph: &GraphBatch) -> Result<Tensor> {
    let tape = Tape::new(usize::MAX);
    Ok(tape.constant(nodes).flatten_rows()?.sparse_left_mul(graph.pooling())?.value())
}

pub(crate) fn register_module<'t>(layers: &[LayerParams], tape: &'t Tape, trainable: bool) -> Vec<ParamVars<'t>> {
    layers.iter().map(|p| p.register(tape, trainable)).collect()
}

pub(crate) fn module_forward<'t>(
    specs: &[LayerSpec],
    vars: &[ParamVars<'t>],
    input: Var<'t>,
    graph: Option<&GraphBatch>,
) -> Result<Var<'t>> {
    let mut cur = input;
    for (spec, p) in specs.iter().zip(vars) {
        cur = layer_forward(spec, p, cur, graph)?;
    }
    Ok(cur)
}
