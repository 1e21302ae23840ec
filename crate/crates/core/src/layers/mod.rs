//! Layer families: dense, 2-D convolution, pooling, message passing and
//! graph convolution, each a parameterized function recorded on a tape.

mod arch;
mod graph;

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

pub use arch::{reference_architecture, ArchName, Architecture, ModuleSpec, ObjectiveTag};
pub use graph::GraphBatch;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    None,
    /// Softmax over the feature axis of a `[n, d]` output.
    Softmax,
}

impl Activation {
    pub fn apply<'t>(self, x: Var<'t>) -> Result<Var<'t>> {
        match self {
            Activation::Relu => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
            Activation::Tanh => x.tanh(),
            Activation::None => Ok(x),
            Activation::Softmax => x.softmax(1),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    },
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        activation: Activation,
    },
    #[serde(rename = "maxpool2d")]
    MaxPool2d { size: usize, stride: usize },
    /// `act(x_v W_self + sum_{u in N(v)} x_u W_msg + b)`.
    MessagePassing {
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    },
    /// `act(Â X W)` with the symmetric-normalized adjacency.
    GraphConv {
        in_dim: usize,
        out_dim: usize,
        activation: Activation,
    },
    Flatten,
    /// Mean over each graph's nodes: node rows in, graph rows out.
    MeanPool,
}

impl LayerSpec {
    pub fn dense(in_dim: usize, out_dim: usize, activation: Activation) -> Self {
        LayerSpec::Dense {
            in_dim,
            out_dim,
            activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::contract(format!("invalid layer spec {self:?}: {what}")));
        match *self {
            LayerSpec::Dense { in_dim, out_dim, .. }
            | LayerSpec::MessagePassing { in_dim, out_dim, .. }
            | LayerSpec::GraphConv { in_dim, out_dim, .. } => {
                if in_dim == 0 || out_dim == 0 {
                    return bad("widths must be positive");
                }
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                activation,
                ..
            } => {
                if in_channels == 0 || out_channels == 0 {
                    return bad("channel counts must be positive");
                }
                if kernel == 0 || stride == 0 {
                    return bad("kernel and stride must be at least 1");
                }
                if activation == Activation::Softmax {
                    return bad("softmax is only defined for [n, d] outputs");
                }
            }
            LayerSpec::MaxPool2d { size, stride } => {
                if size == 0 || stride == 0 {
                    return bad("pool size and stride must be at least 1");
                }
            }
            LayerSpec::Flatten | LayerSpec::MeanPool => {}
        }
        Ok(())
    }

    pub fn needs_graph(&self) -> bool {
        matches!(
            self,
            LayerSpec::MessagePassing { .. } | LayerSpec::GraphConv { .. } | LayerSpec::MeanPool
        )
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        self.validate()?;
        let mismatch = || Error::dim("layer", format!("{self:?} cannot take per-sample shape {input:?}"));
        match *self {
            LayerSpec::Dense { in_dim, out_dim, .. }
            | LayerSpec::MessagePassing { in_dim, out_dim, .. }
            | LayerSpec::GraphConv { in_dim, out_dim, .. } => {
                if input != [in_dim] {
                    return Err(mismatch());
                }
                Ok(vec![out_dim])
            }
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                ..
            } => {
                if input.len() != 3 || input[0] != in_channels {
                    return Err(mismatch());
                }
                let out = |len: usize| {
                    let padded = len + 2 * padding;
                    (padded >= kernel).then(|| (padded - kernel) / stride + 1).ok_or_else(mismatch)
                };
                Ok(vec![out_channels, out(input[1])?, out(input[2])?])
            }
            LayerSpec::MaxPool2d { size, stride } => {
                if input.len() != 3 || input[1] < size || input[2] < size {
                    return Err(mismatch());
                }
                Ok(vec![input[0], (input[1] - size) / stride + 1, (input[2] - size) / stride + 1])
            }
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::MeanPool => {
                if input.len() != 1 {
                    return Err(mismatch());
                }
                Ok(input.to_vec())
            }
        }
    }

    /// `(name, shape, fan_in, fan_out)` for each parameter tensor.
    fn param_layout(&self) -> Vec<(&'static str, Vec<usize>, usize, usize)> {
        match *self {
            LayerSpec::Dense { in_dim, out_dim, .. } => vec![
                ("weight", vec![in_dim, out_dim], in_dim, out_dim),
                ("bias", vec![out_dim], 0, 0),
            ],
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => {
                let area = kernel * kernel;
                vec![
                    (
                        "weight",
                        vec![out_channels, in_channels, kernel, kernel],
                        in_channels * area,
                        out_channels * area,
                    ),
                    ("bias", vec![out_channels], 0, 0),
                ]
            }
            LayerSpec::MessagePassing { in_dim, out_dim, .. } => vec![
                ("weight_self", vec![in_dim, out_dim], in_dim, out_dim),
                ("weight_msg", vec![in_dim, out_dim], in_dim, out_dim),
                ("bias", vec![out_dim], 0, 0),
            ],
            LayerSpec::GraphConv { in_dim, out_dim, .. } => {
                vec![("weight", vec![in_dim, out_dim], in_dim, out_dim)]
            }
            LayerSpec::MaxPool2d { .. } | LayerSpec::Flatten | LayerSpec::MeanPool => Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub tensors: BTreeMap<String, Tensor>,
    pub init_seed: u64,
}

impl LayerParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }

    /// Places every tensor on `tape`, as trainable leaves or as constants.
    pub fn register<'t>(&self, tape: &'t Tape, trainable: bool) -> ParamVars<'t> {
        ParamVars(
            self.tensors
                .iter()
                .map(|(k, t)| {
                    let v = if trainable { tape.param(t) } else { tape.constant(t) };
                    (k.clone(), v)
                })
                .collect(),
        )
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }
}

/// A layer's parameters as recorded on one tape, in name order.
#[derive(Clone, Debug)]
pub struct ParamVars<'t>(pub Vec<(String, Var<'t>)>);

impl<'t> ParamVars<'t> {
    pub fn get(&self, name: &str) -> Result<Var<'t>> {
        self.0
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::contract(format!("missing parameter `{name}`")))
    }
}

/// Glorot-uniform weights, zero biases, deterministic in `seed`.
pub fn init_params(spec: &LayerSpec, seed: u64) -> Result<LayerParams> {
    spec.validate()?;
    let mut rng = rng::seeded(seed);
    let mut tensors = BTreeMap::new();
    for (name, shape, fan_in, fan_out) in spec.param_layout() {
        let t = if fan_in + fan_out == 0 {
            Tensor::zeros(&shape)
        } else {
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let n = shape.iter().product();
            let data = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
            Tensor::new(shape, data)?
        };
        tensors.insert(name.to_string(), t);
    }
    Ok(LayerParams { tensors, init_seed: seed })
}

/// Applies one layer. `graph` supplies structure for graph layers; its node
/// features are ignored in favour of `input`.
pub fn layer_forward<'t>(
    spec: &LayerSpec,
    params: &ParamVars<'t>,
    input: Var<'t>,
    graph: Option<&GraphBatch>,
) -> Result<Var<'t>> {
    spec.validate()?;
    let need_graph = || {
        graph.ok_or_else(|| Error::contract(format!("{spec:?} needs a graph context")))
    };
    let shape = input.shape();
    let expect_rows = |shape: &[usize], width: usize| -> Result<()> {
        if shape.len() != 2 || shape[1] != width {
            return Err(Error::dim("layer", format!("{spec:?} got input shape {shape:?}")));
        }
        Ok(())
    };
    match *spec {
        LayerSpec::Dense { in_dim, activation, .. } => {
            expect_rows(&shape, in_dim)?;
            let z = input.matmul(params.get("weight")?)?.add(params.get("bias")?)?;
            activation.apply(z)
        }
        LayerSpec::Conv2d {
            stride,
            padding,
            activation,
            ..
        } => {
            let z = input.conv2d(params.get("weight")?, params.get("bias")?, stride, padding)?;
            activation.apply(z)
        }
        LayerSpec::MaxPool2d { size, stride } => input.maxpool2d(size, stride),
        LayerSpec::Flatten => input.flatten_rows(),
        LayerSpec::GraphConv { in_dim, activation, .. } => {
            let g = need_graph()?;
            expect_rows(&shape, in_dim)?;
            check_nodes(&shape, g)?;
            let z = input.sparse_left_mul(g.normalized_adjacency())?.matmul(params.get("weight")?)?;
            activation.apply(z)
        }
        LayerSpec::MessagePassing { in_dim, activation, .. } => {
            let g = need_graph()?;
            expect_rows(&shape, in_dim)?;
            check_nodes(&shape, g)?;
            let own = input.matmul(params.get("weight_self")?)?;
            let msg = input.sparse_left_mul(g.adjacency())?.matmul(params.get("weight_msg")?)?;
            activation.apply(own.add(msg)?.add(params.get("bias")?)?)
        }
        LayerSpec::MeanPool => {
            let g = need_graph()?;
            check_nodes(&shape, g)?;
            input.sparse_left_mul(g.pooling())
        }
    }
}

fn check_nodes(shape: &[usize], g: &GraphBatch) -> Result<()> {
    if shape[0] != g.num_nodes() {
        return Err(Error::dim(
            "layer",
            format!("{} node rows for a graph with {} nodes", shape[0], g.num_nodes()),
        ));
    }
    Ok(())
}
