//! The four reference networks and their per-module training objectives.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Activation, LayerSpec};
use crate::error::{Error, Result};

/// What a module is trained to do. Ordered as it must appear along a stack:
/// encoder-like modules first, then decoder-like, then the output module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ObjectiveTag {
    /// Maximize information shared with the input side.
    #[serde(rename = "MaxMI_X")]
    MaxMiX,
    /// Maximize information shared with the label.
    #[serde(rename = "MaxMI_Y")]
    MaxMiY,
    CrossEntropy,
}

impl fmt::Display for ObjectiveTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectiveTag::MaxMiX => "MaxMI_X",
            ObjectiveTag::MaxMiY => "MaxMI_Y",
            ObjectiveTag::CrossEntropy => "CrossEntropy",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchName {
    AdultMlp,
    MnistCnn,
    MutagenicityMpgnn,
    CoraGcn,
}

impl ArchName {
    pub const ALL: [ArchName; 4] = [
        ArchName::AdultMlp,
        ArchName::MnistCnn,
        ArchName::MutagenicityMpgnn,
        ArchName::CoraGcn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ArchName::AdultMlp => "adult_mlp",
            ArchName::MnistCnn => "mnist_cnn",
            ArchName::MutagenicityMpgnn => "mutagenicity_mpgnn",
            ArchName::CoraGcn => "cora_gcn",
        }
    }
}

impl fmt::Display for ArchName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ArchName::ALL
            .into_iter()
            .find(|a| a.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "architecture",
                name: s.to_string(),
            })
    }
}

/// A trainable unit: a short layer stack bound to one objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleSpec {
    pub layers: Vec<LayerSpec>,
    pub tag: ObjectiveTag,
    /// Restrict a label objective to samples whose label is known.
    #[serde(default)]
    pub labeled_only: bool,
}

impl ModuleSpec {
    fn new(layers: Vec<LayerSpec>, tag: ObjectiveTag) -> Self {
        ModuleSpec {
            layers,
            tag,
            labeled_only: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub name: ArchName,
    pub modules: Vec<ModuleSpec>,
}

pub fn reference_architecture(name: ArchName) -> Architecture {
    use Activation::{Relu, Softmax};
    use ObjectiveTag::{CrossEntropy, MaxMiX, MaxMiY};
    let conv = |cin, cout| LayerSpec::Conv2d {
        in_channels: cin,
        out_channels: cout,
        kernel: 3,
        stride: 1,
        padding: 1,
        activation: Relu,
    };
    let pool = LayerSpec::MaxPool2d { size: 2, stride: 2 };
    let mp = |i, o| LayerSpec::MessagePassing {
        in_dim: i,
        out_dim: o,
        activation: Relu,
    };
    let gc = |i, o| LayerSpec::GraphConv {
        in_dim: i,
        out_dim: o,
        activation: Relu,
    };
    let modules = match name {
        ArchName::AdultMlp => vec![
            ModuleSpec::new(vec![LayerSpec::dense(104, 64, Relu)], MaxMiX),
            ModuleSpec::new(vec![LayerSpec::dense(64, 16, Relu)], MaxMiY),
            ModuleSpec::new(vec![LayerSpec::dense(16, 2, Softmax)], CrossEntropy),
        ],
        ArchName::MnistCnn => vec![
            ModuleSpec::new(vec![conv(1, 8), pool.clone()], MaxMiX),
            ModuleSpec::new(vec![conv(8, 16), pool], MaxMiX),
            ModuleSpec::new(vec![LayerSpec::Flatten, LayerSpec::dense(784, 64, Relu)], MaxMiY),
            ModuleSpec::new(vec![LayerSpec::dense(64, 10, Softmax)], CrossEntropy),
        ],
        ArchName::MutagenicityMpgnn => vec![
            ModuleSpec::new(vec![LayerSpec::dense(14, 32, Relu)], MaxMiX),
            ModuleSpec::new(vec![mp(32, 32)], MaxMiX),
            ModuleSpec::new(vec![mp(32, 32)], MaxMiY),
            ModuleSpec::new(vec![LayerSpec::MeanPool, LayerSpec::dense(32, 2, Softmax)], CrossEntropy),
        ],
        ArchName::CoraGcn => vec![
            ModuleSpec::new(vec![gc(1433, 64)], MaxMiX),
            ModuleSpec {
                labeled_only: true,
                ..ModuleSpec::new(vec![gc(64, 32)], MaxMiY)
            },
            ModuleSpec::new(vec![LayerSpec::dense(32, 7, Softmax)], CrossEntropy),
        ],
    };
    Architecture { name, modules }
}

impl Architecture {
    pub fn layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.modules.iter().flat_map(|m| m.layers.iter())
    }

    /// Rewrites the input width (or channel count) of the first layer and
    /// the class count of the last, for datasets other than the reference ones.
    pub fn with_io(mut self, input_width: usize, classes: usize) -> Result<Self> {
        if input_width == 0 || classes < 2 {
            return Err(Error::contract("input width must be positive and classes at least 2"));
        }
        let first = self
            .modules
            .first_mut()
            .and_then(|m| m.layers.first_mut())
            .ok_or_else(|| Error::contract("empty architecture"))?;
        match first {
            LayerSpec::Dense { in_dim, .. }
            | LayerSpec::MessagePassing { in_dim, .. }
            | LayerSpec::GraphConv { in_dim, .. } => *in_dim = input_width,
            LayerSpec::Conv2d { in_channels, .. } => *in_channels = input_width,
            other => return Err(Error::contract(format!("cannot resize input of {other:?}"))),
        }
        let last = self
            .modules
            .last_mut()
            .and_then(|m| m.layers.last_mut())
            .ok_or_else(|| Error::contract("empty architecture"))?;
        match last {
            LayerSpec::Dense { out_dim, .. } => *out_dim = classes,
            other => return Err(Error::contract(format!("cannot resize output of {other:?}"))),
        }
        Ok(self)
    }

    /// Checks that the layer chain is shape-consistent for one sample of
    /// `input` shape and returns the per-module output shapes.
    pub fn shape_trace(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        let mut shape = input.to_vec();
        let mut out = Vec::with_capacity(self.modules.len());
        for m in &self.modules {
            for l in &m.layers {
                shape = l.output_shape(&shape)?;
            }
            out.push(shape.clone());
        }
        Ok(out)
    }

    pub fn classes(&self) -> Option<usize> {
        match self.layers().last()? {
            LayerSpec::Dense { out_dim, .. } => Some(*out_dim),
            _ => None,
        }
    }
}
