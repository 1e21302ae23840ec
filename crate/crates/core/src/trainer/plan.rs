//! Binding objective tags to estimators and hyperparameters.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimators::{EstimatorKind, DEFAULT_ALPHA};
use crate::layers::{Architecture, LayerSpec, ModuleSpec, ObjectiveTag};
use crate::rng::derive_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Suite {
    #[serde(rename = "matrix")]
    Matrix,
    #[serde(rename = "mine")]
    Mine,
    #[serde(rename = "dim+mine")]
    DimMine,
    #[serde(rename = "gmi+mine")]
    GmiMine,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Matrix, Suite::Mine, Suite::DimMine, Suite::GmiMine];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Matrix => "matrix",
            Suite::Mine => "mine",
            Suite::DimMine => "dim+mine",
            Suite::GmiMine => "gmi+mine",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Unknown {
                kind: "estimator suite",
                name: s.to_string(),
            })
    }
}

/// Which representation a MaxMI_X module is scored against.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MiXTarget {
    /// The module's own input, i.e. the frozen upstream output.
    #[default]
    Previous,
    /// The network input.
    Raw,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub tag: ObjectiveTag,
    pub estimator: Option<EstimatorKind>,
    pub labeled_only: bool,
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        match (self.tag, self.estimator) {
            (ObjectiveTag::CrossEntropy, Some(e)) => {
                return Err(Error::contract(format!("cross-entropy module bound to estimator {e}")))
            }
            (ObjectiveTag::MaxMiX | ObjectiveTag::MaxMiY, None) => {
                return Err(Error::contract(format!("{} module without an estimator", self.tag)))
            }
            _ => {}
        }
        if self.labeled_only && self.tag != ObjectiveTag::MaxMiY {
            return Err(Error::contract(format!("labeled_only is only valid for MaxMI_Y, not {}", self.tag)));
        }
        Ok(())
    }
}

/// Per-module overrides; unset fields fall back to the shared values.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModuleOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch_size: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Hyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub critic_lr: f64,
    pub critic_steps: usize,
    pub mi_x_target: MiXTarget,
    pub alpha: f64,
    /// Row cap for matrix objectives (the Gram spectrum is cubic in rows).
    pub max_objective_samples: usize,
    /// Keyed by module index.
    #[serde(with = "index_keys")]
    pub modules: BTreeMap<usize, ModuleOverride>,
}

/// Module indices as string keys, which every map format accepts.
mod index_keys {
    use std::collections::BTreeMap;

    use serde::de::Error as _;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::ModuleOverride;

    pub fn serialize<S: Serializer>(m: &BTreeMap<usize, ModuleOverride>, s: S) -> Result<S::Ok, S::Error> {
        let by_name: BTreeMap<String, &ModuleOverride> = m.iter().map(|(k, v)| (k.to_string(), v)).collect();
        by_name.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<BTreeMap<usize, ModuleOverride>, D::Error> {
        BTreeMap::<String, ModuleOverride>::deserialize(d)?
            .into_iter()
            .map(|(k, v)| {
                k.parse::<usize>()
                    .map(|i| (i, v))
                    .map_err(|_| D::Error::custom(format!("module key `{k}` is not an index")))
            })
            .collect()
    }
}

impl Default for Hyper {
    fn default() -> Self {
        Hyper {
            epochs: 30,
            batch_size: 128,
            lr: 1e-3,
            critic_lr: 1e-4,
            critic_steps: 5,
            mi_x_target: MiXTarget::Previous,
            alpha: DEFAULT_ALPHA,
            max_objective_samples: 256,
            modules: BTreeMap::new(),
        }
    }
}

impl Hyper {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.max_objective_samples < 2 {
            return Err(Error::contract("batch_size must be positive and max_objective_samples at least 2"));
        }
        if !(self.lr >= 0.0) || !(self.critic_lr >= 0.0) || !self.lr.is_finite() || !self.critic_lr.is_finite() {
            return Err(Error::contract("learning rates must be finite and non-negative"));
        }
        if !(self.alpha > 0.0) || self.alpha == 1.0 || !self.alpha.is_finite() {
            return Err(Error::contract(format!("Rényi order {} must be positive and not 1", self.alpha)));
        }
        for (k, o) in &self.modules {
            if o.batch_size == Some(0) || o.lr.is_some_and(|lr| !(lr >= 0.0) || !lr.is_finite()) {
                return Err(Error::contract(format!("invalid override for module {k}")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModuleHyper {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlannedModule {
    pub spec: ModuleSpec,
    pub objective: Objective,
    pub hyper: ModuleHyper,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModulePlan {
    pub arch: Architecture,
    pub suite: Suite,
    pub modules: Vec<PlannedModule>,
    pub critic_lr: f64,
    pub critic_steps: usize,
    pub mi_x_target: MiXTarget,
    pub alpha: f64,
    pub max_objective_samples: usize,
    pub seed: u64,
}

fn has_graph_layer(m: &ModuleSpec) -> bool {
    m.layers
        .iter()
        .any(|l| matches!(l, LayerSpec::MessagePassing { .. } | LayerSpec::GraphConv { .. }))
}

fn has_conv(m: &ModuleSpec) -> bool {
    m.layers.iter().any(|l| matches!(l, LayerSpec::Conv2d { .. }))
}

pub fn build_plan(arch: &Architecture, suite: Suite, hyper: &Hyper, seed: u64) -> Result<ModulePlan> {
    hyper.validate()?;
    let grid = arch.modules.iter().any(has_conv);
    let graph = arch.modules.iter().any(has_graph_layer);
    match suite {
        Suite::DimMine if !grid => {
            return Err(Error::Incompatible(format!("suite {suite} needs grid data; {} has no convolutions", arch.name)))
        }
        Suite::GmiMine if !graph => {
            return Err(Error::Incompatible(format!("suite {suite} needs graph data; {} has no graph layers", arch.name)))
        }
        _ => {}
    }
    let first_x = arch.modules.iter().position(|m| m.tag == ObjectiveTag::MaxMiX);
    let modules = arch
        .modules
        .iter()
        .enumerate()
        .map(|(k, m)| {
            let estimator = match m.tag {
                ObjectiveTag::CrossEntropy => None,
                tag => Some(match suite {
                    Suite::Matrix => EstimatorKind::Matrix,
                    Suite::Mine => EstimatorKind::Mine,
                    Suite::DimMine if tag == ObjectiveTag::MaxMiX && Some(k) == first_x && has_conv(m) => {
                        EstimatorKind::DimLocal
                    }
                    Suite::GmiMine if tag == ObjectiveTag::MaxMiX && has_graph_layer(m) => EstimatorKind::GmiLite,
                    Suite::DimMine | Suite::GmiMine => EstimatorKind::Mine,
                }),
            };
            let o = hyper.modules.get(&k).cloned().unwrap_or_default();
            PlannedModule {
                spec: m.clone(),
                objective: Objective {
                    tag: m.tag,
                    estimator,
                    labeled_only: m.labeled_only,
                },
                hyper: ModuleHyper {
                    epochs: o.epochs.unwrap_or(hyper.epochs),
                    batch_size: o.batch_size.unwrap_or(hyper.batch_size),
                    lr: o.lr.unwrap_or(hyper.lr),
                    seed: derive_seed(seed, 0x1000 + k as u64),
                },
            }
        })
        .collect();
    if let Some(&k) = hyper.modules.keys().find(|&&k| k >= arch.modules.len()) {
        return Err(Error::contract(format!("override for module {k}, but the plan has {}", arch.modules.len())));
    }
    let plan = ModulePlan {
        arch: arch.clone(),
        suite,
        modules,
        critic_lr: hyper.critic_lr,
        critic_steps: hyper.critic_steps,
        mi_x_target: hyper.mi_x_target,
        alpha: hyper.alpha,
        max_objective_samples: hyper.max_objective_samples,
        seed,
    };
    plan.validate()?;
    Ok(plan)
}

impl ModulePlan {
    pub fn validate(&self) -> Result<()> {
        let last = self.modules.last().ok_or_else(|| Error::contract("empty plan"))?;
        if last.objective.tag != ObjectiveTag::CrossEntropy {
            return Err(Error::contract("the final module must be trained with cross-entropy"));
        }
        for (k, pair) in self.modules.windows(2).enumerate() {
            if pair[1].objective.tag < pair[0].objective.tag {
                return Err(Error::contract(format!(
                    "module {} ({}) follows {} out of order",
                    k + 1,
                    pair[1].objective.tag,
                    pair[0].objective.tag
                )));
            }
        }
        for m in &self.modules {
            m.objective.validate()?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{reference_architecture, ArchName};

    fn estimators(arch: ArchName, suite: Suite) -> Result<Vec<Option<EstimatorKind>>> {
        let plan = build_plan(&reference_architecture(arch), suite, &Hyper::default(), 0)?;
        Ok(plan.modules.iter().map(|m| m.objective.estimator).collect())
    }

    #[test]
    fn reference_bindings() {
        use EstimatorKind::*;
        assert_eq!(
            estimators(ArchName::AdultMlp, Suite::Matrix).unwrap(),
            vec![Some(Matrix), Some(Matrix), None]
        );
        assert_eq!(
            estimators(ArchName::MnistCnn, Suite::DimMine).unwrap(),
            vec![Some(DimLocal), Some(Mine), Some(Mine), None]
        );
        assert_eq!(
            estimators(ArchName::MutagenicityMpgnn, Suite::GmiMine).unwrap(),
            vec![Some(Mine), Some(GmiLite), Some(Mine), None]
        );
        assert_eq!(
            estimators(ArchName::CoraGcn, Suite::GmiMine).unwrap(),
            vec![Some(GmiLite), Some(Mine), None]
        );
        assert!(matches!(estimators(ArchName::AdultMlp, Suite::GmiMine), Err(Error::Incompatible(_))));
        assert!(matches!(estimators(ArchName::CoraGcn, Suite::DimMine), Err(Error::Incompatible(_))));
    }

    #[test]
    fn overrides_and_ordering() {
        let mut h = Hyper::default();
        h.modules.insert(
            1,
            ModuleOverride {
                epochs: Some(3),
                ..Default::default()
            },
        );
        let plan = build_plan(&reference_architecture(ArchName::AdultMlp), Suite::Mine, &h, 0).unwrap();
        assert_eq!(plan.modules[1].hyper.epochs, 3);
        assert_eq!(plan.modules[0].hyper.epochs, 30);
        h.modules.insert(7, ModuleOverride::default());
        assert!(build_plan(&reference_architecture(ArchName::AdultMlp), Suite::Mine, &h, 0).is_err());

        let mut arch = reference_architecture(ArchName::AdultMlp);
        arch.modules.swap(0, 1);
        assert!(build_plan(&arch, Suite::Mine, &Hyper::default(), 0).is_err());
    }

    #[test]
    fn objective_rules() {
        let bad = Objective {
            tag: ObjectiveTag::MaxMiX,
            estimator: Some(EstimatorKind::Mine),
            labeled_only: true,
        };
        assert!(bad.validate().is_err());
        let ce = Objective {
            tag: ObjectiveTag::CrossEntropy,
            estimator: Some(EstimatorKind::Mine),
            labeled_only: false,
        };
        assert!(ce.validate().is_err());
        assert_eq!("dim+mine".parse::<Suite>().unwrap(), Suite::DimMine);
    }
}
