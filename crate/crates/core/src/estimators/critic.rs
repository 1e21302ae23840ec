//! The scalar critic `T(x, z)` of the Donsker-Varadhan bound.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::layers::{init_params, Activation, LayerParams, LayerSpec};
use crate::optim::Adam;
use crate::tensor::Tensor;

pub const CRITIC_HIDDEN: usize = 128;
pub const EMA_DECAY: f64 = 0.99;

/// `concat(x, z) -> dense(hidden) relu -> dense(1)`, with its own optimizer
/// state and the moving average used by the bias-corrected update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriticNet {
    pub x_dim: usize,
    pub z_dim: usize,
    pub layers: Vec<LayerParams>,
    pub optimizer: Adam,
    /// Moving averages of `E[e^T]` under the marginal, one per group.
    pub ema: Vec<f64>,
}

impl CriticNet {
    pub fn new(x_dim: usize, z_dim: usize, lr: f64, seed: u64) -> Result<Self> {
        Self::with_hidden(x_dim, z_dim, CRITIC_HIDDEN, lr, seed)
    }

    pub fn with_hidden(x_dim: usize, z_dim: usize, hidden: usize, lr: f64, seed: u64) -> Result<Self> {
        if x_dim == 0 || z_dim == 0 {
            return Err(Error::contract("critic input widths must be positive"));
        }
        let first = LayerSpec::dense(x_dim + z_dim, hidden, Activation::Relu);
        let second = LayerSpec::dense(hidden, 1, Activation::None);
        Ok(CriticNet {
            x_dim,
            z_dim,
            layers: vec![
                init_params(&first, crate::rng::derive_seed(seed, 0))?,
                init_params(&second, crate::rng::derive_seed(seed, 1))?,
            ],
            optimizer: Adam::new(lr),
            ema: Vec::new(),
        })
    }

    /// Places the critic on `tape`; as constants unless `trainable`.
    pub fn register<'t>(&self, tape: &'t Tape, trainable: bool) -> Result<CriticVars<'t>> {
        let l1 = self.layers[0].register(tape, trainable);
        let l2 = self.layers[1].register(tape, trainable);
        let w1 = l1.get("weight")?;
        Ok(CriticVars {
            w1,
            w_x: w1.slice(0, 0, self.x_dim)?,
            w_z: w1.slice(0, self.x_dim, self.x_dim + self.z_dim)?,
            b1: l1.get("bias")?,
            w2: l2.get("weight")?,
            b2: l2.get("bias")?,
        })
    }

    /// Flattened parameter values, for bit-exact comparisons.
    pub fn param_values(&self) -> Vec<f64> {
        self.layers
            .iter()
            .flat_map(|l| l.tensors.values().flat_map(|t| t.data().iter().copied()))
            .collect()
    }

    /// One optimizer step ascending the bias-corrected surrogate of `parts`
    /// built by `build`. Inputs to `build` other than the critic should be
    /// constants. Returns the DV bound before the step.
    pub fn train_step<F>(&mut self, build: F) -> Result<f64>
    where
        F: for<'t> FnOnce(&'t Tape, &CriticVars<'t>) -> Result<DvParts<'t>>,
    {
        let tape = Tape::new(usize::MAX - 1);
        let vars = self.register(&tape, true)?;
        let parts = build(&tape, &vars)?;
        let bound = parts.bound()?;
        let value = bound.item()?;
        if !value.is_finite() {
            return Err(Error::numeric(
                "critic",
                format!("non-finite bound ({} exp clamps)", tape.diagnostics().exp_clamps),
            ));
        }
        let batch_means = parts.marginal.exp()?.mean_axis(0)?;
        let means = batch_means.value();
        if self.ema.len() != means.numel() {
            self.ema = means.data().to_vec();
        } else {
            for (e, m) in self.ema.iter_mut().zip(means.data()) {
                *e = EMA_DECAY * *e + (1.0 - EMA_DECAY) * m;
            }
        }
        let ema = tape.constant_owned(Tensor::vector(self.ema.clone()));
        let surrogate = parts.joint.sub(batch_means.div(ema)?.mean()?)?;
        let grads = tape.backward(surrogate.neg()?)?;
        let keys = [vars.w1, vars.b1, vars.w2, vars.b2];
        let grads: Vec<Option<Tensor>> = keys.iter().map(|&k| grads.get(k).cloned()).collect();
        let [l1, l2] = &mut self.layers[..] else {
            unreachable!("critic has two layers")
        };
        let (w1, b1) = two_mut(l1);
        let (w2, b2) = two_mut(l2);
        let grad_refs: Vec<Option<&Tensor>> = grads.iter().map(Option::as_ref).collect();
        self.optimizer.step(&mut [w1, b1, w2, b2], &grad_refs);
        Ok(value)
    }
}

fn two_mut(l: &mut LayerParams) -> (&mut Tensor, &mut Tensor) {
    let mut it = l.tensors.iter_mut();
    // BTreeMap order: "bias" < "weight"
    let (_, bias) = it.next().expect("bias");
    let (_, weight) = it.next().expect("weight");
    (weight, bias)
}

/// A critic recorded on one tape.
#[derive(Clone, Copy, Debug)]
pub struct CriticVars<'t> {
    w1: Var<'t>,
    w_x: Var<'t>,
    w_z: Var<'t>,
    b1: Var<'t>,
    w2: Var<'t>,
    b2: Var<'t>,
}

impl<'t> CriticVars<'t> {
    /// `T(x_i, z_j)` for every `(i, j)` in `pairs`, as a vector.
    pub fn score_pairs(&self, x: Var<'t>, z: Var<'t>, pairs: &[(usize, usize)]) -> Result<Var<'t>> {
        let (xi, zi): (Vec<usize>, Vec<usize>) = pairs.iter().copied().unzip();
        let px = x.matmul(self.w_x)?;
        let pz = z.matmul(self.w_z)?;
        let h = px.gather(&xi)?.add(pz.gather(&zi)?)?.add(self.b1)?.relu()?;
        h.matmul(self.w2)?.add(self.b2)?.reshape(&[pairs.len()])
    }
}

/// The pieces of a DV bound: the joint expectation (a scalar) and marginal
/// scores `[samples, groups]`. The bound is `joint − mean_g log mean_s e^M`.
pub struct DvParts<'t> {
    pub joint: Var<'t>,
    pub marginal: Var<'t>,
}

impl<'t> DvParts<'t> {
    /// Per-group `log mean exp` of the marginal scores, shifted for stability.
    pub fn log_mean_exp(&self) -> Result<Var<'t>> {
        let m = self.marginal.value();
        let groups = m.shape()[1];
        let mut peak = vec![f64::NEG_INFINITY; groups];
        for row in m.data().chunks(groups) {
            for (p, &v) in peak.iter_mut().zip(row) {
                *p = p.max(v);
            }
        }
        let c = self.marginal.tape().constant_owned(Tensor::vector(peak));
        self.marginal.sub(c)?.exp()?.mean_axis(0)?.ln()?.add(c)
    }

    pub fn bound(&self) -> Result<Var<'t>> {
        self.joint.sub(self.log_mean_exp()?.mean()?)
    }
}
