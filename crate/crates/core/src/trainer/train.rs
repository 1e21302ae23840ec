//! Sequential module training and the end-to-end baseline.

use std::collections::BTreeSet;
use std::time::Instant;

use super::model::{merge_graphs, module_forward, pool_values, register_module, Model};
use super::plan::{Hyper, MiXTarget, ModulePlan};
use super::report::{ModuleTrace, TrainMode, TrainReport};
use crate::autodiff::{GradientMap, Tape, Var};
use crate::data::{Dataset, Features};
use crate::error::{Error, Result};
use crate::estimators::{
    dim_local_parts, gmi_feature_parts, gmi_lite_var, matrix_mi_var, mine_parts, CriticNet, EstimatorKind, GmiSample,
    Units,
};
use crate::layers::{Architecture, GraphBatch, LayerParams, ObjectiveTag, ParamVars};
use crate::optim::Adam;
use crate::rng::{derive_seed, marginal_permutation, permutation, seeded, Rng};
use crate::tensor::Tensor;

const PROB_FLOOR: f64 = 1e-12;

/// `mean_i −Σ_c y_ic ln(max(p_ic, 1e-12))`, recorded on `pred`'s tape.
pub fn cross_entropy_var<'t>(pred: Var<'t>, labels: &Tensor) -> Result<Var<'t>> {
    let p = pred.value();
    if p.ndim() != 2 || p.shape() != labels.shape() {
        return Err(Error::dim(
            "cross_entropy",
            format!("predictions {:?} against labels {:?}", p.shape(), labels.shape()),
        ));
    }
    let n = p.rows();
    if n == 0 {
        return Err(Error::contract("cross-entropy of an empty batch"));
    }
    for i in 0..n {
        let s: f64 = p.row(i).iter().sum();
        if !((s - 1.0).abs() <= 1e-9) {
            return Err(Error::contract(format!("prediction row {i} sums to {s}, not 1")));
        }
    }
    let keep = p.map(|v| if v >= PROB_FLOOR { 1.0 } else { 0.0 });
    let floor = p.map(|v| if v >= PROB_FLOOR { 0.0 } else { PROB_FLOOR });
    let t = pred.tape();
    pred.mul(t.constant_owned(keep))?
        .add(t.constant_owned(floor))?
        .ln()?
        .mul(t.constant(labels))?
        .sum()?
        .scale(-1.0 / n as f64)
}

pub fn cross_entropy(pred: &Tensor, labels: &Tensor) -> Result<f64> {
    let tape = Tape::new(usize::MAX);
    cross_entropy_var(tape.constant(pred), labels)?.item()
}

/// Inputs of one module over its training units.
enum View {
    /// Row `p` belongs to unit `p`.
    Rows { input: Tensor, raw: Tensor },
    /// Graph `p` belongs to unit `p`.
    Graphs { input: Vec<GraphBatch>, raw: Vec<GraphBatch> },
    /// The whole graph; units are node indices.
    Nodes { input: GraphBatch, raw: GraphBatch },
}

struct Step {
    input: Tensor,
    /// The MaxMI_X target at the input's resolution.
    target: Tensor,
    graph: Option<GraphBatch>,
    labels: Vec<usize>,
    /// Output rows that take part in the objective (node views).
    select: Option<Vec<usize>>,
}

fn last(mut outs: Vec<Tensor>) -> Tensor {
    outs.pop().expect("at least one module")
}

/// Frozen outputs of modules `0..k` on `units`.
fn module_view(model: &Model, k: usize, data: &Dataset, units: &[usize]) -> Result<View> {
    const CHUNK: usize = 256;
    match &data.features {
        Features::Dense(x) => {
            let raw = x.select_rows(units)?;
            if k == 0 {
                return Ok(View::Rows { input: raw.clone(), raw });
            }
            let mut parts = Vec::new();
            for chunk in units.chunks(CHUNK) {
                parts.push(last(model.run_values(0..k, &x.select_rows(chunk)?, None)?));
            }
            Ok(View::Rows {
                input: Tensor::concat_rows(&parts)?,
                raw,
            })
        }
        Features::Graphs(graphs) => {
            let raw: Vec<GraphBatch> = units.iter().map(|&i| graphs[i].clone()).collect();
            if k == 0 {
                return Ok(View::Graphs { input: raw.clone(), raw });
            }
            let pooled = model.pooled_after(k - 1);
            let mut input = Vec::with_capacity(units.len());
            let mut rows = Vec::new();
            let mut raw_rows = Vec::new();
            for (c, chunk) in units.chunks(CHUNK).enumerate() {
                let batch = merge_graphs(graphs, chunk)?;
                let out = last(model.run_values(0..k, batch.node_features(), Some(&batch))?);
                if pooled {
                    rows.push(out);
                    raw_rows.push(pool_values(batch.node_features(), &batch)?);
                } else {
                    for g in 0..chunk.len() {
                        let nodes: Vec<usize> = batch.node_range(g).collect();
                        input.push(raw[c * CHUNK + g].with_features(out.select_rows(&nodes)?)?);
                    }
                }
            }
            if pooled {
                Ok(View::Rows {
                    input: Tensor::concat_rows(&rows)?,
                    raw: Tensor::concat_rows(&raw_rows)?,
                })
            } else {
                Ok(View::Graphs { input, raw })
            }
        }
        Features::Graph(g) => {
            let input = if k == 0 {
                g.clone()
            } else {
                g.with_features(last(model.run_values(0..k, g.node_features(), Some(g))?))?
            };
            Ok(View::Nodes { input, raw: g.clone() })
        }
    }
}

impl View {
    fn len(&self, units: &[usize]) -> usize {
        match self {
            View::Rows { input, .. } => input.rows(),
            View::Graphs { input, .. } => input.len(),
            View::Nodes { .. } => units.len(),
        }
    }

    /// Minibatches of unit positions for one epoch; node views train on the
    /// full graph in one step.
    fn batches(&self, units: &[usize], batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
        match self {
            View::Nodes { .. } => vec![(0..units.len()).collect()],
            _ => permutation(self.len(units), rng)
                .chunks(batch_size)
                .map(<[usize]>::to_vec)
                .collect(),
        }
    }

    fn step(&self, positions: &[usize], units: &[usize], labels: &[usize], raw_target: bool) -> Result<Step> {
        let unit_labels = positions.iter().map(|&p| labels[units[p]]).collect();
        match self {
            View::Rows { input, raw } => {
                let input = input.select_rows(positions)?;
                let target = if raw_target { raw.select_rows(positions)? } else { input.clone() };
                Ok(Step {
                    input,
                    target,
                    graph: None,
                    labels: unit_labels,
                    select: None,
                })
            }
            View::Graphs { input, raw } => {
                let g = merge_graphs(input, positions)?;
                let target = if raw_target {
                    merge_graphs(raw, positions)?.node_features().clone()
                } else {
                    g.node_features().clone()
                };
                Ok(Step {
                    input: g.node_features().clone(),
                    target,
                    graph: Some(g),
                    labels: unit_labels,
                    select: None,
                })
            }
            View::Nodes { input, raw } => {
                let select: Vec<usize> = positions.iter().map(|&p| units[p]).collect();
                let target = if raw_target { raw } else { input }.node_features().clone();
                Ok(Step {
                    input: input.node_features().clone(),
                    target,
                    graph: Some(input.clone()),
                    labels: unit_labels,
                    select: Some(select),
                })
            }
        }
    }
}

struct EpochLog {
    trajectory: Vec<f64>,
    epoch_ms: Vec<u64>,
    skipped: usize,
}

/// Runs `epochs` passes; `step` returns the pre-update objective and its
/// sample count, or `None` for a skipped batch.
fn run_epochs(
    view: &View,
    units: &[usize],
    labels: &[usize],
    epochs: usize,
    batch_size: usize,
    raw_target: bool,
    rng: &mut Rng,
    mut step: impl FnMut(&Step, &mut Rng) -> Result<Option<(f64, usize)>>,
) -> Result<EpochLog> {
    let mut log = EpochLog {
        trajectory: Vec::with_capacity(epochs),
        epoch_ms: Vec::with_capacity(epochs),
        skipped: 0,
    };
    for epoch in 0..epochs {
        let start = Instant::now();
        let (mut total, mut count) = (0.0, 0usize);
        for positions in view.batches(units, batch_size, rng) {
            let s = view.step(&positions, units, labels, raw_target)?;
            match step(&s, rng)? {
                Some((v, n)) => {
                    total += v * n as f64;
                    count += n;
                }
                None => log.skipped += 1,
            }
        }
        if count == 0 {
            return Err(Error::contract(format!("every batch of epoch {epoch} was skipped")));
        }
        log.trajectory.push(total / count as f64);
        log.epoch_ms.push(start.elapsed().as_millis() as u64);
    }
    Ok(log)
}

fn row_width(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

fn check_finite(value: f64, what: &str, tape: &Tape) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::numeric(
            "train",
            format!("{what} objective is {value} ({} exp clamps)", tape.diagnostics().exp_clamps),
        ))
    }
}

/// Units a module's objective is computed over. Label objectives see only
/// labeled training samples; MaxMI_X on a node graph sees every non-test node.
fn objective_units(data: &Dataset, tag: ObjectiveTag) -> Result<Vec<usize>> {
    let train = data.split("train")?;
    match (tag, &data.label_mask) {
        (ObjectiveTag::MaxMiX, Some(_)) => {
            let test: BTreeSet<usize> = data.splits.get("test").into_iter().flatten().copied().collect();
            Ok((0..data.len()).filter(|i| !test.contains(i)).collect())
        }
        (ObjectiveTag::MaxMiX, None) => Ok(train.to_vec()),
        _ => Ok(data.labeled(train)),
    }
}

struct MiSetup<'a> {
    estimator: EstimatorKind,
    critic: &'a mut Option<CriticNet>,
    critic_seed: u64,
    plan: &'a ModulePlan,
}

/// The recorded MI between `repr` and `target`, or `None` when the batch is
/// too small.
fn mi_objective<'t>(
    setup: &mut MiSetup<'_>,
    repr: Var<'t>,
    target: &Tensor,
    graph: Option<&GraphBatch>,
    rng: &mut Rng,
) -> Result<Option<(Var<'t>, usize)>> {
    let tape = repr.tape();
    let n = repr.shape()[0];
    if n < 2 || target.rows() != n {
        if target.rows() != n {
            return Err(Error::dim("objective", format!("{n} outputs against {} targets", target.rows())));
        }
        return Ok(None);
    }
    let plan = setup.plan;
    let rv = repr.value();
    let new_critic = |x_dim, z_dim| CriticNet::new(x_dim, z_dim, plan.critic_lr, setup.critic_seed);
    let out = match setup.estimator {
        EstimatorKind::Matrix => {
            let (repr, target) = if n > plan.max_objective_samples {
                let mut keep = permutation(n, rng);
                keep.truncate(plan.max_objective_samples);
                keep.sort_unstable();
                (repr.gather(&keep)?, target.select_rows(&keep)?)
            } else {
                (repr, target.clone())
            };
            let m = repr.shape()[0];
            (matrix_mi_var(repr, tape.constant_owned(target), plan.alpha)?, m)
        }
        EstimatorKind::Mine => {
            if setup.critic.is_none() {
                *setup.critic = Some(new_critic(row_width(rv.shape()), row_width(target.shape()))?);
            }
            let critic = setup.critic.as_mut().expect("critic");
            for _ in 0..plan.critic_steps {
                let m = marginal_permutation(n, rng);
                critic.train_step(|t, v| mine_parts(v, t.constant(&rv), t.constant(target), &m))?;
            }
            let m = marginal_permutation(n, rng);
            let vars = critic.register(tape, false)?;
            (mine_parts(&vars, repr, tape.constant(target), &m)?.bound()?, n)
        }
        EstimatorKind::DimLocal => {
            if rv.ndim() != 4 {
                return Err(Error::Incompatible(format!("local MI needs a feature map, got {:?}", rv.shape())));
            }
            let global = target.clone().flatten_rows();
            if setup.critic.is_none() {
                *setup.critic = Some(new_critic(rv.shape()[1], global.row_len())?);
            }
            let critic = setup.critic.as_mut().expect("critic");
            for _ in 0..plan.critic_steps {
                let m = marginal_permutation(n, rng);
                critic.train_step(|t, v| dim_local_parts(v, t.constant(&rv), t.constant(&global), &m))?;
            }
            let m = marginal_permutation(n, rng);
            let vars = critic.register(tape, false)?;
            (dim_local_parts(&vars, repr, tape.constant(&global), &m)?.bound()?, n)
        }
        EstimatorKind::GmiLite => {
            let graph = graph.ok_or_else(|| Error::Incompatible("graph MI needs graph data".into()))?;
            let (rv, target) = (rv.flatten_rows(), target.clone().flatten_rows());
            if setup.critic.is_none() {
                *setup.critic = Some(new_critic(rv.row_len(), target.row_len())?);
            }
            let critic = setup.critic.as_mut().expect("critic");
            for _ in 0..plan.critic_steps {
                let s = GmiSample::draw(graph, rng);
                critic.train_step(|t, v| {
                    gmi_feature_parts(v, t.constant(&target), t.constant(&rv), graph, &s.marginal)
                })?;
            }
            let s = GmiSample::draw(graph, rng);
            let vars = critic.register(tape, false)?;
            (gmi_lite_var(&vars, tape.constant(&target), repr, graph, &s)?.0, n)
        }
    };
    Ok(Some(out))
}

fn apply_update(opt: &mut Adam, layers: Vec<&mut LayerParams>, vars: &[&ParamVars<'_>], grads: &GradientMap) {
    let updates: Vec<Option<Tensor>> = layers
        .iter()
        .zip(vars)
        .flat_map(|(layer, pv)| {
            layer
                .tensors
                .keys()
                .map(move |name| pv.get(name).ok().and_then(|v| grads.get(v).cloned()))
        })
        .collect();
    let mut targets: Vec<&mut Tensor> = layers.into_iter().flat_map(|l| l.tensors.values_mut()).collect();
    let refs: Vec<Option<&Tensor>> = updates.iter().map(Option::as_ref).collect();
    opt.step(&mut targets, &refs);
}

/// Trains module `k` alone against its objective. Modules `0..k` must be
/// trained; only `model.params[k]` changes.
pub fn train_module(k: usize, plan: &ModulePlan, model: &mut Model, data: &Dataset) -> Result<ModuleTrace> {
    if plan.arch != model.arch {
        return Err(Error::contract("plan and model describe different architectures"));
    }
    let pm = plan
        .modules
        .get(k)
        .ok_or_else(|| Error::contract(format!("module {k} out of range for {} modules", plan.modules.len())))?;
    if let Some(u) = (0..k).find(|&u| !model.trained[u]) {
        return Err(Error::contract(format!("module {k} needs trained upstream modules, but module {u} is untrained")));
    }
    model.check_data(data)?;
    let tag = pm.objective.tag;
    let units = objective_units(data, tag)?;
    if units.is_empty() {
        return Err(Error::contract(format!("module {k} has no samples to train on")));
    }
    let view = module_view(model, k, data, &units)?;
    let graph_view = !matches!(view, View::Rows { .. });
    let node_out = graph_view && !model.pooled_after(k);
    let pools_here = graph_view && model.pooled_after(k);
    let raw_target = plan.mi_x_target == MiXTarget::Raw;
    let classes = data.class_count;

    let mut rng = seeded(pm.hyper.seed);
    let mut opt = Adam::new(pm.hyper.lr);
    let mut critic = None;
    let mut setup = pm.objective.estimator.map(|estimator| MiSetup {
        estimator,
        critic: &mut critic,
        critic_seed: derive_seed(plan.seed, 0x2000 + k as u64),
        plan,
    });
    let layers = &pm.spec.layers;

    let log = run_epochs(
        &view,
        &units,
        &data.labels,
        pm.hyper.epochs,
        pm.hyper.batch_size,
        raw_target,
        &mut rng,
        |s, rng| {
            let tape = Tape::new(k);
            let vars = register_module(&model.params[k], &tape, true);
            let out = module_forward(layers, &vars, tape.constant(&s.input), s.graph.as_ref())?;
            let gmi = matches!(setup.as_ref().map(|m| m.estimator), Some(EstimatorKind::GmiLite));
            let objective = match tag {
                ObjectiveTag::MaxMiX => {
                    let setup = setup.as_mut().expect("MI objective has an estimator");
                    let (repr, target) = match &s.select {
                        Some(sel) if !gmi => (out.gather(sel)?, s.target.select_rows(sel)?),
                        _ if pools_here => (out, pool_values(&s.target, s.graph.as_ref().expect("graph"))?),
                        _ => (out, s.target.clone()),
                    };
                    mi_objective(setup, repr, &target, s.graph.as_ref(), rng)?.map(|(v, n)| (v, n, true))
                }
                ObjectiveTag::MaxMiY | ObjectiveTag::CrossEntropy => {
                    let pred = match (&s.select, &s.graph) {
                        (Some(sel), _) => out.gather(sel)?,
                        (None, Some(g)) if node_out => out.sparse_left_mul(g.pooling())?,
                        _ => out,
                    };
                    let y = Tensor::one_hot(&s.labels, classes)?;
                    if tag == ObjectiveTag::CrossEntropy {
                        if s.labels.is_empty() {
                            None
                        } else {
                            Some((cross_entropy_var(pred, &y)?, s.labels.len(), false))
                        }
                    } else {
                        let setup = setup.as_mut().expect("MI objective has an estimator");
                        mi_objective(setup, pred, &y, None, rng)?.map(|(v, n)| (v, n, true))
                    }
                }
            };
            let Some((objective, n, ascend)) = objective else {
                return Ok(None);
            };
            let value = check_finite(objective.item()?, &format!("module {k}"), &tape)?;
            let loss = if ascend { objective.neg()? } else { objective };
            let grads = tape.backward(loss)?;
            apply_update(&mut opt, model.params[k].iter_mut().collect(), &vars.iter().collect::<Vec<_>>(), &grads);
            Ok(Some((value, n)))
        },
    )?;
    model.trained[k] = true;
    Ok(ModuleTrace {
        module: Some(k),
        tag,
        estimator: pm.objective.estimator,
        units: pm.objective.estimator.map_or(Units::Nats, EstimatorKind::units),
        trajectory: log.trajectory,
        skipped_batches: log.skipped,
        epoch_ms: log.epoch_ms,
    })
}

fn finish_report(
    mode: TrainMode,
    model: &Model,
    data: &Dataset,
    suite: Option<String>,
    seed: u64,
    modules: Vec<ModuleTrace>,
    config: serde_json::Value,
) -> Result<TrainReport> {
    Ok(TrainReport {
        mode,
        arch: model.arch.name,
        suite,
        seed,
        modules,
        train_accuracy: model.accuracy(data, "train")?,
        test_accuracy: model.accuracy(data, "test")?,
        config,
    })
}

/// Trains modules `0..K` in order, each against its own objective.
pub fn train_sequential(plan: &ModulePlan, data: &Dataset) -> Result<(Model, TrainReport)> {
    plan.validate()?;
    let mut model = Model::init(&plan.arch, plan.seed)?;
    model.check_data(data)?;
    let mut traces = Vec::with_capacity(plan.modules.len());
    for k in 0..plan.modules.len() {
        traces.push(train_module(k, plan, &mut model, data)?);
    }
    let config = serde_json::to_value(plan).map_err(|e| Error::contract(e.to_string()))?;
    let report = finish_report(
        TrainMode::Mole,
        &model,
        data,
        Some(plan.suite.to_string()),
        plan.seed,
        traces,
        config,
    )?;
    Ok((model, report))
}

/// End-to-end cross-entropy training of every layer on one tape, from the
/// same initial parameters as the sequential trainer.
pub fn train_bp(arch: &Architecture, data: &Dataset, hyper: &Hyper, seed: u64) -> Result<(Model, TrainReport)> {
    hyper.validate()?;
    let mut model = Model::init(arch, seed)?;
    model.check_data(data)?;
    let units = data.labeled(data.split("train")?);
    if units.is_empty() {
        return Err(Error::contract("no labeled training samples"));
    }
    let view = module_view(&model, 0, data, &units)?;
    let mut rng = seeded(derive_seed(seed, 0x3000));
    let mut opt = Adam::new(hyper.lr);
    let classes = data.class_count;
    let log = run_epochs(
        &view,
        &units,
        &data.labels,
        hyper.epochs,
        hyper.batch_size,
        false,
        &mut rng,
        |s, _| {
            let tape = Tape::new(0);
            let vars: Vec<Vec<ParamVars<'_>>> =
                model.params.iter().map(|p| register_module(p, &tape, true)).collect();
            let mut out = tape.constant(&s.input);
            for (m, v) in model.arch.modules.iter().zip(&vars) {
                out = module_forward(&m.layers, v, out, s.graph.as_ref())?;
            }
            if let Some(sel) = &s.select {
                out = out.gather(sel)?;
            }
            let loss = cross_entropy_var(out, &Tensor::one_hot(&s.labels, classes)?)?;
            let value = check_finite(loss.item()?, "network", &tape)?;
            let grads = tape.backward(loss)?;
            let flat: Vec<&ParamVars<'_>> = vars.iter().flatten().collect();
            apply_update(&mut opt, model.params.iter_mut().flatten().collect(), &flat, &grads);
            Ok(Some((value, s.labels.len())))
        },
    )?;
    model.trained.iter_mut().for_each(|t| *t = true);
    let trace = ModuleTrace {
        module: None,
        tag: ObjectiveTag::CrossEntropy,
        estimator: None,
        units: Units::Nats,
        trajectory: log.trajectory,
        skipped_batches: log.skipped,
        epoch_ms: log.epoch_ms,
    };
    let config = serde_json::to_value(hyper).map_err(|e| Error::contract(e.to_string()))?;
    let report = finish_report(TrainMode::Bp, &model, data, None, seed, vec![trace], config)?;
    Ok((model, report))
}
