//! Gradient inversion: recover training samples from an observed update.
//!
//! A reconstruction optimizes dummy samples, initialized from a seeded
//! standard normal in normalized image space, so that the gradients they
//! induce match the observed ones. Labels are fixed before optimization,
//! either inferred from the classifier gradient or supplied by the caller.
//!
//! Model-delta updates are handled either by the one-batch approximation
//! (`-delta / lr` treated as one gradient of all `B * T` samples) or by
//! unrolling the client's local steps inside the objective.

mod adam;
pub mod labels;
pub mod objective;

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use adam::{optimize, Adam, Optimized, TracePoint};
pub use labels::infer_labels;
pub use objective::{
    agic_objective, cosine_objective, l2_objective, layer_weights, simulation_objective,
    unrolled_mean_gradient, Distance, MODIFIER_CAP,
};

use crate::autodiff::{Graph, Var};
use crate::clock::Clock;
use crate::data::Normalization;
use crate::flsim::{UpdateKind, UpdateRecord};
use crate::nn::{self, ModelSpec, ModelState};
use crate::rng::{normal_tensor, seeded};
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObjectiveKind {
    /// Squared L2 gradient distance, no prior.
    L2Dlg,
    /// `1 - cos` plus total variation.
    CosineInvg,
    /// Layer-weighted `1 - cos` plus total variation.
    Agic,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FedAvgMode {
    /// Only gradient updates are accepted.
    None,
    OneBatch,
    Simulation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, rename_all = "kebab-case", deny_unknown_fields)]
pub struct AttackConfig {
    pub objective: ObjectiveKind,
    pub fedavg_mode: FedAvgMode,
    pub iterations: usize,
    /// Adam learning rate.
    pub lr: f64,
    pub tv_weight: f64,
    pub beta: f64,
    pub relu_modifier: bool,
    /// Client learning rate, assumed known to the attacker.
    pub local_lr: f64,
    pub seed: u64,
    pub trace_every: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            objective: ObjectiveKind::Agic,
            fedavg_mode: FedAvgMode::OneBatch,
            iterations: 10_000,
            lr: 0.1,
            tv_weight: 1e-4,
            beta: 50.0,
            relu_modifier: true,
            local_lr: 1e-4,
            seed: 0,
            trace_every: 100,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::InvalidConfig(msg.into()));
        if self.iterations == 0 {
            return bad("iterations must be at least 1");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if !(self.tv_weight >= 0.0 && self.tv_weight.is_finite()) {
            return bad("tv-weight must be non-negative");
        }
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return bad("beta must be positive");
        }
        if !(self.local_lr > 0.0 && self.local_lr.is_finite()) {
            return bad("local-lr must be positive");
        }
        Ok(())
    }
}

/// Where the labels of the dummy samples come from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LabelSource {
    Infer,
    /// One label per slot, in slot order.
    Given(Vec<usize>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconstructionResult {
    /// Best iterate in normalized space, one row per slot.
    pub dummy: Tensor,
    /// `dummy` mapped back to pixel space; not clamped.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub best_objective: f64,
    pub best_iteration: usize,
    pub last_objective: f64,
    pub trace: Vec<TracePoint>,
    pub seconds_per_iteration: f64,
}

/// Approximates the gradient of all `B * T` samples of a model-delta record
/// from `delta / -lr`.
///
/// `delta / -lr` is the sum of the `T` per-step mean gradients; dividing by
/// `T` as well makes it comparable with the mean-loss gradient of one batch
/// holding all `B * T` samples. For `T = 1` this is exactly `delta / -lr`.
pub fn one_batch_gradients(record: &UpdateRecord, lr: f64) -> Result<Vec<Tensor>> {
    if record.kind != UpdateKind::ModelDelta {
        return Err(Error::arg("one_batch_gradients", "record is not a model delta"));
    }
    if lr.is_nan() || lr <= 0.0 {
        return Err(Error::arg("one_batch_gradients", "learning rate must be positive"));
    }
    let scale = -lr * record.local_steps as f64;
    Ok(record.payload.iter().map(|d| d.map(|v| v / scale)).collect())
}

/// The gradient the attack matches: the payload of a gradient record, or the
/// one-batch approximation of a model-delta record.
pub fn target_gradients(record: &UpdateRecord, config: &AttackConfig) -> Result<Vec<Tensor>> {
    match record.kind {
        UpdateKind::Gradient => Ok(record.payload.clone()),
        UpdateKind::ModelDelta => {
            if config.fedavg_mode == FedAvgMode::None {
                return Err(Error::InvalidConfig(
                    "model-delta records need fedavg-mode one-batch or simulation".into(),
                ));
            }
            one_batch_gradients(record, config.local_lr)
        }
    }
}

/// Labels for the slots of `record`: inferred ones are sorted ascending.
pub fn resolve_labels(
    spec: &ModelSpec,
    record: &UpdateRecord,
    config: &AttackConfig,
    source: &LabelSource,
) -> Result<Vec<usize>> {
    let n = record.samples();
    match source {
        LabelSource::Given(labels) => {
            if labels.len() != n {
                return Err(Error::arg(
                    "resolve_labels",
                    alloc::format!("{} labels given for {n} slots", labels.len()),
                ));
            }
            if let Some(&label) = labels.iter().find(|&&l| l >= spec.classes) {
                return Err(Error::LabelOutOfRange {
                    label,
                    classes: spec.classes,
                });
            }
            Ok(labels.clone())
        }
        LabelSource::Infer => infer_labels(spec, &target_gradients(record, config)?, n),
    }
}

/// The distance a config prescribes for a given target gradient.
pub fn distance_for(spec: &ModelSpec, config: &AttackConfig, target: &[Tensor]) -> Result<Distance> {
    Ok(match config.objective {
        ObjectiveKind::L2Dlg => Distance::L2,
        ObjectiveKind::CosineInvg => Distance::Cosine,
        ObjectiveKind::Agic => {
            let fractions = if config.relu_modifier {
                Some(nn::zero_fraction_per_layer(spec, target)?)
            } else {
                None
            };
            Distance::Weighted {
                groups: spec.layer_groups()?,
                alpha: layer_weights(spec.n_conv(), config.beta, fractions.as_deref())?,
            }
        }
    })
}

/// One weighted summand of a reconstruction objective.
#[derive(Clone, Debug, PartialEq)]
pub struct Term {
    pub base: ModelState,
    pub target: Vec<Tensor>,
    /// Label of each batch row.
    pub labels: Vec<usize>,
    /// Dummy rows that form the batch, in slot order.
    pub rows: Vec<usize>,
    /// Local steps to unroll; 1 compares a single batch gradient.
    pub steps: usize,
    pub lr: f64,
    pub distance: Distance,
    pub gamma: f64,
}

/// `sum_k gamma_k * distance_k + tv_weight * TV(dummy)` over one dummy tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Problem<'a> {
    pub spec: &'a ModelSpec,
    pub terms: Vec<Term>,
    pub tv_weight: f64,
}

impl Problem<'_> {
    /// Builds the objective node for `dummy` in `g`.
    pub fn build(&self, g: &mut Graph, dummy: Var) -> Result<Var> {
        let n = g.shape(dummy)[0];
        let mut values = Vec::with_capacity(self.terms.len() + 1);
        for term in &self.terms {
            let batch = gather_rows(g, dummy, &term.rows, n)?;
            let grads = if term.steps == 1 {
                let params = term.base.leaves(g);
                nn::batch_gradient(g, self.spec, &params, batch, &term.labels)?
            } else {
                unrolled_mean_gradient(g, self.spec, &term.base, batch, &term.labels, term.steps, term.lr)?
            };
            let d = term.distance.build(g, &grads, &term.target)?;
            values.push(if term.gamma == 1.0 { d } else { g.scale(d, term.gamma)? });
        }
        if self.tv_weight != 0.0 {
            let tv = g.total_variation(dummy)?;
            values.push(g.scale(tv, self.tv_weight)?);
        }
        g.add_all(&values)
    }

    /// Objective value and its gradient with respect to `dummy`.
    pub fn evaluate(&self, dummy: &Tensor) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let d = g.leaf(dummy.clone());
        let obj = self.build(&mut g, d)?;
        let grad = g.grad(obj, &[d])?[0];
        Ok((g.value(obj).item(), g.value(grad).clone()))
    }

    pub fn value(&self, dummy: &Tensor) -> Result<f64> {
        let mut g = Graph::new();
        let d = g.leaf(dummy.clone());
        let obj = self.build(&mut g, d)?;
        Ok(g.value(obj).item())
    }
}

fn gather_rows(g: &mut Graph, dummy: Var, rows: &[usize], n: usize) -> Result<Var> {
    if rows.is_empty() || rows.iter().any(|&r| r >= n) {
        return Err(Error::SlotBinding(alloc::format!("rows {rows:?} outside 0..{n}")));
    }
    let contiguous = rows.windows(2).all(|w| w[1] == w[0] + 1);
    if contiguous {
        if rows[0] == 0 && rows.len() == n {
            return Ok(dummy);
        }
        return g.slice(dummy, rows[0], rows.len());
    }
    let parts = rows
        .iter()
        .map(|&r| g.slice(dummy, r, 1))
        .collect::<Result<Vec<_>>>()?;
    g.concat(&parts)
}

/// The objective term for a single record with slot labels `labels`.
pub fn record_term(
    spec: &ModelSpec,
    record: &UpdateRecord,
    config: &AttackConfig,
    labels: &[usize],
    gamma: f64,
) -> Result<Term> {
    let target = target_gradients(record, config)?;
    let distance = distance_for(spec, config, &target)?;
    let steps = match (record.kind, config.fedavg_mode) {
        (UpdateKind::ModelDelta, FedAvgMode::Simulation) => record.local_steps,
        _ => 1,
    };
    Ok(Term {
        base: record.base.clone(),
        target,
        labels: labels.to_vec(),
        rows: (0..labels.len()).collect(),
        steps,
        lr: config.local_lr,
        distance,
        gamma,
    })
}

/// TV weight a config applies; the L2 baseline uses no prior.
pub fn effective_tv_weight(config: &AttackConfig) -> f64 {
    match config.objective {
        ObjectiveKind::L2Dlg => 0.0,
        _ => config.tv_weight,
    }
}

/// Standard-normal dummy samples of shape `[n, C, H, W]`.
pub fn init_dummy(spec: &ModelSpec, n: usize, seed: u64) -> Tensor {
    let [c, h, w] = spec.input;
    normal_tensor(&mut seeded(seed), &[n, c, h, w])
}

/// Runs Adam on `problem` from `init` and packages the best iterate.
pub fn solve(
    problem: &Problem<'_>,
    init: Tensor,
    labels: Vec<usize>,
    config: &AttackConfig,
    norm: &Normalization,
    clock: &dyn Clock,
) -> Result<ReconstructionResult> {
    let out = optimize(init, config.iterations, config.lr, config.trace_every, clock, |x| {
        problem.evaluate(x)
    })?;
    Ok(ReconstructionResult {
        images: norm.denormalize(&out.best),
        dummy: out.best,
        labels,
        best_objective: out.best_objective,
        best_iteration: out.best_iteration,
        last_objective: out.last_objective,
        trace: out.trace,
        seconds_per_iteration: out.seconds_per_iteration,
    })
}

/// Reconstructs the samples behind one update.
pub fn reconstruct(
    spec: &ModelSpec,
    record: &UpdateRecord,
    config: &AttackConfig,
    labels: &LabelSource,
    norm: &Normalization,
    clock: &dyn Clock,
) -> Result<ReconstructionResult> {
    let labels = resolve_labels(spec, record, config, labels)?;
    let term = record_term(spec, record, config, &labels, 1.0)?;
    let problem = Problem {
        spec,
        terms: alloc::vec![term],
        tv_weight: effective_tv_weight(config),
    };
    let init = init_dummy(spec, labels.len(), config.seed);
    solve(&problem, init, labels, config, norm, clock)
}

#[cfg(test)]
mod tests;
