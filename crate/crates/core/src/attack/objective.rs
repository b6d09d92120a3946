//! Gradient distances, layer weights and the attack objectives built on them.

use alloc::vec::Vec;

use crate::autodiff::{Graph, Var};
use crate::flsim::{UpdateKind, UpdateRecord};
use crate::nn::{self, ModelSpec, ModelState};
use crate::{Error, Result, Tensor};

/// Cap on the ReLU zero-proportion modifier `1 / (1 - p)`.
pub const MODIFIER_CAP: f64 = 100.0;

/// Per-layer weights: one per convolution in depth order, then the
/// classifier weight.
///
/// Convolution `i` (1-based) gets `l_i = 1 + (beta - 1)(i - 1)/(n_conv - 1)`,
/// multiplied by `min(1 / (1 - p_i), 100)` when zero fractions are given.
/// The classifier gets the mean of the unmodified `l_i`. With one
/// convolution, `l_1 = 1`.
pub fn layer_weights(n_conv: usize, beta: f64, zero_fractions: Option<&[f64]>) -> Result<Vec<f64>> {
    if n_conv == 0 {
        return Err(Error::InvalidConfig("layer weights need at least one convolution".into()));
    }
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::InvalidConfig(alloc::format!("beta must be positive, got {beta}")));
    }
    if let Some(p) = zero_fractions {
        if p.len() != n_conv {
            return Err(Error::InvalidConfig(alloc::format!(
                "{} zero fractions for {n_conv} convolutions",
                p.len()
            )));
        }
        if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidConfig("zero fractions must lie in [0, 1]".into()));
        }
    }
    let linear: Vec<f64> = (0..n_conv)
        .map(|i| {
            if n_conv == 1 {
                1.0
            } else {
                1.0 + (beta - 1.0) * i as f64 / (n_conv - 1) as f64
            }
        })
        .collect();
    let fc = linear.iter().sum::<f64>() / n_conv as f64;
    let mut out: Vec<f64> = match zero_fractions {
        None => linear,
        Some(p) => linear
            .iter()
            .zip(p)
            .map(|(l, &pi)| {
                let z = if pi >= 1.0 {
                    MODIFIER_CAP
                } else {
                    (1.0 / (1.0 - pi)).min(MODIFIER_CAP)
                };
                l * z
            })
            .collect(),
    };
    out.push(fc);
    Ok(out)
}

/// How a candidate gradient is compared with the observed one.
#[derive(Clone, Debug, PartialEq)]
pub enum Distance {
    /// Sum of squared differences.
    L2,
    /// `1 - cos` over all parameters flattened together.
    Cosine,
    /// `1 - weighted cos`, with one weight per layer group.
    Weighted { groups: Vec<Vec<usize>>, alpha: Vec<f64> },
}

impl Distance {
    /// Builds the distance node between `grads` and the constant `target`.
    pub fn build(&self, g: &mut Graph, grads: &[Var], target: &[Tensor]) -> Result<Var> {
        if grads.len() != target.len() {
            return Err(Error::arg("distance", "gradient and target lists differ in length"));
        }
        match self {
            Distance::L2 => {
                let mut terms = Vec::with_capacity(grads.len());
                for (&gv, t) in grads.iter().zip(target) {
                    let tv = g.leaf(t.clone());
                    let d = g.sub(gv, tv)?;
                    terms.push(g.dot(d, d)?);
                }
                g.add_all(&terms)
            }
            Distance::Cosine => {
                let tv: Vec<Var> = target.iter().map(|t| g.leaf(t.clone())).collect();
                let c = g.cosine_similarity_flat(grads, &tv)?;
                one_minus(g, c)
            }
            Distance::Weighted { groups, alpha } => {
                if groups.len() != alpha.len() {
                    return Err(Error::arg("distance", "one weight per layer group required"));
                }
                let mut dots = Vec::with_capacity(groups.len());
                let mut norms = Vec::with_capacity(groups.len());
                let mut target_norm = 0.0;
                for (group, &a) in groups.iter().zip(alpha) {
                    let mut gd = Vec::with_capacity(group.len());
                    let mut gn = Vec::with_capacity(group.len());
                    let mut tn = 0.0;
                    for &i in group {
                        let tv = g.leaf(target[i].clone());
                        gd.push(g.dot(grads[i], tv)?);
                        gn.push(g.dot(grads[i], grads[i])?);
                        tn += target[i].norm_sq();
                    }
                    let d = g.add_all(&gd)?;
                    let n = g.add_all(&gn)?;
                    dots.push(g.scale(d, a)?);
                    norms.push(g.scale(n, a)?);
                    target_norm += a * tn;
                }
                let num = g.add_all(&dots)?;
                let den = g.add_all(&norms)?;
                if g.value(den).item() == 0.0 || target_norm == 0.0 {
                    return Err(Error::ZeroNorm("weighted cosine"));
                }
                let den = g.sqrt(den)?;
                let den = g.scale(den, libm::sqrt(target_norm))?;
                let c = g.div(num, den)?;
                one_minus(g, c)
            }
        }
    }
}

fn one_minus(g: &mut Graph, c: Var) -> Result<Var> {
    let one = g.constant_scalar(1.0);
    g.sub(one, c)
}

fn with_tv(g: &mut Graph, base: Var, dummy: Var, tv_weight: f64) -> Result<Var> {
    if tv_weight == 0.0 {
        return Ok(base);
    }
    let tv = g.total_variation(dummy)?;
    let tv = g.scale(tv, tv_weight)?;
    g.add(base, tv)
}

/// Layer-weighted cosine objective plus `tv_weight * TV(dummy)`.
#[allow(clippy::too_many_arguments)]
pub fn agic_objective(
    g: &mut Graph,
    spec: &ModelSpec,
    state: &ModelState,
    dummy: Var,
    labels: &[usize],
    target: &[Tensor],
    alpha: &[f64],
    tv_weight: f64,
) -> Result<Var> {
    let params = state.leaves(g);
    let grads = nn::batch_gradient(g, spec, &params, dummy, labels)?;
    let distance = Distance::Weighted {
        groups: spec.layer_groups()?,
        alpha: alpha.to_vec(),
    };
    let d = distance.build(g, &grads, target)?;
    with_tv(g, d, dummy, tv_weight)
}

/// Plain cosine objective plus `tv_weight * TV(dummy)`.
pub fn cosine_objective(
    g: &mut Graph,
    spec: &ModelSpec,
    state: &ModelState,
    dummy: Var,
    labels: &[usize],
    target: &[Tensor],
    tv_weight: f64,
) -> Result<Var> {
    let params = state.leaves(g);
    let grads = nn::batch_gradient(g, spec, &params, dummy, labels)?;
    let d = Distance::Cosine.build(g, &grads, target)?;
    with_tv(g, d, dummy, tv_weight)
}

/// Squared L2 distance between dummy and observed gradients; no prior term.
pub fn l2_objective(
    g: &mut Graph,
    spec: &ModelSpec,
    state: &ModelState,
    dummy: Var,
    labels: &[usize],
    target: &[Tensor],
) -> Result<Var> {
    let params = state.leaves(g);
    let grads = nn::batch_gradient(g, spec, &params, dummy, labels)?;
    Distance::L2.build(g, &grads, target)
}

/// Mean of the gradients met along `steps` differentiable SGD steps from
/// `state`, one step per consecutive chunk of `batch`. This equals the weight
/// change divided by `-lr * steps`.
pub fn unrolled_mean_gradient(
    g: &mut Graph,
    spec: &ModelSpec,
    state: &ModelState,
    batch: Var,
    labels: &[usize],
    steps: usize,
    lr: f64,
) -> Result<Vec<Var>> {
    let rows = g.shape(batch)[0];
    if steps == 0 || rows % steps != 0 || labels.len() != rows {
        return Err(Error::arg(
            "unrolled_mean_gradient",
            alloc::format!("{rows} rows and {} labels do not split into {steps} steps", labels.len()),
        ));
    }
    let b = rows / steps;
    let mut weights = state.leaves(g);
    let mut total: Option<Vec<Var>> = None;
    for t in 0..steps {
        let x = if steps == 1 { batch } else { g.slice(batch, t * b, b)? };
        let grads = nn::batch_gradient(g, spec, &weights, x, &labels[t * b..(t + 1) * b])?;
        if t + 1 < steps {
            weights = weights
                .iter()
                .zip(&grads)
                .map(|(&w, &gr)| {
                    let s = g.scale(gr, lr)?;
                    g.sub(w, s)
                })
                .collect::<Result<_>>()?;
        }
        total = Some(match total {
            None => grads,
            Some(acc) => acc
                .iter()
                .zip(&grads)
                .map(|(&a, &gr)| g.add(a, gr))
                .collect::<Result<_>>()?,
        });
    }
    let total = total.expect("at least one step");
    if steps == 1 {
        return Ok(total);
    }
    total
        .iter()
        .map(|&t| g.scale(t, 1.0 / steps as f64))
        .collect()
}

/// Simulation objective for a model-delta record: unroll the record's local
/// steps on the dummy batches with local learning rate `lr` and compare the
/// resulting change with the observed one (both divided by `-lr * T`), plus
/// `tv_weight * TV`.
#[allow(clippy::too_many_arguments)]
pub fn simulation_objective(
    g: &mut Graph,
    spec: &ModelSpec,
    record: &UpdateRecord,
    dummy: Var,
    labels: &[usize],
    lr: f64,
    distance: &Distance,
    tv_weight: f64,
) -> Result<Var> {
    if record.kind != UpdateKind::ModelDelta {
        return Err(Error::arg("simulation_objective", "record is not a model delta"));
    }
    let target = super::one_batch_gradients(record, lr)?;
    let sums = unrolled_mean_gradient(g, spec, &record.base, dummy, labels, record.local_steps, lr)?;
    let d = distance.build(g, &sums, &target)?;
    with_tv(g, d, dummy, tv_weight)
}
