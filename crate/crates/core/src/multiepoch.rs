//! Cross-epoch attacks: match updates that share a sample and reconstruct
//! that sample jointly from all of them.
//!
//! Every update is first reconstructed on a reduced budget. Slots of two
//! epochs are then paired greedily by the MSE of their average-pooled
//! pre-reconstructions, optionally only between updates whose inferred label
//! lists intersect. Finally each matched sample gets one shared dummy that
//! appears in every update it was matched to, weighted per epoch.

use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::attack::{
    self, effective_tv_weight, init_dummy, record_term, resolve_labels, solve, AttackConfig,
    LabelSource, Problem, ReconstructionResult,
};
use crate::autodiff::kernels;
use crate::clock::Clock;
use crate::data::Normalization;
use crate::flsim::UpdateRecord;
use crate::metrics::mse;
use crate::nn::ModelSpec;
use crate::rng::derive_seed;
use crate::{Error, Result, Tensor};

/// Pre-reconstruction budget used when none is configured.
pub const DEFAULT_PRE_BUDGET: usize = 2000;

/// Pooling window (and stride) applied before comparing images.
pub const POOL: usize = 2;

/// A sample position inside one observed update.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SlotId {
    /// Index of the record in the caller's record list.
    pub record: usize,
    pub slot: usize,
}

/// A pre-reconstructed slot.
#[derive(Clone, Debug, PartialEq)]
pub struct Slot {
    pub id: SlotId,
    /// Pixel-space image `[1, C, H, W]`, clamped to `[0, 1]`.
    pub image: Tensor,
    pub label: usize,
    /// Inferred labels of the whole record.
    pub record_labels: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchPair {
    pub a: SlotId,
    pub b: SlotId,
    pub score: f64,
    /// Formed after the label filter left these slots without a partner.
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct MatchResult {
    pub pairs: Vec<MatchPair>,
}

/// Reconstructs every record with `budget` iterations and returns one slot
/// per reconstructed sample. Record `i` uses a seed derived from
/// `config.seed` and `i`.
pub fn pre_reconstruct(
    spec: &ModelSpec,
    records: &[&UpdateRecord],
    budget: usize,
    config: &AttackConfig,
    norm: &Normalization,
    clock: &dyn Clock,
) -> Result<Vec<Vec<Slot>>> {
    let cfg = AttackConfig {
        iterations: budget,
        ..config.clone()
    };
    records
        .iter()
        .enumerate()
        .map(|(i, record)| {
            let cfg = AttackConfig {
                seed: derive_seed(config.seed, i as u64),
                ..cfg.clone()
            };
            let result = attack::reconstruct(spec, record, &cfg, &LabelSource::Infer, norm, clock)?;
            Ok(slots_from(i, &result))
        })
        .collect()
}

/// Splits a reconstruction into clamped per-slot images.
pub fn slots_from(record: usize, result: &ReconstructionResult) -> Vec<Slot> {
    let images = result.images.map(|v| v.clamp(0.0, 1.0));
    (0..result.labels.len())
        .map(|slot| Slot {
            id: SlotId { record, slot },
            image: images.sample(slot),
            label: result.labels[slot],
            record_labels: result.labels.clone(),
        })
        .collect()
}

fn as_nchw(t: &Tensor) -> Result<Tensor> {
    match t.shape().len() {
        4 => Ok(t.clone()),
        3 => {
            let mut s = alloc::vec![1];
            s.extend_from_slice(t.shape());
            t.clone().reshape(&s)
        }
        _ => Err(Error::arg("pooled_similarity", "expected CHW or NCHW images")),
    }
}

/// MSE between 2x2 average-pooled copies of two images; lower is closer.
pub fn pooled_similarity(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("pooled_similarity", a.shape(), b.shape()));
    }
    let (a, b) = (as_nchw(a)?, as_nchw(b)?);
    if a.shape()[2] < POOL || a.shape()[3] < POOL {
        return Err(Error::arg("pooled_similarity", "image smaller than the pooling window"));
    }
    let pa = kernels::avgpool2d(&a, POOL, POOL);
    let pb = kernels::avgpool2d(&b, POOL, POOL);
    Ok(mse(pa.data(), pb.data()))
}

/// Greedy perfect matching on an `n x n` score matrix (row-major, lower is
/// better). Admissible pairs are taken first in ascending `(score, a, b)`
/// order; slots left over are then paired the same way ignoring
/// admissibility and flagged. Returns `(a, b, score, fallback)`.
pub fn greedy_pairs(
    scores: &[f64],
    n: usize,
    admissible: impl Fn(usize, usize) -> bool,
) -> Vec<(usize, usize, f64, bool)> {
    let mut cells: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).collect();
    cells.sort_by(|&(i1, j1), &(i2, j2)| {
        scores[i1 * n + j1]
            .total_cmp(&scores[i2 * n + j2])
            .then(i1.cmp(&i2))
            .then(j1.cmp(&j2))
    });
    let mut used_a = alloc::vec![false; n];
    let mut used_b = alloc::vec![false; n];
    let mut out = Vec::with_capacity(n);
    for fallback in [false, true] {
        for &(i, j) in &cells {
            if used_a[i] || used_b[j] || (!fallback && !admissible(i, j)) {
                continue;
            }
            used_a[i] = true;
            used_b[j] = true;
            out.push((i, j, scores[i * n + j], fallback));
        }
    }
    out
}

/// Pairs every slot of one epoch with one slot of the other.
pub fn greedy_match(slots_a: &[Slot], slots_b: &[Slot], label_filter: bool) -> Result<MatchResult> {
    let n = slots_a.len();
    if slots_b.len() != n {
        return Err(Error::arg(
            "greedy_match",
            alloc::format!("{n} slots against {}", slots_b.len()),
        ));
    }
    let mut scores = Vec::with_capacity(n * n);
    for a in slots_a {
        for b in slots_b {
            scores.push(pooled_similarity(&a.image, &b.image)?);
        }
    }
    let share = |i: usize, j: usize| {
        !label_filter
            || slots_a[i]
                .record_labels
                .iter()
                .any(|l| slots_b[j].record_labels.contains(l))
    };
    let pairs = greedy_pairs(&scores, n, share)
        .into_iter()
        .map(|(i, j, score, fallback)| MatchPair {
            a: slots_a[i].id,
            b: slots_b[j].id,
            score,
            fallback,
        })
        .collect();
    Ok(MatchResult { pairs })
}

/// Epoch weights: 1 for the first update, 0.1 for every later one.
pub fn gamma_schedule(n: usize) -> Vec<f64> {
    (0..n).map(|k| if k == 0 { 1.0 } else { 0.1 }).collect()
}

/// One record taking part in a joint reconstruction.
#[derive(Clone, Debug)]
pub struct JointRecord<'a> {
    pub record: &'a UpdateRecord,
    /// Per slot: `Some(k)` binds the slot to shared sample `k`; `None` gives
    /// the slot its own dummy.
    pub bindings: Vec<Option<usize>>,
    pub gamma: f64,
}

/// Reconstructs `n_shared` samples that appear in several records.
///
/// Dummy rows `0..n_shared` are the shared samples; the remaining rows are
/// the records' unbound slots in record order. The result's `labels` follow
/// the same row order, a shared row taking the label of its first binding.
pub fn joint_reconstruct(
    spec: &ModelSpec,
    records: &[JointRecord<'_>],
    n_shared: usize,
    config: &AttackConfig,
    norm: &Normalization,
    clock: &dyn Clock,
) -> Result<ReconstructionResult> {
    if records.is_empty() {
        return Err(Error::SlotBinding("no records".into()));
    }
    let mut shared_labels: Vec<Option<usize>> = alloc::vec![None; n_shared];
    let mut own_labels = Vec::new();
    let mut terms = Vec::with_capacity(records.len());
    let mut next_row = n_shared;
    for (k, jr) in records.iter().enumerate() {
        let slots = jr.record.samples();
        if jr.bindings.len() != slots {
            return Err(Error::SlotBinding(alloc::format!(
                "record {k} has {slots} slots but {} bindings",
                jr.bindings.len()
            )));
        }
        let labels = resolve_labels(spec, jr.record, config, &LabelSource::Infer)?;
        let mut rows = Vec::with_capacity(slots);
        for (slot, binding) in jr.bindings.iter().enumerate() {
            match *binding {
                Some(s) => {
                    if s >= n_shared {
                        return Err(Error::SlotBinding(alloc::format!(
                            "record {k} slot {slot} bound to sample {s} of {n_shared}"
                        )));
                    }
                    if rows.contains(&s) {
                        return Err(Error::SlotBinding(alloc::format!(
                            "sample {s} bound twice in record {k}"
                        )));
                    }
                    shared_labels[s].get_or_insert(labels[slot]);
                    rows.push(s);
                }
                None => {
                    rows.push(next_row);
                    own_labels.push(labels[slot]);
                    next_row += 1;
                }
            }
        }
        let mut term = record_term(spec, jr.record, config, &labels, jr.gamma)?;
        term.rows = rows;
        terms.push(term);
    }
    let mut labels = Vec::with_capacity(next_row);
    for (s, l) in shared_labels.iter().enumerate() {
        labels.push(l.ok_or_else(|| Error::SlotBinding(alloc::format!("sample {s} is never bound")))?);
    }
    labels.extend(own_labels);
    let problem = Problem {
        spec,
        terms,
        tv_weight: effective_tv_weight(config),
    };
    let init = init_dummy(spec, next_row, config.seed);
    solve(&problem, init, labels, config, norm, clock)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot(record: usize, value: f64, labels: &[usize]) -> Slot {
        Slot {
            id: SlotId { record, slot: 0 },
            image: Tensor::from_fn(&[1, 1, 4, 4], |i| value + 0.01 * i as f64),
            label: labels[0],
            record_labels: labels.to_vec(),
        }
    }

    #[test]
    fn greedy_trace() {
        let scores = [0.1, 0.2, 0.15, 0.12];
        let pairs = greedy_pairs(&scores, 2, |_, _| true);
        assert_eq!(pairs, alloc::vec![(0, 0, 0.1, false), (1, 1, 0.12, false)]);
    }

    #[test]
    fn recovers_permutation() {
        let a = [slot(0, 0.1, &[0]), slot(1, 0.5, &[1]), slot(2, 0.8, &[2])];
        let b = [slot(3, 0.8, &[2]), slot(4, 0.1, &[0]), slot(5, 0.5, &[1])];
        let m = greedy_match(&a, &b, true).unwrap();
        let got: Vec<(usize, usize)> = m.pairs.iter().map(|p| (p.a.record, p.b.record)).collect();
        assert!(got.contains(&(0, 4)) && got.contains(&(1, 5)) && got.contains(&(2, 3)));
        assert!(m.pairs.iter().all(|p| p.score == 0.0 && !p.fallback));
    }

    #[test]
    fn label_filter_and_fallback() {
        let a = [slot(0, 0.1, &[0]), slot(1, 0.5, &[5])];
        let b = [slot(2, 0.5, &[0]), slot(3, 0.1, &[1])];
        let m = greedy_match(&a, &b, true).unwrap();
        let first = m.pairs.iter().find(|p| p.a.record == 0).unwrap();
        assert_eq!(first.b.record, 2);
        assert!(!first.fallback);
        let second = m.pairs.iter().find(|p| p.a.record == 1).unwrap();
        assert_eq!(second.b.record, 3);
        assert!(second.fallback);
        let unfiltered = greedy_match(&a, &b, false).unwrap();
        assert!(unfiltered.pairs.iter().any(|p| p.a.record == 0 && p.b.record == 3));
    }

    #[test]
    fn pooled_similarity_basics() {
        let x = Tensor::from_fn(&[1, 2, 4, 4], |i| libm::sin(i as f64 * 0.37));
        let y = Tensor::from_fn(&[1, 2, 4, 4], |i| libm::cos(i as f64 * 0.11));
        assert_eq!(pooled_similarity(&x, &x).unwrap(), 0.0);
        assert_eq!(pooled_similarity(&x, &y).unwrap(), pooled_similarity(&y, &x).unwrap());
        assert!(pooled_similarity(&x, &y.clone().reshape(&[2, 1, 4, 4]).unwrap()).is_err());
    }

    #[test]
    fn gammas() {
        assert_eq!(gamma_schedule(3), alloc::vec![1.0, 0.1, 0.1]);
    }
}
