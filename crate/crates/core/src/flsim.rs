//! Single-client federated learning simulation.
//!
//! [`run_training`] produces an [`ObservationLog`]: the messages an
//! honest-but-curious server sees, plus the hidden sample indices behind each
//! message. The two halves are separate values so attack code can be handed
//! the records alone.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::nn::{self, ModelSpec, ModelState};
use crate::rng::{derive_seed, seeded};
use crate::{Error, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UpdateKind {
    /// One SGD step; the payload is the batch gradient.
    Gradient,
    /// `T` local SGD steps; the payload is the accumulated weight change.
    ModelDelta,
}

/// One client-to-server message.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UpdateRecord {
    pub kind: UpdateKind,
    pub payload: Vec<Tensor>,
    /// Global model at the start of the round.
    pub base: ModelState,
    pub round: usize,
    pub epoch: usize,
    pub local_steps: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl UpdateRecord {
    /// Number of samples that produced the update.
    pub fn samples(&self) -> usize {
        self.batch_size * self.local_steps
    }
}

/// Sample indices used by each local step of one record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub batches: Vec<Vec<usize>>,
}

impl GroundTruth {
    /// All indices in step order, matching the slot order of the record.
    pub fn flat(&self) -> Vec<usize> {
        self.batches.iter().flatten().copied().collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObservationLog {
    pub records: Vec<UpdateRecord>,
    pub truth: Vec<GroundTruth>,
    /// Whether trailing samples that did not fill a round were dropped.
    pub truncated: bool,
    pub final_model: ModelState,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shuffle {
    Identity,
    Seeded(u64),
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule {
    /// `rounds[r][t]` holds the sample indices of local step `t` of round `r`.
    pub rounds: Vec<Vec<Vec<usize>>>,
    pub truncated: bool,
}

/// Permutes `0..n`, cuts it into batches of `b` and groups `t` batches per
/// round. Samples that do not fill a complete round are dropped.
pub fn schedule_batches(n: usize, b: usize, t: usize, shuffle: Shuffle) -> Result<Schedule> {
    if b == 0 || t == 0 {
        return Err(Error::arg("schedule_batches", "batch size and local steps must be positive"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    if let Shuffle::Seeded(seed) = shuffle {
        order.shuffle(&mut seeded(seed));
    }
    let per_round = b * t;
    let rounds = order
        .chunks_exact(per_round)
        .map(|round| round.chunks(b).map(<[usize]>::to_vec).collect())
        .collect();
    Ok(Schedule {
        rounds,
        truncated: n % per_round != 0,
    })
}

/// Runs one round on `batches` starting from `state`.
///
/// For [`UpdateKind::ModelDelta`] the client accumulates
/// `delta = sum_t (-(lr * g_t))`, evaluates step `t` at `state + delta`, and the
/// returned model is `state + delta`, so base plus payload reproduces it exactly.
pub fn run_round(
    spec: &ModelSpec,
    state: &ModelState,
    data: &Dataset,
    batches: &[Vec<usize>],
    lr: f64,
    kind: UpdateKind,
) -> Result<(ModelState, UpdateRecord)> {
    let (first, rest) = batches
        .split_first()
        .ok_or_else(|| Error::arg("run_round", "no batches"))?;
    if rest.iter().any(|b| b.len() != first.len()) || first.is_empty() {
        return Err(Error::arg("run_round", "batches must be non-empty and equally sized"));
    }
    let grads_at = |s: &ModelState, idx: &[usize]| {
        let x = data.images.select(idx);
        let y: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        nn::gradients(spec, s, &x, &y)
    };
    let record = |payload, steps| UpdateRecord {
        kind,
        payload,
        base: state.clone(),
        round: 0,
        epoch: 0,
        local_steps: steps,
        batch_size: first.len(),
        lr,
    };
    match kind {
        UpdateKind::Gradient => {
            if !rest.is_empty() {
                return Err(Error::arg("run_round", "gradient updates take exactly one batch"));
            }
            let g = grads_at(state, first)?;
            let next = nn::apply_sgd_step(state, &g, lr)?;
            Ok((next, record(g, 1)))
        }
        UpdateKind::ModelDelta => {
            // -0.0 is the additive identity, so a one-step delta keeps the sign of
            // zero gradient entries.
            let mut delta: Vec<Tensor> = state.params.iter().map(|p| Tensor::full(p.value.shape(), -0.0)).collect();
            let mut local = state.clone();
            for idx in batches {
                let g = grads_at(&local, idx)?;
                for (d, gt) in delta.iter_mut().zip(&g) {
                    *d = d.zip_map(gt, |dv, gv| dv + -(lr * gv))?;
                }
                local = nn::apply_delta(state, &delta)?;
            }
            Ok((local, record(delta, batches.len())))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub local_steps: usize,
    pub lr: f64,
    /// `None` keeps the natural sample order in every epoch.
    pub shuffle_seed: Option<u64>,
    pub kind: UpdateKind,
    /// Keep the global model fixed across rounds.
    pub freeze: bool,
}

/// Trains for `config.epochs` epochs, reshuffling every epoch.
pub fn run_training(
    spec: &ModelSpec,
    model: &ModelState,
    data: &Dataset,
    config: &TrainingConfig,
) -> Result<ObservationLog> {
    if config.kind == UpdateKind::Gradient && config.local_steps != 1 {
        return Err(Error::arg("run_training", "gradient updates require one local step"));
    }
    let mut state = model.clone();
    let mut records = Vec::new();
    let mut truth = Vec::new();
    let mut truncated = false;
    for epoch in 0..config.epochs {
        let shuffle = match config.shuffle_seed {
            Some(seed) => Shuffle::Seeded(derive_seed(seed, epoch as u64)),
            None => Shuffle::Identity,
        };
        let schedule = schedule_batches(data.len(), config.batch_size, config.local_steps, shuffle)?;
        truncated |= schedule.truncated;
        for batches in schedule.rounds {
            let (next, mut record) = run_round(spec, &state, data, &batches, config.lr, config.kind)?;
            record.round = records.len();
            record.epoch = epoch;
            records.push(record);
            truth.push(GroundTruth { batches });
            if !config.freeze {
                state = next;
            }
        }
    }
    Ok(ObservationLog {
        records,
        truth,
        truncated,
        final_model: state,
    })
}
