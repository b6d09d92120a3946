//! Pipeline stages: simulate, attack, match, joint reconstruction, evaluate.
//!
//! Every stage is a plain function of the previous stages' outputs, so the
//! CLI can run them one at a time through files or all at once through
//! [`run_experiment`].

use std::fs;
use std::path::{Path, PathBuf};

use gradinv_core::attack::{self, AttackConfig, FedAvgMode, LabelSource, TracePoint};
use gradinv_core::clock::Clock;
use gradinv_core::flsim::{run_training, ObservationLog, UpdateKind, UpdateRecord};
use gradinv_core::metrics::{evaluate_batch, matching_success_rate};
use gradinv_core::multiepoch::{
    gamma_schedule, greedy_match, joint_reconstruct, pre_reconstruct, JointRecord, MatchResult, Slot, SlotId,
};
use gradinv_core::nn::{init_model, ModelSpec};
use gradinv_core::rng::derive_seed;
use gradinv_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::config::{to_json, ExperimentConfig};
use crate::dataset::{self, LoadedData};
use crate::image::write_image_grid;
use crate::report::{write_csv, Manifest, MatchRow, ResultRow, TimingRow, TraceRow};
use crate::Error;

/// Data, model and observations of one simulated training run.
#[derive(Clone, Debug)]
pub struct Simulation {
    pub data: LoadedData,
    pub spec: ModelSpec,
    pub log: ObservationLog,
}

pub fn simulate(config: &ExperimentConfig) -> Result<Simulation, Error> {
    let data = dataset::load(&config.dataset)?;
    let spec = config.model_spec(data.raw.image_shape(), data.raw.classes)?;
    let model = init_model(&spec, config.model.seed)?;
    let log = run_training(&spec, &model, &data.normalized, &config.schedule.training())?;
    Ok(Simulation { data, spec, log })
}

/// A reconstruction of some slots, in pixel space.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub run_id: String,
    /// Slots the rows of `images` stand for; a joint run names the slot of
    /// its first record.
    pub slots: Vec<SlotId>,
    /// `[n, C, H, W]`, unclamped.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub best_objective: f64,
    pub best_iteration: usize,
    pub trace: Vec<TracePoint>,
    pub seconds_per_iteration: f64,
}

fn epoch_records(log: &ObservationLog, epoch: usize, limit: Option<usize>) -> Vec<usize> {
    let all = log.records.iter().enumerate().filter(|(_, r)| r.epoch == epoch).map(|(i, _)| i);
    match limit {
        Some(k) => all.take(k).collect(),
        None => all.collect(),
    }
}

/// Per-record attack seed, shared by single and joint runs that start from
/// the same record.
fn record_seed(config: &AttackConfig, record: usize) -> u64 {
    derive_seed(config.seed, record as u64)
}

fn single(
    spec: &ModelSpec,
    sim: &Simulation,
    record: usize,
    config: &AttackConfig,
    clock: &dyn Clock,
) -> Result<attack::ReconstructionResult, Error> {
    let cfg = AttackConfig {
        seed: record_seed(config, record),
        ..config.clone()
    };
    Ok(attack::reconstruct(
        spec,
        &sim.log.records[record],
        &cfg,
        &LabelSource::Infer,
        &sim.data.norm,
        clock,
    )?)
}

/// Attacks the first `max_records` records of every epoch on their own.
pub fn attack_records(
    config: &ExperimentConfig,
    sim: &Simulation,
    clock: &dyn Clock,
) -> Result<Vec<Reconstruction>, Error> {
    let mut out = Vec::new();
    for epoch in 0..config.schedule.epochs {
        for r in epoch_records(&sim.log, epoch, config.max_records) {
            let res = single(&sim.spec, sim, r, &config.attack, clock)?;
            let n = sim.log.records[r].samples();
            out.push(Reconstruction {
                run_id: format!("single-e{epoch}-r{r}"),
                slots: (0..n).map(|slot| SlotId { record: r, slot }).collect(),
                images: res.images,
                labels: res.labels,
                best_objective: res.best_objective,
                best_iteration: res.best_iteration,
                trace: res.trace,
                seconds_per_iteration: res.seconds_per_iteration,
            });
        }
    }
    Ok(out)
}

/// Matching between one epoch and the next.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochMatch {
    pub epoch: usize,
    pub result: MatchResult,
    /// Fraction of pairs joining the same hidden sample.
    pub success_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    /// Inferred labels of every record, in record order.
    pub labels: Vec<Vec<usize>>,
    pub epochs: Vec<EpochMatch>,
}

/// Pre-reconstructs every record, then matches each epoch with the next.
pub fn match_epochs(config: &ExperimentConfig, sim: &Simulation, clock: &dyn Clock) -> Result<Matching, Error> {
    let records: Vec<&UpdateRecord> = sim.log.records.iter().collect();
    let slots = pre_reconstruct(
        &sim.spec,
        &records,
        config.multiepoch.pre_budget,
        &config.attack,
        &sim.data.norm,
        clock,
    )?;
    let by_epoch = |e: usize| -> Vec<Slot> {
        slots
            .iter()
            .zip(&sim.log.records)
            .filter(|(_, r)| r.epoch == e)
            .flat_map(|(s, _)| s.iter().cloned())
            .collect()
    };
    let truth = |id: SlotId| sim.log.truth[id.record].flat()[id.slot];
    let mut epochs = Vec::new();
    for epoch in 0..config.schedule.epochs.saturating_sub(1) {
        let result = greedy_match(&by_epoch(epoch), &by_epoch(epoch + 1), config.multiepoch.label_filter)?;
        let success_rate = matching_success_rate(&result, truth);
        epochs.push(EpochMatch {
            epoch,
            result,
            success_rate,
        });
    }
    let labels = slots
        .iter()
        .map(|s| s.iter().map(|slot| slot.label).collect())
        .collect();
    Ok(Matching { labels, epochs })
}

pub fn match_rows(sim: &Simulation, matching: &Matching) -> Vec<MatchRow> {
    let sample = |id: SlotId| sim.log.truth[id.record].flat()[id.slot];
    let label = |id: SlotId| matching.labels[id.record][id.slot];
    let mut rows = Vec::new();
    for m in &matching.epochs {
        for p in &m.result.pairs {
            rows.push(MatchRow {
                record_a: p.a.record,
                slot_a: p.a.slot,
                record_b: p.b.record,
                slot_b: p.b.slot,
                label_a: label(p.a),
                label_b: label(p.b),
                score: p.score,
                fallback: p.fallback,
                correct: sample(p.a) == sample(p.b),
            });
        }
    }
    rows
}

/// Follows the matches from every slot of the first epoch's first
/// `max_records` records and reconstructs each chain jointly.
pub fn joint_attack(
    config: &ExperimentConfig,
    sim: &Simulation,
    matching: &Matching,
    clock: &dyn Clock,
) -> Result<Vec<Reconstruction>, Error> {
    let mut out = Vec::new();
    for r in epoch_records(&sim.log, 0, config.max_records) {
        for slot in 0..sim.log.records[r].samples() {
            let mut chain = vec![SlotId { record: r, slot }];
            for m in &matching.epochs {
                let last = *chain.last().expect("chain starts non-empty");
                match m.result.pairs.iter().find(|p| p.a == last) {
                    Some(p) => chain.push(p.b),
                    None => break,
                }
            }
            let gammas = gamma_schedule(chain.len());
            let joint: Vec<JointRecord<'_>> = chain
                .iter()
                .zip(&gammas)
                .map(|(id, &gamma)| {
                    let record = &sim.log.records[id.record];
                    let mut bindings = vec![None; record.samples()];
                    bindings[id.slot] = Some(0);
                    JointRecord {
                        record,
                        bindings,
                        gamma,
                    }
                })
                .collect();
            let cfg = AttackConfig {
                seed: record_seed(&config.attack, r),
                ..config.attack.clone()
            };
            let res = joint_reconstruct(&sim.spec, &joint, 1, &cfg, &sim.data.norm, clock)?;
            out.push(Reconstruction {
                run_id: format!("joint-e0-r{r}-s{slot}"),
                slots: vec![chain[0]],
                images: res.images.select(&[0]),
                labels: vec![res.labels[0]],
                best_objective: res.best_objective,
                best_iteration: res.best_iteration,
                trace: res.trace,
                seconds_per_iteration: res.seconds_per_iteration,
            });
        }
    }
    Ok(out)
}

/// Scores reconstructions against the hidden samples of their slots.
/// Rows of a multi-slot reconstruction are assigned to slots by best total
/// PSNR, since reconstruction order carries no meaning.
pub fn evaluate(sim: &Simulation, reconstructions: &[Reconstruction]) -> Result<Vec<ResultRow>, Error> {
    let mut rows = Vec::new();
    for rec in reconstructions {
        let truth_idx: Vec<usize> = rec
            .slots
            .iter()
            .map(|id| {
                sim.log
                    .truth
                    .get(id.record)
                    .and_then(|t| t.flat().get(id.slot).copied())
                    .ok_or_else(|| Error::Data(format!("{}: unknown slot {id:?}", rec.run_id)))
            })
            .collect::<Result<_, _>>()?;
        let truth = sim.data.raw.images.select(&truth_idx);
        let report = evaluate_batch(&rec.images, &truth)?;
        for (slot, &t) in report.assignment.iter().enumerate() {
            rows.push(ResultRow {
                run_id: rec.run_id.clone(),
                slot,
                truth_index: truth_idx[t],
                psnr_db: report.psnr[slot],
                ssim: report.ssim[slot],
            });
        }
    }
    Ok(rows)
}

/// Attacks the first record of the first epoch in one-batch and simulation
/// mode for `iterations` each.
pub fn timing_probe(
    config: &ExperimentConfig,
    sim: &Simulation,
    iterations: usize,
    clock: &dyn Clock,
) -> Result<Vec<TimingRow>, Error> {
    let record = &sim.log.records[0];
    if record.kind != UpdateKind::ModelDelta {
        return Err(Error::Config("timing-probe needs model-delta updates".into()));
    }
    let mut rows = Vec::new();
    for mode in [FedAvgMode::OneBatch, FedAvgMode::Simulation] {
        let cfg = AttackConfig {
            iterations,
            fedavg_mode: mode,
            ..config.attack.clone()
        };
        let res = attack::reconstruct(&sim.spec, record, &cfg, &LabelSource::Infer, &sim.data.norm, clock)?;
        rows.push(TimingRow {
            run_id: "probe-e0-r0".into(),
            mode: match mode {
                FedAvgMode::OneBatch => "one-batch",
                FedAvgMode::Simulation => "simulation",
                FedAvgMode::None => "none",
            }
            .into(),
            local_steps: record.local_steps,
            iterations,
            seconds_per_iteration: res.seconds_per_iteration,
        });
    }
    Ok(rows)
}

pub fn trace_rows(reconstructions: &[Reconstruction]) -> Vec<TraceRow> {
    reconstructions
        .iter()
        .flat_map(|r| {
            r.trace.iter().map(|t| TraceRow {
                run_id: r.run_id.clone(),
                iteration: t.iteration,
                objective: t.objective,
                best: t.best,
            })
        })
        .collect()
}

fn timing_rows(reconstructions: &[Reconstruction], config: &ExperimentConfig) -> Vec<TimingRow> {
    reconstructions
        .iter()
        .map(|r| TimingRow {
            run_id: r.run_id.clone(),
            mode: "attack".into(),
            local_steps: config.schedule.local_steps,
            iterations: config.attack.iterations,
            seconds_per_iteration: r.seconds_per_iteration,
        })
        .collect()
}

/// Writes one grid per run-id prefix: reconstructions on top, the matched
/// ground truth below, in result-row order.
fn write_grids(dir: &Path, sim: &Simulation, reconstructions: &[Reconstruction], rows: &[ResultRow]) -> Result<(), Error> {
    let mut groups: Vec<(String, Vec<Tensor>, Vec<usize>)> = Vec::new();
    let mut row_iter = rows.iter();
    for rec in reconstructions {
        let prefix = rec.run_id.split("-r").next().unwrap_or(&rec.run_id).to_string();
        if groups.last().is_none_or(|g| g.0 != prefix) {
            groups.push((prefix.clone(), Vec::new(), Vec::new()));
        }
        let group = groups.last_mut().expect("pushed above");
        for slot in 0..rec.images.batch_len() {
            let row = row_iter.next().ok_or_else(|| Error::Data("fewer result rows than slots".into()))?;
            group.1.push(rec.images.select(&[slot]));
            group.2.push(row.truth_index);
        }
    }
    for (prefix, recon, truth) in groups {
        let top = Tensor::concat(&recon)?;
        let bottom = sim.data.raw.images.select(&truth);
        let c = top.shape()[1];
        if c == 1 || c == 3 {
            write_image_grid(&[top, bottom], &dir.join(format!("grid-{prefix}.ppm")))?;
        }
    }
    Ok(())
}

/// What an end-to-end run produced.
#[derive(Clone, Debug)]
pub struct Summary {
    pub dir: PathBuf,
    pub results: Vec<ResultRow>,
    pub matching: Option<Matching>,
    pub timing: Vec<TimingRow>,
}

#[derive(Serialize)]
struct SummaryFile<'a> {
    #[serde(rename = "mean-psnr-db")]
    mean_psnr: Vec<(String, f64)>,
    #[serde(rename = "matching-success-rate")]
    matching: Vec<f64>,
    normalization: &'a gradinv_core::data::Normalization,
    truncated: bool,
}

/// Mean PSNR per run-id prefix (`single-e0`, `joint-e0`, ...), in order of
/// first appearance.
pub fn mean_psnr_by_method(rows: &[ResultRow]) -> Vec<(String, f64)> {
    let mut acc: Vec<(String, f64, usize)> = Vec::new();
    for row in rows {
        let prefix = row.run_id.split("-r").next().unwrap_or(&row.run_id);
        match acc.iter_mut().find(|a| a.0 == prefix) {
            Some(a) => {
                a.1 += row.psnr_db;
                a.2 += 1;
            }
            None => acc.push((prefix.to_string(), row.psnr_db, 1)),
        }
    }
    acc.into_iter().map(|(k, s, n)| (k, s / n as f64)).collect()
}

/// Runs every enabled stage and writes the artifacts into `config.output`.
/// A failing stage is recorded in `MANIFEST` and aborts the run; files
/// written by earlier stages stay in place.
pub fn run_experiment(config: &ExperimentConfig, clock: &dyn Clock) -> Result<Summary, Error> {
    let dir = config.output.clone();
    let manifest = Manifest::create(&dir)?;
    manifest.stage("config", || {
        config.validate()?;
        fs::write(dir.join("config.json"), to_json(config))?;
        Ok(())
    })?;
    let sim = manifest.stage("simulate", || simulate(config))?;
    let mut reconstructions = manifest.stage("attack", || attack_records(config, &sim, clock))?;
    let mut matching = None;
    if config.multiepoch.enabled {
        let m = manifest.stage("match", || {
            let m = match_epochs(config, &sim, clock)?;
            write_csv(&dir.join("matches.csv"), &match_rows(&sim, &m))?;
            Ok(m)
        })?;
        reconstructions.extend(manifest.stage("joint", || joint_attack(config, &sim, &m, clock))?);
        matching = Some(m);
    }
    let mut timing = timing_rows(&reconstructions, config);
    if let Some(iterations) = config.timing_probe {
        timing.extend(manifest.stage("timing", || timing_probe(config, &sim, iterations, clock))?);
    }
    let results = manifest.stage("evaluate", || {
        let rows = evaluate(&sim, &reconstructions)?;
        write_csv(&dir.join("results.csv"), &rows)?;
        write_csv(&dir.join("traces.csv"), &trace_rows(&reconstructions))?;
        write_csv(&dir.join("timing.csv"), &timing)?;
        write_grids(&dir, &sim, &reconstructions, &rows)?;
        let summary = SummaryFile {
            mean_psnr: mean_psnr_by_method(&rows),
            matching: matching
                .iter()
                .flat_map(|m| m.epochs.iter().map(|e| e.success_rate))
                .collect(),
            normalization: &sim.data.norm,
            truncated: sim.log.truncated,
        };
        fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
        Ok(rows)
    })?;
    manifest.log("done")?;
    Ok(Summary {
        dir,
        results,
        matching,
        timing,
    })
}
