//! Image quality and attack quality measures.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::multiepoch::{MatchResult, SlotId};
use crate::{Error, Result, Tensor};

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

pub fn mse(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64
}

/// `10 log10(1 / MSE)` for images with peak value 1, capped at 100 dB.
pub fn psnr(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.shape() != y.shape() {
        return Err(Error::shape("psnr", x.shape(), y.shape()));
    }
    let m = mse(x.data(), y.data());
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * libm::log10(1.0 / m)).min(PSNR_CAP))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ssim {
    pub value: f64,
    /// The image was smaller than the window, so one global window was used.
    pub global_window: bool,
}

fn gaussian_window() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            libm::exp(-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA))
        })
        .collect();
    let s: f64 = g.iter().sum();
    let mut w = vec![0.0; SSIM_WINDOW * SSIM_WINDOW];
    for i in 0..SSIM_WINDOW {
        for j in 0..SSIM_WINDOW {
            w[i * SSIM_WINDOW + j] = g[i] * g[j] / (s * s);
        }
    }
    w
}

fn ssim_stat(mx: f64, my: f64, vx: f64, vy: f64, cxy: f64) -> f64 {
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// Mean SSIM over all valid 11x11 Gaussian windows (sigma 1.5, K1 0.01,
/// K2 0.03, dynamic range 1), computed per channel and averaged.
///
/// Accepts `[C, H, W]` or `[1, C, H, W]`. Planes smaller than the window are
/// scored with one global window.
pub fn ssim(x: &Tensor, y: &Tensor) -> Result<Ssim> {
    if x.shape() != y.shape() {
        return Err(Error::shape("ssim", x.shape(), y.shape()));
    }
    let s = x.shape();
    if s.len() < 2 {
        return Err(Error::arg("ssim", "need at least two dimensions"));
    }
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let plane = h * w;
    let global = h < SSIM_WINDOW || w < SSIM_WINDOW;
    let window = gaussian_window();
    let mut total = 0.0;
    let mut count = 0usize;
    for (px, py) in x.data().chunks(plane).zip(y.data().chunks(plane)) {
        if global {
            let n = plane as f64;
            let mx = px.iter().sum::<f64>() / n;
            let my = py.iter().sum::<f64>() / n;
            let vx = px.iter().map(|v| v * v).sum::<f64>() / n - mx * mx;
            let vy = py.iter().map(|v| v * v).sum::<f64>() / n - my * my;
            let cxy = px.iter().zip(py).map(|(a, b)| a * b).sum::<f64>() / n - mx * my;
            total += ssim_stat(mx, my, vx, vy, cxy);
            count += 1;
            continue;
        }
        let mut acc = 0.0;
        let positions = (h - SSIM_WINDOW + 1) * (w - SSIM_WINDOW + 1);
        for oy in 0..=h - SSIM_WINDOW {
            for ox in 0..=w - SSIM_WINDOW {
                let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wt = window[dy * SSIM_WINDOW + dx];
                        let i = (oy + dy) * w + ox + dx;
                        let (a, b) = (px[i], py[i]);
                        mx += wt * a;
                        my += wt * b;
                        xx += wt * a * a;
                        yy += wt * b * b;
                        xy += wt * a * b;
                    }
                }
                acc += ssim_stat(mx, my, xx - mx * mx, yy - my * my, xy - mx * my);
            }
        }
        total += acc / positions as f64;
        count += 1;
    }
    Ok(Ssim {
        value: total / count as f64,
        global_window: global,
    })
}

/// Per-sample scores under the slot-to-truth assignment that maximizes total
/// PSNR.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// `assignment[slot]` is the ground-truth index matched to that slot.
    pub assignment: Vec<usize>,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
    pub mean_psnr: f64,
    pub mean_ssim: f64,
    pub ssim_global_window: bool,
}

/// Largest batch scored by exhaustive search over assignments.
pub const EXHAUSTIVE_LIMIT: usize = 6;

/// Scores reconstructions `[B, C, H, W]` against the ground truth batch.
///
/// Reconstructions are clamped to `[0, 1]` first. Means are taken in
/// ground-truth order, so they do not depend on the order of the
/// reconstructions.
pub fn evaluate_batch(reconstructions: &Tensor, truth: &Tensor) -> Result<EvalReport> {
    if reconstructions.shape() != truth.shape() || reconstructions.shape().len() != 4 {
        return Err(Error::shape("evaluate_batch", reconstructions.shape(), truth.shape()));
    }
    let b = truth.batch_len();
    let recon = reconstructions.map(|v| v.clamp(0.0, 1.0));
    let mut table = vec![0.0; b * b];
    for i in 0..b {
        for j in 0..b {
            table[i * b + j] = psnr(&recon.sample(i), &truth.sample(j))?;
        }
    }
    let assignment = if b <= EXHAUSTIVE_LIMIT {
        best_assignment(&table, b)
    } else {
        greedy_assignment(&table, b)
    };
    let mut psnrs = Vec::with_capacity(b);
    let mut ssims = Vec::with_capacity(b);
    let mut global = false;
    for (slot, &t) in assignment.iter().enumerate() {
        psnrs.push(table[slot * b + t]);
        let s = ssim(&recon.sample(slot), &truth.sample(t))?;
        global |= s.global_window;
        ssims.push(s.value);
    }
    let mut by_truth = vec![0usize; b];
    for (slot, &t) in assignment.iter().enumerate() {
        by_truth[t] = slot;
    }
    let mean_psnr = by_truth.iter().map(|&s| psnrs[s]).sum::<f64>() / b as f64;
    let mean_ssim = by_truth.iter().map(|&s| ssims[s]).sum::<f64>() / b as f64;
    Ok(EvalReport {
        assignment,
        psnr: psnrs,
        ssim: ssims,
        mean_psnr,
        mean_ssim,
        ssim_global_window: global,
    })
}

/// Assignment maximizing `sum_i table[i][perm[i]]`, searched exhaustively.
/// Ties keep the lexicographically first permutation.
pub fn best_assignment(table: &[f64], b: usize) -> Vec<usize> {
    fn search(
        table: &[f64],
        b: usize,
        slot: usize,
        used: &mut [bool],
        cur: &mut Vec<usize>,
        total: f64,
        best: &mut (f64, Vec<usize>),
    ) {
        if slot == b {
            if total > best.0 {
                *best = (total, cur.clone());
            }
            return;
        }
        for t in 0..b {
            if !used[t] {
                used[t] = true;
                cur.push(t);
                search(table, b, slot + 1, used, cur, total + table[slot * b + t], best);
                cur.pop();
                used[t] = false;
            }
        }
    }
    let mut best = (f64::NEG_INFINITY, (0..b).collect());
    search(table, b, 0, &mut vec![false; b], &mut Vec::with_capacity(b), 0.0, &mut best);
    best.1
}

/// Repeatedly takes the highest remaining entry, ties by (slot, truth).
pub fn greedy_assignment(table: &[f64], b: usize) -> Vec<usize> {
    let mut cells: Vec<(usize, usize)> = (0..b).flat_map(|i| (0..b).map(move |j| (i, j))).collect();
    cells.sort_by(|&(i1, j1), &(i2, j2)| {
        table[i2 * b + j2]
            .total_cmp(&table[i1 * b + j1])
            .then(i1.cmp(&i2))
            .then(j1.cmp(&j2))
    });
    let mut out = vec![usize::MAX; b];
    let mut taken = vec![false; b];
    for (i, j) in cells {
        if out[i] == usize::MAX && !taken[j] {
            out[i] = j;
            taken[j] = true;
        }
    }
    out
}

/// Fraction of matched pairs whose two slots hold the same true sample.
/// `truth` maps a slot to its hidden sample index.
pub fn matching_success_rate(result: &MatchResult, truth: impl Fn(SlotId) -> usize) -> f64 {
    if result.pairs.is_empty() {
        return 0.0;
    }
    let hits = result
        .pairs
        .iter()
        .filter(|p| truth(p.a) == truth(p.b))
        .count();
    hits as f64 / result.pairs.len() as f64
}
