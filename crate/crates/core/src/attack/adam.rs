//! Adam with best-iterate tracking.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::{Error, Result, Tensor};

/// Bias-corrected Adam with constant learning rate.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, len: usize) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn step(&mut self, x: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        for (((xi, &gi), mi), vi) in x.iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
            *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
            let mh = *mi / c1;
            let vh = *vi / c2;
            *xi -= self.lr * mh / (libm::sqrt(vh) + self.eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub iteration: usize,
    pub objective: f64,
    /// Best objective seen up to and including this iteration.
    pub best: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Optimized {
    pub best: Tensor,
    pub best_objective: f64,
    pub best_iteration: usize,
    pub last: Tensor,
    pub last_objective: f64,
    pub trace: Vec<TracePoint>,
    pub seconds_per_iteration: f64,
}

/// Minimizes `f` from `init` with Adam for `iterations` steps.
///
/// `f` returns the objective and its gradient. The iterate after the last
/// step is evaluated too, so `iterations + 1` points compete for best; with
/// zero iterations the result is the initialization. A non-finite objective
/// or gradient aborts with [`Error::Diverged`].
pub fn optimize(
    init: Tensor,
    iterations: usize,
    lr: f64,
    trace_every: usize,
    clock: &dyn Clock,
    mut f: impl FnMut(&Tensor) -> Result<(f64, Tensor)>,
) -> Result<Optimized> {
    let mut x = init;
    let mut adam = Adam::new(lr, x.len());
    let mut best = x.clone();
    let mut best_objective = f64::INFINITY;
    let mut best_iteration = 0;
    let mut trace = Vec::new();
    let trace_every = trace_every.max(1);
    let start = clock.now();
    let mut record = |iteration: usize, value: f64, x: &Tensor, trace: &mut Vec<TracePoint>, force: bool| {
        if value < best_objective {
            best_objective = value;
            best = x.clone();
            best_iteration = iteration;
        }
        if force || iteration % trace_every == 0 {
            trace.push(TracePoint {
                iteration,
                objective: value,
                best: best_objective,
            });
        }
    };
    for iteration in 0..iterations {
        let (value, grad) = checked(&mut f, &x, iteration)?;
        record(iteration, value, &x, &mut trace, false);
        adam.step(x.data_mut(), grad.data());
    }
    let elapsed = clock.now() - start;
    let (last_objective, _) = checked(&mut f, &x, iterations)?;
    record(iterations, last_objective, &x, &mut trace, iterations == 0);
    Ok(Optimized {
        best,
        best_objective,
        best_iteration,
        last: x,
        last_objective,
        trace,
        seconds_per_iteration: if iterations == 0 {
            0.0
        } else {
            elapsed / iterations as f64
        },
    })
}

fn checked(
    f: &mut impl FnMut(&Tensor) -> Result<(f64, Tensor)>,
    x: &Tensor,
    iteration: usize,
) -> Result<(f64, Tensor)> {
    let (value, grad) = f(x)?;
    if !value.is_finite() || !grad.all_finite() {
        return Err(Error::Diverged { iteration });
    }
    Ok((value, grad))
}
