//! Quick numerical self-checks run by `gradinv selftest`.

use gradinv_core::attack::{self, AttackConfig, LabelSource, Problem};
use gradinv_core::data::synthetic;
use gradinv_core::metrics::{psnr, ssim};
use gradinv_core::nn::{self, init_model, Layer, ModelSpec};
use gradinv_core::rng::{normal_tensor, seeded, uniform_tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn small_net(classes: usize) -> ModelSpec {
    ModelSpec {
        input: [2, 6, 6],
        classes,
        layers: vec![
            Layer::Conv {
                out_channels: 3,
                kernel: 3,
                stride: 1,
                padding: 1,
                relu: true,
                skip_from: None,
            },
            Layer::Conv {
                out_channels: 4,
                kernel: 3,
                stride: 2,
                padding: 1,
                relu: true,
                skip_from: None,
            },
            Layer::Fc { out_features: classes },
        ],
    }
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

/// Largest relative error of weight gradients against central differences.
pub fn first_order_error(seed: u64) -> Result<f64, gradinv_core::Error> {
    let spec = small_net(5);
    let state = init_model(&spec, seed)?;
    let x = normal_tensor(&mut seeded(seed ^ 0x5eed), &[2, 2, 6, 6]);
    let y = [seed as usize % 5, (seed as usize + 2) % 5];
    let grads = gradinv_core::tensor::flatten(&nn::gradients(&spec, &state, &x, &y)?);
    let flat = state.flatten();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in (0..flat.len()).step_by(7) {
        let mut p = flat.clone();
        p[i] += h;
        let up = nn::loss(&spec, &state.with_flat(&p)?, &x, &y)?;
        p[i] -= 2.0 * h;
        let down = nn::loss(&spec, &state.with_flat(&p)?, &x, &y)?;
        worst = worst.max(rel(grads[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

/// Largest relative error of the attack-objective gradient with respect to
/// the dummy input against central differences.
pub fn double_backward_error(seed: u64) -> Result<f64, gradinv_core::Error> {
    let spec = small_net(5);
    let state = init_model(&spec, seed)?;
    let mut rng = seeded(seed ^ 0xd0b1e);
    let x = normal_tensor(&mut rng, &[1, 2, 6, 6]);
    let labels = vec![seed as usize % 5];
    let target = nn::gradients(&spec, &state, &x, &labels)?;
    let config = AttackConfig {
        beta: 4.0,
        ..AttackConfig::default()
    };
    let distance = attack::distance_for(&spec, &config, &target)?;
    let problem = Problem {
        spec: &spec,
        terms: vec![attack::Term {
            base: state,
            target,
            labels: labels.clone(),
            rows: vec![0],
            steps: 1,
            lr: config.local_lr,
            distance,
            gamma: 1.0,
        }],
        tv_weight: 1e-3,
    };
    let dummy = normal_tensor(&mut rng, &[1, 2, 6, 6]);
    let (_, grad) = problem.evaluate(&dummy)?;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for i in 0..dummy.len() {
        let mut p = dummy.clone();
        p.data_mut()[i] += h;
        let up = problem.value(&p)?;
        p.data_mut()[i] -= 2.0 * h;
        let down = problem.value(&p)?;
        worst = worst.max(rel(grad.data()[i], (up - down) / (2.0 * h)));
    }
    Ok(worst)
}

pub fn run() -> Vec<Check> {
    let mut checks = Vec::new();
    let mut push = |name, passed, detail: String| checks.push(Check { name, passed, detail });

    match (0..3).map(first_order_error).collect::<Result<Vec<_>, _>>() {
        Ok(e) => {
            let m = e.iter().cloned().fold(0.0, f64::max);
            push("first-order gradients", m < 1e-4, format!("max rel err {m:.2e}"));
        }
        Err(e) => push("first-order gradients", false, e.to_string()),
    }
    match (0..3).map(double_backward_error).collect::<Result<Vec<_>, _>>() {
        Ok(e) => {
            let m = e.iter().cloned().fold(0.0, f64::max);
            push("double backward", m < 1e-3, format!("max rel err {m:.2e}"));
        }
        Err(e) => push("double backward", false, e.to_string()),
    }

    let mut rng = seeded(7);
    let x = uniform_tensor(&mut rng, &[3, 12, 12], 0.0, 1.0);
    let y = uniform_tensor(&mut rng, &[3, 12, 12], 0.0, 1.0);
    let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
    let p = psnr(&x, &y).unwrap_or(f64::NAN);
    let direct = -10.0 * mse.log10();
    push("psnr formula", (p - direct).abs() < 1e-9, format!("{p} vs {direct}"));
    let s = ssim(&x, &x).map(|s| s.value).unwrap_or(f64::NAN);
    push("ssim identity", (s - 1.0).abs() < 1e-12, format!("{s}"));

    let spec = ModelSpec::tiny_cnn(3, 8, 10);
    let data = synthetic(10, 3, 8, 10, 3).expect("valid synthetic shape");
    let mut correct = 0;
    for i in 0..10 {
        let state = init_model(&spec, i as u64).expect("valid spec");
        let x = data.images.select(&[i]);
        let y = vec![data.labels[i]];
        let rec = gradinv_core::flsim::UpdateRecord {
            kind: gradinv_core::flsim::UpdateKind::Gradient,
            payload: nn::gradients(&spec, &state, &x, &y).expect("valid batch"),
            base: state,
            round: 0,
            epoch: 0,
            local_steps: 1,
            batch_size: 1,
            lr: 1e-4,
        };
        let got = attack::resolve_labels(&spec, &rec, &AttackConfig::default(), &LabelSource::Infer);
        if got.as_deref() == Ok(&y[..]) {
            correct += 1;
        }
    }
    push("label inference", correct == 10, format!("{correct}/10"));
    checks
}
