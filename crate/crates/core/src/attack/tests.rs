use super::*;
use crate::clock::NoClock;
use crate::data::{synthetic, Dataset};
use crate::flsim::run_round;
use crate::nn::init_model;
use alloc::vec;

struct Fixture {
    spec: ModelSpec,
    state: ModelState,
    data: Dataset,
}

fn fixture() -> Fixture {
    let spec = ModelSpec::tiny_cnn(3, 8, 10);
    let state = init_model(&spec, 3).unwrap();
    let data = synthetic(8, 3, 8, 10, 4).unwrap();
    Fixture { spec, state, data }
}

impl Fixture {
    fn batch(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        (self.data.images.select(idx), idx.iter().map(|&i| self.data.labels[i]).collect())
    }

    fn delta_record(&self, batches: &[Vec<usize>], lr: f64) -> UpdateRecord {
        run_round(&self.spec, &self.state, &self.data, batches, lr, UpdateKind::ModelDelta)
            .unwrap()
            .1
    }
}

fn eval(build: impl FnOnce(&mut Graph, Var) -> Result<Var>, x: &Tensor) -> f64 {
    let mut g = Graph::new();
    let d = g.leaf(x.clone());
    let out = build(&mut g, d).unwrap();
    g.value(out).item()
}

#[test]
fn layer_weight_examples() {
    let w = layer_weights(21, 2.0, None).unwrap();
    assert_eq!(w.len(), 22);
    assert_eq!(w[0], 1.0);
    assert!((w[10] - 1.5).abs() < 1e-12);
    assert!((w[20] - 2.0).abs() < 1e-12);
    assert!((w[21] - 1.5).abs() < 1e-12);

    assert!(layer_weights(5, 1.0, None).unwrap().iter().all(|&v| v == 1.0));
    assert_eq!(layer_weights(1, 50.0, None).unwrap(), vec![1.0, 1.0]);

    let w = layer_weights(2, 3.0, Some(&[0.5, 0.0])).unwrap();
    assert_eq!(w, vec![2.0, 3.0, 2.0]);
    let w = layer_weights(2, 3.0, Some(&[1.0, 0.999])).unwrap();
    assert_eq!(w[0], MODIFIER_CAP);
    assert_eq!(w[1], 3.0 * MODIFIER_CAP);
}

#[test]
fn layer_weight_errors() {
    assert!(layer_weights(0, 2.0, None).is_err());
    assert!(layer_weights(3, 0.0, None).is_err());
    assert!(layer_weights(3, f64::NAN, None).is_err());
    assert!(layer_weights(3, 2.0, Some(&[0.1, 0.2])).is_err());
    assert!(layer_weights(2, 2.0, Some(&[0.1, 1.2])).is_err());
}

#[test]
fn agic_vanishes_at_ground_truth() {
    let f = fixture();
    let (x, y) = f.batch(&[0, 1]);
    let target = nn::gradients(&f.spec, &f.state, &x, &y).unwrap();
    let p = nn::zero_fraction_per_layer(&f.spec, &target).unwrap();
    let alpha = layer_weights(f.spec.n_conv(), 50.0, Some(&p)).unwrap();
    let v = eval(|g, d| agic_objective(g, &f.spec, &f.state, d, &y, &target, &alpha, 0.0), &x);
    assert!(v.abs() <= 1e-9, "{v}");
}

#[test]
fn agic_ignores_target_scale() {
    let f = fixture();
    let (x, y) = f.batch(&[2, 3]);
    let target = nn::gradients(&f.spec, &f.state, &x, &y).unwrap();
    let scaled: Vec<Tensor> = target.iter().map(|t| t.map(|v| 3.7 * v)).collect();
    let alpha = layer_weights(f.spec.n_conv(), 50.0, None).unwrap();
    let dummy = init_dummy(&f.spec, 2, 11);
    let a = eval(|g, d| agic_objective(g, &f.spec, &f.state, d, &y, &target, &alpha, 0.0), &dummy);
    let b = eval(|g, d| agic_objective(g, &f.spec, &f.state, d, &y, &scaled, &alpha, 0.0), &dummy);
    assert!(a > 1e-3);
    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
}

#[test]
fn unit_weights_reduce_to_cosine() {
    let f = fixture();
    let (x, y) = f.batch(&[4]);
    let target = nn::gradients(&f.spec, &f.state, &x, &y).unwrap();
    let ones = vec![1.0; f.spec.n_conv() + 1];
    let dummy = init_dummy(&f.spec, 1, 12);
    let a = eval(|g, d| agic_objective(g, &f.spec, &f.state, d, &y, &target, &ones, 1e-2), &dummy);
    let b = eval(|g, d| cosine_objective(g, &f.spec, &f.state, d, &y, &target, 1e-2), &dummy);
    assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
}

#[test]
fn weighted_distance_rejects_zero_target() {
    let f = fixture();
    let (x, y) = f.batch(&[0]);
    let zeros: Vec<Tensor> = f.state.params.iter().map(|p| Tensor::zeros(p.value.shape())).collect();
    let alpha = layer_weights(f.spec.n_conv(), 2.0, None).unwrap();
    let mut g = Graph::new();
    let d = g.leaf(x);
    let err = agic_objective(&mut g, &f.spec, &f.state, d, &y, &zeros, &alpha, 0.0).unwrap_err();
    assert_eq!(err, Error::ZeroNorm("weighted cosine"));
}

#[test]
fn l2_matches_elementwise_oracle() {
    let f = fixture();
    let (x, y) = f.batch(&[0, 5]);
    let target = nn::gradients(&f.spec, &f.state, &x, &y).unwrap();
    let at_truth = eval(|g, d| l2_objective(g, &f.spec, &f.state, d, &y, &target), &x);
    assert!(at_truth <= 1e-20);

    let dummy = init_dummy(&f.spec, 2, 13);
    let dg = nn::gradients(&f.spec, &f.state, &dummy, &y).unwrap();
    let oracle: f64 = crate::tensor::flatten(&dg)
        .iter()
        .zip(crate::tensor::flatten(&target))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let v = eval(|g, d| l2_objective(g, &f.spec, &f.state, d, &y, &target), &dummy);
    assert!((v - oracle).abs() <= 1e-12 * oracle.max(1.0), "{v} vs {oracle}");

    let doubled: Vec<Tensor> = target.iter().map(|t| t.map(|v| 2.0 * v)).collect();
    let w = eval(|g, d| l2_objective(g, &f.spec, &f.state, d, &y, &doubled), &dummy);
    assert!((v - w).abs() > 1e-9);
}

#[test]
fn simulation_replays_client_exactly() {
    let f = fixture();
    for batches in [vec![vec![0, 1]], vec![vec![0], vec![1]], vec![vec![2, 3], vec![4, 5]]] {
        let rec = f.delta_record(&batches, 1e-2);
        let idx: Vec<usize> = batches.iter().flatten().copied().collect();
        let (x, y) = f.batch(&idx);
        for distance in [Distance::Cosine, Distance::L2] {
            let v = eval(
                |g, d| simulation_objective(g, &f.spec, &rec, d, &y, 1e-2, &distance, 0.0),
                &x,
            );
            assert!(v.abs() <= 1e-9, "{v} for {batches:?}");
        }
    }
}

#[test]
fn simulation_needs_model_delta() {
    let f = fixture();
    let (_, rec) = run_round(&f.spec, &f.state, &f.data, &[vec![0]], 0.1, UpdateKind::Gradient).unwrap();
    let (x, y) = f.batch(&[0]);
    let mut g = Graph::new();
    let d = g.leaf(x);
    assert!(simulation_objective(&mut g, &f.spec, &rec, d, &y, 0.1, &Distance::Cosine, 0.0).is_err());
}

#[test]
fn one_batch_recovers_single_step_gradient() {
    let f = fixture();
    let (x, y) = f.batch(&[6]);
    let g = crate::tensor::flatten(&nn::gradients(&f.spec, &f.state, &x, &y).unwrap());
    // A power-of-two lr makes both the client's product and the division exact.
    let exact = libm::ldexp(1.0, -13);
    let rec = f.delta_record(&[vec![6]], exact);
    let approx = crate::tensor::flatten(&one_batch_gradients(&rec, exact).unwrap());
    assert_eq!(approx, g);

    let rec = f.delta_record(&[vec![6]], 1e-4);
    let approx = crate::tensor::flatten(&one_batch_gradients(&rec, 1e-4).unwrap());
    for (a, b) in approx.iter().zip(&g) {
        assert!((a - b).abs() <= f64::EPSILON * b.abs(), "{a} vs {b}");
    }
}

#[test]
fn one_batch_error_grows_with_lr() {
    let f = fixture();
    let batches = vec![vec![0], vec![1], vec![2], vec![3]];
    let (x, y) = f.batch(&[0, 1, 2, 3]);
    let truth = crate::tensor::flatten(&nn::gradients(&f.spec, &f.state, &x, &y).unwrap());
    let norm = libm::sqrt(truth.iter().map(|v| v * v).sum::<f64>());
    let errors: Vec<f64> = [1e-4, 1e-3, 1e-2, 1e-1]
        .iter()
        .map(|&lr| {
            let rec = f.delta_record(&batches, lr);
            let approx = crate::tensor::flatten(&one_batch_gradients(&rec, lr).unwrap());
            let d: f64 = approx.iter().zip(&truth).map(|(a, b)| (a - b) * (a - b)).sum();
            libm::sqrt(d) / norm
        })
        .collect();
    assert!(errors.windows(2).all(|w| w[0] < w[1]), "{errors:?}");
    assert!(errors[0] < 1e-2, "{errors:?}");
}

#[test]
fn one_batch_argument_checks() {
    let f = fixture();
    let rec = f.delta_record(&[vec![0]], 1e-3);
    assert!(one_batch_gradients(&rec, 0.0).is_err());
    let (_, grad) = run_round(&f.spec, &f.state, &f.data, &[vec![0]], 1e-3, UpdateKind::Gradient).unwrap();
    assert!(one_batch_gradients(&grad, 1e-3).is_err());
    let none = AttackConfig {
        fedavg_mode: FedAvgMode::None,
        ..AttackConfig::default()
    };
    assert!(matches!(target_gradients(&rec, &none), Err(Error::InvalidConfig(_))));
    assert_eq!(target_gradients(&grad, &none).unwrap(), grad.payload);
}

#[test]
fn given_labels_are_checked() {
    let f = fixture();
    let rec = f.delta_record(&[vec![0, 1]], 1e-3);
    let cfg = AttackConfig::default();
    assert_eq!(
        resolve_labels(&f.spec, &rec, &cfg, &LabelSource::Given(vec![3, 1])).unwrap(),
        vec![3, 1]
    );
    assert!(resolve_labels(&f.spec, &rec, &cfg, &LabelSource::Given(vec![3])).is_err());
    assert_eq!(
        resolve_labels(&f.spec, &rec, &cfg, &LabelSource::Given(vec![3, 10])).unwrap_err(),
        Error::LabelOutOfRange { label: 10, classes: 10 }
    );
}

#[test]
fn objective_gradient_matches_finite_differences() {
    let f = fixture();
    let rec = f.delta_record(&[vec![0], vec![1]], 1e-2);
    let cfg = AttackConfig {
        fedavg_mode: FedAvgMode::Simulation,
        local_lr: 1e-2,
        beta: 4.0,
        ..AttackConfig::default()
    };
    let labels = resolve_labels(&f.spec, &rec, &cfg, &LabelSource::Given(vec![f.data.labels[0], f.data.labels[1]])).unwrap();
    let problem = Problem {
        spec: &f.spec,
        terms: vec![record_term(&f.spec, &rec, &cfg, &labels, 1.0).unwrap()],
        tv_weight: 1e-3,
    };
    let x = init_dummy(&f.spec, 2, 21);
    let (_, grad) = problem.evaluate(&x).unwrap();
    let h = 1e-5;
    for i in (0..x.len()).step_by(37) {
        let mut xp = x.clone();
        xp.data_mut()[i] += h;
        let mut xm = x.clone();
        xm.data_mut()[i] -= h;
        let fd = (problem.value(&xp).unwrap() - problem.value(&xm).unwrap()) / (2.0 * h);
        let a = grad.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-7);
        assert!(rel < 1e-3, "coordinate {i}: {a} vs {fd}");
    }
}

#[test]
fn reconstruct_is_deterministic_and_tracks_best() {
    let f = fixture();
    let (_, rec) = run_round(&f.spec, &f.state, &f.data, &[vec![0]], 1e-3, UpdateKind::Gradient).unwrap();
    let cfg = AttackConfig {
        iterations: 30,
        trace_every: 1,
        ..AttackConfig::default()
    };
    let norm = Normalization::identity(3);
    let a = reconstruct(&f.spec, &rec, &cfg, &LabelSource::Infer, &norm, &NoClock).unwrap();
    let b = reconstruct(&f.spec, &rec, &cfg, &LabelSource::Infer, &norm, &NoClock).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.labels, vec![f.data.labels[0]]);
    assert_eq!(a.trace.len(), 31);
    assert!(a.trace.windows(2).all(|w| w[1].best <= w[0].best));
    let min = a.trace.iter().map(|t| t.objective).fold(f64::INFINITY, f64::min);
    assert_eq!(a.best_objective, min);
    assert!(a.best_objective < a.trace[0].objective);

    let zero = AttackConfig { iterations: 0, ..cfg };
    let z = reconstruct(&f.spec, &rec, &zero, &LabelSource::Infer, &norm, &NoClock).unwrap();
    assert_eq!(z.dummy, init_dummy(&f.spec, 1, cfg.seed));
    assert!(zero.validate().is_err());
}

#[test]
fn l2_baseline_drops_the_prior() {
    let cfg = AttackConfig {
        objective: ObjectiveKind::L2Dlg,
        ..AttackConfig::default()
    };
    assert_eq!(effective_tv_weight(&cfg), 0.0);
    assert_eq!(effective_tv_weight(&AttackConfig::default()), 1e-4);
}
