use gradinv_core::attack::{self, AttackConfig, LabelSource, Problem};
use gradinv_core::clock::NoClock;
use gradinv_core::data::{synthetic, Normalization};
use gradinv_core::flsim::{run_round, UpdateKind, UpdateRecord};
use gradinv_core::multiepoch::{gamma_schedule, joint_reconstruct, JointRecord};
use gradinv_core::nn::{init_model, ModelSpec};
use gradinv_core::Error;

struct Setup {
    spec: ModelSpec,
    records: Vec<UpdateRecord>,
}

fn setup() -> Setup {
    let spec = ModelSpec::tiny_cnn(3, 8, 10);
    let state = init_model(&spec, 2).unwrap();
    let data = synthetic(4, 3, 8, 10, 9).unwrap();
    let records = [vec![vec![0]], vec![vec![1]], vec![vec![0, 1]]]
        .iter()
        .map(|b| run_round(&spec, &state, &data, b, 1e-3, UpdateKind::Gradient).unwrap().1)
        .collect();
    Setup { spec, records }
}

fn config(iterations: usize) -> AttackConfig {
    AttackConfig {
        iterations,
        tv_weight: 1e-5,
        ..AttackConfig::default()
    }
}

fn bound(record: &UpdateRecord, slot: usize, gamma: f64) -> JointRecord<'_> {
    let mut bindings = vec![None; record.samples()];
    bindings[slot] = Some(0);
    JointRecord {
        record,
        bindings,
        gamma,
    }
}

#[test]
fn gamma_defaults() {
    assert_eq!(gamma_schedule(3), vec![1.0, 0.1, 0.1]);
    assert_eq!(gamma_schedule(1), vec![1.0]);
}

#[test]
fn single_record_matches_plain_attack() {
    let s = setup();
    let cfg = config(25);
    let norm = Normalization::identity(3);
    let joint = joint_reconstruct(&s.spec, &[bound(&s.records[0], 0, 1.0)], 1, &cfg, &norm, &NoClock).unwrap();
    let plain = attack::reconstruct(&s.spec, &s.records[0], &cfg, &LabelSource::Infer, &norm, &NoClock).unwrap();
    assert_eq!(joint, plain);
}

#[test]
fn zero_weight_leaves_trajectory_unchanged() {
    let s = setup();
    let cfg = config(25);
    let norm = Normalization::identity(3);
    let alone = joint_reconstruct(&s.spec, &[bound(&s.records[0], 0, 1.0)], 1, &cfg, &norm, &NoClock).unwrap();
    let with_zero = joint_reconstruct(
        &s.spec,
        &[bound(&s.records[0], 0, 1.0), bound(&s.records[1], 0, 0.0)],
        1,
        &cfg,
        &norm,
        &NoClock,
    )
    .unwrap();
    assert_eq!(alone.dummy, with_zero.dummy);
    assert_eq!(alone.trace, with_zero.trace);
}

#[test]
fn equal_weights_double_the_objective() {
    let s = setup();
    let cfg = AttackConfig {
        tv_weight: 0.0,
        ..config(1)
    };
    let labels = attack::resolve_labels(&s.spec, &s.records[0], &cfg, &LabelSource::Infer).unwrap();
    let term = attack::record_term(&s.spec, &s.records[0], &cfg, &labels, 1.0).unwrap();
    let once = Problem {
        spec: &s.spec,
        terms: vec![term.clone()],
        tv_weight: 0.0,
    };
    let twice = Problem {
        spec: &s.spec,
        terms: vec![term.clone(), term],
        tv_weight: 0.0,
    };
    let x = attack::init_dummy(&s.spec, 1, 4);
    let (v1, g1) = once.evaluate(&x).unwrap();
    let (v2, g2) = twice.evaluate(&x).unwrap();
    assert!((v2 - 2.0 * v1).abs() <= 1e-12);
    for (a, b) in g2.data().iter().zip(g1.data()) {
        assert!((a - 2.0 * b).abs() <= 1e-12 * (1.0 + b.abs()));
    }
}

#[test]
fn unbound_slots_get_own_rows() {
    let s = setup();
    let cfg = config(2);
    let norm = Normalization::identity(3);
    // The two-sample record binds slot 1 to the shared sample; slot 0 keeps
    // its own dummy, which comes after the shared row.
    let r = joint_reconstruct(
        &s.spec,
        &[bound(&s.records[1], 0, 1.0), bound(&s.records[2], 1, 0.1)],
        1,
        &cfg,
        &norm,
        &NoClock,
    )
    .unwrap();
    assert_eq!(r.dummy.batch_len(), 2);
    assert_eq!(r.labels.len(), 2);
}

#[test]
fn binding_errors() {
    let s = setup();
    let cfg = config(1);
    let norm = Normalization::identity(3);
    let run = |records: &[JointRecord<'_>], n| joint_reconstruct(&s.spec, records, n, &cfg, &norm, &NoClock);
    let is_binding = |r: Result<_, Error>| matches!(r, Err(Error::SlotBinding(_)));
    assert!(is_binding(run(&[], 1)));
    let wrong_len = JointRecord {
        record: &s.records[0],
        bindings: vec![Some(0), None],
        gamma: 1.0,
    };
    assert!(is_binding(run(&[wrong_len], 1)));
    let out_of_range = JointRecord {
        record: &s.records[0],
        bindings: vec![Some(3)],
        gamma: 1.0,
    };
    assert!(is_binding(run(&[out_of_range], 1)));
    let twice = JointRecord {
        record: &s.records[2],
        bindings: vec![Some(0), Some(0)],
        gamma: 1.0,
    };
    assert!(is_binding(run(&[twice], 1)));
    assert!(is_binding(run(&[bound(&s.records[0], 0, 1.0)], 2)));
}
