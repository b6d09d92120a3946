use gradinv_core::multiepoch::{greedy_match, greedy_pairs, pooled_similarity, Slot, SlotId};
use gradinv_core::rng::{seeded, uniform_tensor};
use gradinv_core::Tensor;
use proptest::prelude::*;

fn slot(record: usize, seed: u64, labels: &[usize]) -> Slot {
    Slot {
        id: SlotId { record, slot: 0 },
        image: uniform_tensor(&mut seeded(seed), &[1, 3, 6, 6], 0.0, 1.0),
        label: labels[0],
        record_labels: labels.to_vec(),
    }
}

#[test]
fn pooling_hides_fine_detail() {
    // A 2x2 checkerboard of +-d around a flat image vanishes under pooling.
    let flat = Tensor::full(&[1, 1, 4, 4], 0.5);
    let checker = Tensor::from_fn(&[1, 1, 4, 4], |i| if (i / 4 + i % 4) % 2 == 0 { 0.6 } else { 0.4 });
    assert!(pooled_similarity(&flat, &checker).unwrap() < 1e-30);
    let shifted = Tensor::full(&[1, 1, 4, 4], 0.6);
    assert!((pooled_similarity(&flat, &shifted).unwrap() - 0.01).abs() < 1e-12);
    assert!(pooled_similarity(&Tensor::zeros(&[1, 1, 1, 1]), &Tensor::zeros(&[1, 1, 1, 1])).is_err());
}

#[test]
fn filtered_pairs_share_labels() {
    // Unique labels at batch size one: every admissible pair has equal labels.
    let a: Vec<Slot> = (0..6).map(|i| slot(i, i as u64, &[i])).collect();
    let b: Vec<Slot> = (0..6).map(|i| slot(6 + i, 50 + i as u64, &[5 - i])).collect();
    let m = greedy_match(&a, &b, true).unwrap();
    assert_eq!(m.pairs.len(), 6);
    for p in &m.pairs {
        assert!(!p.fallback);
        assert_eq!(a[p.a.record].label, b[p.b.record - 6].label);
    }
    assert!(greedy_match(&a, &b[..5], true).is_err());
}

proptest! {
    #[test]
    fn greedy_is_a_bijection(n in 1usize..9, seed in 0u64..10_000, density in 0.0f64..1.0) {
        let scores = uniform_tensor(&mut seeded(seed), &[n * n], 0.0, 1.0);
        let mask = uniform_tensor(&mut seeded(seed + 1), &[n * n], 0.0, 1.0);
        let pairs = greedy_pairs(scores.data(), n, |i, j| mask.data()[i * n + j] < density);
        prop_assert_eq!(pairs.len(), n);
        let mut a: Vec<usize> = pairs.iter().map(|p| p.0).collect();
        let mut b: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        a.sort_unstable();
        b.sort_unstable();
        prop_assert_eq!(&a, &(0..n).collect::<Vec<_>>());
        prop_assert_eq!(&b, &(0..n).collect::<Vec<_>>());
        for p in &pairs {
            prop_assert_eq!(p.3, mask.data()[p.0 * n + p.1] >= density);
        }
    }

    #[test]
    fn greedy_ignores_common_scale(n in 1usize..9, seed in 0u64..10_000, scale in 1e-3f64..1e3) {
        let scores = uniform_tensor(&mut seeded(seed), &[n * n], 0.0, 1.0);
        let scaled = scores.map(|v| v * scale);
        let a: Vec<(usize, usize)> = greedy_pairs(scores.data(), n, |_, _| true).iter().map(|p| (p.0, p.1)).collect();
        let b: Vec<(usize, usize)> = greedy_pairs(scaled.data(), n, |_, _| true).iter().map(|p| (p.0, p.1)).collect();
        prop_assert_eq!(a, b);
    }
}
