use gradinv_core::metrics::{best_assignment, evaluate_batch, greedy_assignment, matching_success_rate, psnr, ssim};
use gradinv_core::multiepoch::{MatchPair, MatchResult, SlotId};
use gradinv_core::rng::{normal_tensor, seeded, uniform_tensor};
use gradinv_core::Tensor;
use proptest::prelude::*;

fn image(seed: u64, shape: &[usize]) -> Tensor {
    uniform_tensor(&mut seeded(seed), shape, 0.0, 1.0)
}

/// SSIM computed with separable Gaussian filtering of whole moment maps,
/// independent of the windowed loop in the library.
fn ssim_oracle(x: &Tensor, y: &Tensor) -> f64 {
    let s = x.shape();
    let (c, h, w) = (s[0], s[1], s[2]);
    let g: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp()).collect();
    let norm: f64 = g.iter().sum();
    let g: Vec<f64> = g.iter().map(|v| v / norm).collect();
    let filter = |img: &[f64]| -> Vec<f64> {
        let (oh, ow) = (h - 10, w - 10);
        let mut rows = vec![0.0; h * ow];
        for y in 0..h {
            for x in 0..ow {
                rows[y * ow + x] = (0..11).map(|k| g[k] * img[y * w + x + k]).sum();
            }
        }
        let mut out = vec![0.0; oh * ow];
        for y in 0..oh {
            for x in 0..ow {
                out[y * ow + x] = (0..11).map(|k| g[k] * rows[(y + k) * ow + x]).sum();
            }
        }
        out
    };
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let plane = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let a = &x.data()[ch * plane..(ch + 1) * plane];
        let b = &y.data()[ch * plane..(ch + 1) * plane];
        let sq = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<_>>();
        let (ma, mb) = (filter(a), filter(b));
        let (aa, bb, ab) = (filter(&sq(a, a)), filter(&sq(b, b)), filter(&sq(a, b)));
        let n = ma.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (va, vb, cov) = (aa[i] - ma[i] * ma[i], bb[i] - mb[i] * mb[i], ab[i] - ma[i] * mb[i]);
            acc += ((2.0 * ma[i] * mb[i] + c1) * (2.0 * cov + c2))
                / ((ma[i] * ma[i] + mb[i] * mb[i] + c1) * (va + vb + c2));
        }
        total += acc / n as f64;
    }
    total / c as f64
}

#[test]
fn psnr_and_ssim_match_direct_formulas() {
    for seed in 0..50 {
        let x = image(2 * seed, &[3, 14, 13]);
        let y = image(2 * seed + 1, &[3, 14, 13]);
        let mse = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / x.len() as f64;
        let p = psnr(&x, &y).unwrap();
        assert!((p - 10.0 * (1.0 / mse).log10()).abs() < 1e-9);
        let s = ssim(&x, &y).unwrap();
        assert!(!s.global_window);
        assert!((s.value - ssim_oracle(&x, &y)).abs() < 1e-6, "seed {seed}");
    }
}

#[test]
fn psnr_mse_example() {
    let x = Tensor::zeros(&[1, 4, 4]);
    let y = Tensor::full(&[1, 4, 4], 0.1);
    assert!((psnr(&x, &y).unwrap() - 20.0).abs() < 1e-9);
    assert_eq!(psnr(&x, &x).unwrap(), 100.0);
    assert!(psnr(&x, &Tensor::zeros(&[1, 4, 5])).is_err());
}

#[test]
fn ssim_of_constant_images() {
    // Constant planes have zero variance, so only the luminance term remains:
    // (2ab + C1) / (a^2 + b^2 + C1).
    let a = Tensor::full(&[1, 12, 12], 0.2);
    let b = Tensor::full(&[1, 12, 12], 0.4);
    let c1 = 0.01f64 * 0.01;
    let expected = (2.0 * 0.2 * 0.4 + c1) / (0.04 + 0.16 + c1);
    assert!((ssim(&a, &b).unwrap().value - expected).abs() < 1e-12);
    let small = ssim(&Tensor::full(&[1, 4, 4], 0.2), &Tensor::full(&[1, 4, 4], 0.4)).unwrap();
    assert!(small.global_window);
    assert!((small.value - expected).abs() < 1e-12);
}

#[test]
fn psnr_falls_with_noise_amplitude() {
    let x = image(3, &[3, 16, 16]);
    let noise = normal_tensor(&mut seeded(4), &[3, 16, 16]);
    let values: Vec<f64> = [0.001, 0.01, 0.03, 0.1, 0.3]
        .iter()
        .map(|&a| psnr(&x, &x.zip_map(&noise, |v, n| v + a * n).unwrap()).unwrap())
        .collect();
    assert!(values.windows(2).all(|w| w[0] > w[1]), "{values:?}");
}

#[test]
fn evaluate_recovers_permutation() {
    let truth = image(9, &[4, 3, 8, 8]);
    let perm = [2, 0, 3, 1];
    let recon = truth.select(&perm);
    let r = evaluate_batch(&recon, &truth).unwrap();
    assert_eq!(r.assignment, perm.to_vec());
    assert_eq!(r.mean_psnr, 100.0);
    assert!((r.mean_ssim - 1.0).abs() < 1e-12);
    assert!(r.ssim_global_window);

    let single = evaluate_batch(&image(1, &[1, 3, 8, 8]), &image(2, &[1, 3, 8, 8])).unwrap();
    assert_eq!(single.assignment, vec![0]);
    assert!(evaluate_batch(&image(1, &[2, 3, 8, 8]), &image(2, &[3, 3, 8, 8])).is_err());
}

#[test]
fn evaluate_is_permutation_invariant() {
    for seed in 0..20u64 {
        let b = 2 + (seed as usize % 6);
        let truth = image(100 + seed, &[b, 1, 6, 6]);
        let noise = normal_tensor(&mut seeded(200 + seed), &[b, 1, 6, 6]);
        let recon = truth.zip_map(&noise, |t, n| t + 0.2 * n).unwrap();
        let base = evaluate_batch(&recon, &truth).unwrap();
        let mut order: Vec<usize> = (0..b).collect();
        use rand::seq::SliceRandom;
        order.shuffle(&mut seeded(300 + seed));
        let shuffled = evaluate_batch(&recon.select(&order), &truth).unwrap();
        assert_eq!(base.mean_psnr, shuffled.mean_psnr, "seed {seed}");
        assert_eq!(base.mean_ssim, shuffled.mean_ssim, "seed {seed}");
    }
}

#[test]
fn exhaustive_never_below_greedy() {
    for seed in 0..30u64 {
        let t = uniform_tensor(&mut seeded(seed), &[25], 0.0, 40.0);
        let total = |a: &[usize]| a.iter().enumerate().map(|(i, &j)| t.data()[i * 5 + j]).sum::<f64>();
        assert!(total(&best_assignment(t.data(), 5)) >= total(&greedy_assignment(t.data(), 5)));
    }
}

#[test]
fn matching_rate_examples() {
    let id = |record| SlotId { record, slot: 0 };
    let pair = |a, b| MatchPair {
        a: id(a),
        b: id(b),
        score: 0.0,
        fallback: false,
    };
    let sample = |s: SlotId| s.record % 2;
    let perfect = MatchResult {
        pairs: vec![pair(0, 2), pair(1, 3)],
    };
    assert_eq!(matching_success_rate(&perfect, sample), 1.0);
    let crossed = MatchResult {
        pairs: vec![pair(0, 3), pair(1, 2)],
    };
    assert_eq!(matching_success_rate(&crossed, sample), 0.0);
    assert_eq!(matching_success_rate(&MatchResult::default(), sample), 0.0);
}

proptest! {
    #[test]
    fn psnr_symmetric(a in 0u64..1000, b in 0u64..1000) {
        let x = image(a, &[2, 5, 5]);
        let y = image(b + 1000, &[2, 5, 5]);
        prop_assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
    }

    #[test]
    fn ssim_bounded_and_reflexive(a in 0u64..1000, b in 0u64..1000, size in 4usize..16) {
        let x = image(a, &[3, size, size]);
        let y = image(b + 1000, &[3, size, size]);
        let s = ssim(&x, &y).unwrap().value;
        prop_assert!(s.abs() <= 1.0);
        prop_assert!((s - ssim(&y, &x).unwrap().value).abs() < 1e-12);
        prop_assert!((ssim(&x, &x).unwrap().value - 1.0).abs() < 1e-12);
    }
}
