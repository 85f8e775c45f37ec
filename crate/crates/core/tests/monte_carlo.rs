//! Statistical checks against closed-form expectations.

use fedpm::aggregate::{estimation_error_bound, simple_aggregate};
use fedpm::mask::{sample_mask, BinaryMask, ProbMask};
use fedpm::nn::{init_frozen_weights, kaiming_sigma, NetworkArch};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TRIALS: usize = 10_000;

#[test]
fn sample_frequency_concentrates() {
    let d = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mask = sample_mask(&ProbMask::constant(d, 0.3), &mut rng);
    let tol = 3.0 * (0.3 * 0.7 / d as f64).sqrt();
    assert!((mask.ones_frequency() - 0.3).abs() < tol);
}

#[test]
fn single_client_sampling_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let theta = ProbMask::new((0..32).map(|i| (i as f64 + 0.5) / 32.0).collect()).unwrap();
    let mut sums = vec![0u32; theta.len()];
    for _ in 0..TRIALS {
        let m = sample_mask(&theta, &mut rng);
        sums.iter_mut().zip(m.bits()).for_each(|(s, &b)| *s += u32::from(b));
    }
    for (s, &t) in sums.iter().zip(theta.as_slice()) {
        let tol = 4.0 * (t * (1.0 - t) / TRIALS as f64).sqrt();
        assert!((*s as f64 / TRIALS as f64 - t).abs() < tol);
    }
}

#[test]
fn aggregate_error_respects_bound_and_is_tight_at_half() {
    let (d, k) = (64, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let thetas: Vec<ProbMask> = (0..k)
        .map(|_| ProbMask::new((0..d).map(|_| rng.random::<f64>()).collect()).unwrap())
        .collect();
    let mean: Vec<f64> = (0..d)
        .map(|i| thetas.iter().map(|t| t.as_slice()[i]).sum::<f64>() / k as f64)
        .collect();
    // Exact value: Σ_i Σ_k θ(1-θ) / K².
    let exact: f64 = thetas
        .iter()
        .flat_map(|t| t.as_slice().iter().map(|p| p * (1.0 - p)))
        .sum::<f64>()
        / (k * k) as f64;
    let mse = |thetas: &[ProbMask], target: &[f64], rng: &mut ChaCha8Rng| {
        (0..TRIALS)
            .map(|_| {
                let masks: Vec<BinaryMask> = thetas.iter().map(|t| sample_mask(t, rng)).collect();
                simple_aggregate(&masks)
                    .unwrap()
                    .as_slice()
                    .iter()
                    .zip(target)
                    .map(|(e, t)| (e - t).powi(2))
                    .sum::<f64>()
            })
            .sum::<f64>()
            / TRIALS as f64
    };
    let bound = estimation_error_bound(d, k);
    let uniform = mse(&thetas, &mean, &mut rng);
    assert!(uniform <= bound);
    assert!((uniform - exact).abs() / exact < 0.05, "mc {uniform} vs exact {exact}");

    let half: Vec<ProbMask> = (0..k).map(|_| ProbMask::constant(d, 0.5)).collect();
    let tight = mse(&half, &vec![0.5; d], &mut rng);
    assert!(tight / bound >= 0.95 && tight / bound <= 1.05);
}

#[test]
fn frozen_weights_are_balanced_signed_constants() {
    let arch = NetworkArch::mlp(&[784, 200, 10]).unwrap();
    let w = init_frozen_weights(&arch, 42).unwrap();
    for (layer, range) in arch.layers().iter().zip(arch.layer_ranges()) {
        let sigma = kaiming_sigma(layer.fan_in).unwrap();
        let block = &w.values()[range];
        assert!(block.iter().all(|&v| v == sigma || v == -sigma));
        let pos = block.iter().filter(|&&v| v > 0.0).count() as f64;
        let n = block.len() as f64;
        assert!((pos / n - 0.5).abs() < 4.0 * (0.25 / n).sqrt());
    }
}
