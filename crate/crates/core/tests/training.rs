use fedpm::data::{synth_dataset, Dataset};
use fedpm::mask::{local_train, train_local_scores, ClientConfig, Optimizer, ProbMask};
use fedpm::nn::{init_frozen_weights, NetworkArch};
use fedpm::Error;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn setup() -> (NetworkArch, Dataset) {
    let arch = NetworkArch::mlp(&[20, 32, 4]).unwrap();
    let data = synth_dataset(5, 400, 20, 4, 20.0).unwrap();
    (arch, data)
}

#[test]
fn zero_learning_rate_keeps_the_broadcast() {
    let (arch, data) = setup();
    let w = init_frozen_weights(&arch, 1).unwrap();
    let theta = ProbMask::new((0..arch.param_count()).map(|i| (i % 7) as f64 / 7.0).collect()).unwrap();
    for optimizer in [Optimizer::Sgd, Optimizer::Adam] {
        let cfg = ClientConfig { learning_rate: 0.0, optimizer, ..ClientConfig::default() };
        let run = train_local_scores(&theta, &w, &arch, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        for (a, b) in run.theta.as_slice().iter().zip(theta.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn same_seed_same_update() {
    let (arch, data) = setup();
    let w = init_frozen_weights(&arch, 2).unwrap();
    let theta = ProbMask::constant(arch.param_count(), 0.5);
    let cfg = ClientConfig::default();
    let a = local_train(&theta, &w, &arch, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    let b = local_train(&theta, &w, &arch, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
    assert_eq!(a.mask, b.mask);
    assert_eq!(a.epoch_losses, b.epoch_losses);
}

#[test]
fn local_training_reduces_loss() {
    let (arch, data) = setup();
    let theta = ProbMask::constant(arch.param_count(), 0.5);
    let cfg = ClientConfig { local_epochs: 5, batch_size: 32, ..ClientConfig::default() };
    for seed in 0..5 {
        let w = init_frozen_weights(&arch, seed).unwrap();
        let w_before = w.values().to_vec();
        let run = train_local_scores(&theta, &w, &arch, &data, &cfg, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        let first = run.epoch_losses[0];
        let last = *run.epoch_losses.last().unwrap();
        assert!(last < first, "seed {seed}: {:?}", run.epoch_losses);
        // Only scores move; the network weights are frozen.
        assert_eq!(w.values(), w_before.as_slice());
    }
}

#[test]
fn rejects_empty_and_mismatched_inputs() {
    let (arch, data) = setup();
    let w = init_frozen_weights(&arch, 0).unwrap();
    let cfg = ClientConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let empty = data.subset(&[]);
    let theta = ProbMask::constant(arch.param_count(), 0.5);
    assert!(matches!(
        train_local_scores(&theta, &w, &arch, &empty, &cfg, &mut rng),
        Err(Error::Client(_))
    ));
    let short = ProbMask::constant(3, 0.5);
    assert!(matches!(
        train_local_scores(&short, &w, &arch, &data, &cfg, &mut rng),
        Err(Error::Shape(_))
    ));
    let bad = ClientConfig { batch_size: 0, ..cfg };
    assert!(train_local_scores(&theta, &w, &arch, &data, &bad, &mut rng).is_err());
}

#[test]
fn huge_features_report_divergence() {
    let arch = NetworkArch::mlp(&[2, 2]).unwrap();
    let data = Dataset::new(Array2::from_elem((4, 2), 1e308), vec![0, 1, 0, 1], 2).unwrap();
    let w = init_frozen_weights(&arch, 0).unwrap();
    let theta = ProbMask::constant(arch.param_count(), 1.0);
    let res = train_local_scores(&theta, &w, &arch, &data, &ClientConfig::default(), &mut ChaCha8Rng::seed_from_u64(0));
    assert!(matches!(res, Err(Error::Diverged { .. })), "{res:?}");
}
