use fedpm::aggregate::{simple_aggregate, Aggregation, Aggregator, ResetPolicy};
use fedpm::codec::{decode_mask, deserialize_model, empirical_entropy, encode_mask, serialize_model, CodedMask};
use fedpm::mask::{clamp_theta, inv_sigmoid, sigmoid, BinaryMask, ProbMask, ScoreMask, EPS_THETA};
use fedpm::nn::NetworkArch;
use fedpm::privacy::{amplified_epsilon, privatize, rdp_to_dp, renyi_binary};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn mask_strategy(max_len: usize) -> impl Strategy<Value = Vec<bool>> {
    (1..=max_len, 0.0f64..=1.0).prop_flat_map(|(n, p)| {
        proptest::collection::vec(proptest::bool::weighted(p.clamp(0.0, 1.0)), n)
    })
}

proptest! {
    #[test]
    fn codec_roundtrips_within_entropy(bits in mask_strategy(4000)) {
        let mask = BinaryMask::from_bits(bits);
        let coded = encode_mask(&mask).unwrap();
        let wire = CodedMask::from_bytes(&coded.to_bytes()).unwrap();
        prop_assert_eq!(&decode_mask(&wire).unwrap(), &mask);
        let n = mask.len() as f64;
        prop_assert!(coded.payload_bits() as f64 <= n * empirical_entropy(mask.ones_frequency()) + 64.0);
    }

    #[test]
    fn artifact_roundtrips(seed in any::<u64>(), bits in proptest::collection::vec(any::<bool>(), 15)) {
        let arch = NetworkArch::mlp(&[3, 5]).unwrap();
        let mask = BinaryMask::from_bits(bits);
        let bytes = serialize_model(&arch, seed, &mask).unwrap();
        let (a, s, m) = deserialize_model(&bytes).unwrap();
        prop_assert_eq!(a, arch);
        prop_assert_eq!(s, seed);
        prop_assert_eq!(m, mask);
    }

    #[test]
    fn bayes_with_per_round_reset_is_simple_averaging(
        rounds in proptest::collection::vec((1usize..12, any::<u64>()), 1..8),
        d in 1usize..64,
    ) {
        let mut agg = Aggregator::new(
            Aggregation::Bayes { lambda0: 1.0, reset: ResetPolicy::every(1).unwrap() },
            d,
        ).unwrap();
        for (k, seed) in rounds {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let masks: Vec<BinaryMask> = (0..k)
                .map(|_| fedpm::mask::sample_mask(&ProbMask::constant(d, 0.5), &mut rng))
                .collect();
            prop_assert_eq!(agg.aggregate(&masks).unwrap(), simple_aggregate(&masks).unwrap());
        }
    }

    #[test]
    fn every_prob_mask_is_clamped(raw in proptest::collection::vec(-1e3f64..1e3, 1..50)) {
        let from_scores = sigmoid(&ScoreMask::new(raw.clone()).unwrap());
        let from_values = ProbMask::new(raw.iter().map(|x| x / 1e3).collect()).unwrap();
        for t in from_scores.as_slice().iter().chain(from_values.as_slice()) {
            prop_assert!((EPS_THETA..=1.0 - EPS_THETA).contains(t));
        }
    }

    #[test]
    fn sigmoid_inverts_on_the_clamped_domain(p in EPS_THETA..=1.0 - EPS_THETA) {
        let theta = ProbMask::new(vec![p]).unwrap();
        let back = sigmoid(&inv_sigmoid(&theta));
        prop_assert!((back.as_slice()[0] - clamp_theta(p)).abs() < 1e-12);
    }

    #[test]
    fn privatized_values_stay_in_the_clip_box(
        theta in proptest::collection::vec(0.0f64..=1.0, 1..40),
        sigma in 0.0f64..3.0,
        c in 0.01f64..0.49,
        seed in any::<u64>(),
    ) {
        let boxed: Vec<f64> = theta.iter().map(|t| t.clamp(c, 1.0 - c)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in privatize(&boxed, sigma, c, &mut rng).unwrap() {
            prop_assert!(v >= c && v <= 1.0 - c);
        }
    }

    #[test]
    fn amplification_never_exceeds_epsilon(
        eps in 0.01f64..50.0,
        d in 1usize..50,
        alpha in 1.01f64..10.0,
        c in 0.01f64..0.49,
    ) {
        let amp = amplified_epsilon(eps, d, alpha, c).unwrap();
        let cap = d as f64 * renyi_binary(alpha, c).unwrap();
        prop_assert!(amp <= eps);
        prop_assert_eq!(amp == eps, eps <= cap);
    }

    #[test]
    fn renyi_is_symmetric(alpha in 1.01f64..10.0, p in 0.01f64..0.99) {
        let a = renyi_binary(alpha, p).unwrap();
        let b = renyi_binary(alpha, 1.0 - p).unwrap();
        prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
    }

    #[test]
    fn conversion_penalty_shrinks_with_alpha(a in 1.01f64..20.0, step in 0.01f64..5.0, delta in 1e-9f64..0.5) {
        prop_assert!(rdp_to_dp(a + step, 1.0, delta).unwrap() <= rdp_to_dp(a, 1.0, delta).unwrap());
    }
}
