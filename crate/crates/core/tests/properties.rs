//! Property tests for the module-level invariants.

use proptest::prelude::*;

use seccogc::gradient_code::build_code;
use seccogc::network::{enumerate_relevant, sample_links, NetworkModel};
use seccogc::protocol::execute_round;
use seccogc::rng;
use seccogc::secret_keys::{construct_fair_cyclic, construct_general, sample_keys};

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Built codes satisfy the product identity for any seed, and the
    /// construction is a pure function of (K, s, seed).
    #[test]
    fn codes_verify_and_are_deterministic(k in 1usize..=8, s_frac in 0usize..8, seed in 0u64..1_000) {
        let s = s_frac % k;
        let a = build_code(k, s, seed).unwrap();
        prop_assert!(a.verify(1e-9).ok);
        let b = build_code(k, s, seed).unwrap();
        prop_assert_eq!(a.g.as_flat(), b.g.as_flat());
        prop_assert_eq!(a.c.as_flat(), b.c.as_flat());
    }

    /// A selected combinator's support always sits inside the arrived set,
    /// and selection succeeds whenever at least K - s clients arrived.
    #[test]
    fn combinator_support_respects_arrivals(k in 1usize..=7, s_frac in 0usize..7, bits in 0u32..128, seed in 0u64..100) {
        let s = s_frac % k;
        let code = build_code(k, s, seed).unwrap();
        let arrived: Vec<bool> = (0..k).map(|i| bits >> i & 1 == 1).collect();
        let n = arrived.iter().filter(|&&b| b).count();
        match code.select_combinator(&arrived) {
            Some(row) => {
                for col in 0..k {
                    if code.c.get(row, col) != 0.0 {
                        prop_assert!(arrived[col]);
                    }
                }
            }
            None => prop_assert!(n < k - s),
        }
    }

    /// Enumerated link realizations form a probability distribution.
    #[test]
    fn enumeration_probabilities_sum_to_one(
        k in 2usize..=4,
        s in 0usize..2,
        p_up in 0.0f64..=1.0,
        p_inter in 0.0f64..=1.0,
        seed in 0u64..50,
    ) {
        let s = s.min(k - 1);
        let code = build_code(k, s, seed).unwrap();
        let net = NetworkModel::uniform(k, p_up, p_inter).unwrap();
        let total: f64 = enumerate_relevant(&net, &code).unwrap().map(|(_, p)| p).sum();
        prop_assert!((total - 1.0).abs() < 1e-12, "total {}", total);
    }

    /// Sampled key sets cancel coordinate-wise for every construction.
    #[test]
    fn keys_always_cancel(k in 2usize..=7, d in 1usize..=16, seed in 0u64..200) {
        let gm = if seed % 2 == 0 {
            construct_general(k, k, seed).unwrap()
        } else {
            construct_fair_cyclic(k, 1 + (seed as usize % (k - 1)).min(k - 2), 2.5).unwrap()
        };
        let ks = sample_keys(&gm, d, seed);
        let max_mag = ks.keys.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        for i in 0..d {
            let sum: f64 = ks.keys.iter().map(|key| key[i]).sum();
            prop_assert!(sum.abs() <= 1e-9 * max_mag.max(1e-12));
        }
    }

    /// Masked rounds that succeed recover the exact noise-free average, for
    /// any key power and any link realization that yields success.
    #[test]
    fn successful_rounds_recover_exactly(
        k in 2usize..=6,
        s in 0usize..3,
        lambda2 in 0.01f64..100.0,
        seed in 0u64..200,
    ) {
        let s = s.min(k - 1);
        let d = 6;
        let code = build_code(k, s, seed).unwrap();
        let gamma = 1 + (seed as usize) % (k - 1).max(1);
        let gm = construct_fair_cyclic(k, gamma.min(k - 1), lambda2).unwrap();
        let net = NetworkModel::uniform(k, 0.3, 0.2).unwrap();
        let deltas: Vec<Vec<f64>> = (0..k)
            .map(|i| rng::normal_vec(&mut rng::stream(seed, &[i as u64]), d))
            .collect();
        let keys = sample_keys(&gm, d, seed ^ 0xabcd);
        let links = sample_links(&net, seed, 0);
        let trace = execute_round(&deltas, &keys.keys, &code, &links).unwrap();
        if let Some(update) = &trace.recovered_update {
            let mut mean = vec![0.0; d];
            for delta in &deltas {
                for (m, &v) in mean.iter_mut().zip(delta) {
                    *m += v;
                }
            }
            for m in &mut mean {
                *m /= k as f64;
            }
            let scale = mean.iter().fold(1e-12f64, |m, v| m.max(v.abs()));
            let err = update
                .iter()
                .zip(&mean)
                .map(|(&u, &m)| (u - m).abs())
                .fold(0.0f64, f64::max);
            prop_assert!(err <= 1e-6 * scale, "rel err {}", err / scale);
        }
    }
}

/// The code construction keeps working at the upper end of the stated
/// range (K up to 12, every straggler tolerance with f under the cap).
#[test]
fn codes_up_to_k12_verify() {
    for k in 11..=12usize {
        for s in 0..k {
            let code = build_code(k, s, 3).unwrap();
            assert!(code.verify(1e-9).ok, "K={k} s={s}");
        }
    }
}
