use bb84_core::protocol::*;
use bb84_core::source::CharacterizedSource;
use proptest::prelude::*;
use std::collections::BTreeSet;

fn eve_strategy() -> impl Strategy<Value = EveStrategy> {
    prop_oneof![
        (0.0f64..1.0, 0.0f64..1.0).prop_map(|(loss, depolarizing)| EveStrategy::Passive { loss, depolarizing }),
        prop_oneof![Just(None), Just(Some(0usize)), Just(Some(1usize))]
            .prop_map(|basis| EveStrategy::InterceptResend { basis }),
        Just(EveStrategy::TagExploit),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 48, .. ProptestConfig::default() })]

    #[test]
    fn session_sets_are_consistent(
        n in 0u64..3000,
        pb in 0.05f64..0.95,
        eff in 0.0f64..1.0,
        dark in 0.0f64..0.05,
        f in 0.01f64..0.99,
        seed in any::<u64>(),
        eve in eve_strategy(),
        coherent in any::<bool>(),
    ) {
        let src = if coherent {
            CharacterizedSource::coherent(0.3, bb84_core::source::Polarization::bb84()).unwrap()
        } else {
            CharacterizedSource::ideal_bb84()
        };
        let cfg = ProtocolConfig {
            n,
            bob_basis_probs: [pb, 1.0 - pb],
            detector: Detector { efficiency: eff, dark_count: dark },
            eve,
            test_fraction: f,
            seed,
        };
        let r = run_session(&cfg, &src, 0).unwrap();
        let d: Vec<usize> = (0..n as usize).filter(|&i| r.y[i] != PHI).collect();
        prop_assert_eq!(&r.sets.d, &d);
        let c: Vec<usize> = d.iter().copied().filter(|&i| r.a[i] == r.b[i]).collect();
        prop_assert_eq!(&r.sets.c, &c);
        let t: BTreeSet<usize> = r.sets.t.iter().copied().collect();
        prop_assert!(t.iter().all(|i| c.binary_search(i).is_ok()));
        prop_assert_eq!(t.len(), (f * c.len() as f64).round() as usize);
        let k: Vec<usize> = c.iter().copied().filter(|i| !t.contains(i)).collect();
        prop_assert_eq!(&r.sets.k, &k);
        let mut lm: Vec<usize> = r.l.iter().chain(r.m.iter()).copied().collect();
        lm.sort_unstable();
        prop_assert_eq!(&lm, &k);
        prop_assert!(r.n_t_e <= r.sets.t.len() as u64);
        r.counts.validate().unwrap();
        prop_assert_eq!(run_session(&cfg, &src, 0).unwrap(), r);
    }
}

#[test]
fn matching_fraction_is_half() {
    let cfg = ProtocolConfig {
        n: 10_000,
        bob_basis_probs: [0.5, 0.5],
        detector: Detector::IDEAL,
        eve: EveStrategy::default(),
        test_fraction: 0.1,
        seed: 11,
    };
    let r = run_session(&cfg, &CharacterizedSource::ideal_bb84(), 0).unwrap();
    let ratio = r.sets.c.len() as f64 / r.sets.d.len() as f64;
    assert!((ratio - 0.5).abs() < 0.02, "{ratio}");
}

#[test]
fn independent_bits_disagree_half_the_time() {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let n = 40_000;
    let x: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let y: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let t: Vec<usize> = (0..n).collect();
    let e = count_errors(&x, &y, &t).unwrap() as f64;
    let sd = (n as f64 * 0.25).sqrt();
    assert!((e - n as f64 / 2.0).abs() < 4.0 * sd);
}
