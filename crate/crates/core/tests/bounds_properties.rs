use bb84_core::bounds::*;
use bb84_core::qmath::{random, CMat, DensityOp, C64};
use bb84_core::source::{decompose, CharacterizedSource, QubitStrategy, SourceSpec};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random three-outcome POVM on a qubit: `S^-1/2 G_i S^-1/2` with `S = sum G_i`.
fn random_povm(rng: &mut ChaCha8Rng) -> [CMat; 3] {
    let g: Vec<CMat> = (0..3)
        .map(|_| {
            let scale = rng.gen::<f64>().powi(3);
            let rank = 1 + rng.gen_range(0..2);
            random::density(rng, 2, rank).mat().scale(scale + 1e-6)
        })
        .collect();
    let s = g[0].add(&g[1]).add(&g[2]);
    let e = nalgebra::SymmetricEigen::new(s.0.clone());
    let inv = DMatrix::from_diagonal(&e.eigenvalues.map(|l| C64::new(1.0 / l.sqrt(), 0.0)));
    let s_inv = CMat(&e.eigenvectors * inv * e.eigenvectors.adjoint());
    [0, 1, 2].map(|i| s_inv.mul(&g[i]).mul(&s_inv).hermitian_part())
}

fn brute_force(states: [&DensityOp; 2], priors: [f64; 2], t: f64, rng: &mut ChaCha8Rng, trials: usize) -> f64 {
    let a = [states[0].mat().scale(priors[0]), states[1].mat().scale(priors[1])];
    let rho = a[0].add(&a[1]);
    let mut best: f64 = 0.0;
    for _ in 0..trials {
        let e = random_povm(rng);
        let conclusive = rho.trace_product(&e[0].add(&e[1]));
        if conclusive >= t && conclusive > 0.0 {
            let success = a[0].trace_product(&e[0]) + a[1].trace_product(&e[1]);
            best = best.max(success / conclusive);
        }
    }
    best
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, .. ProptestConfig::default() })]

    #[test]
    fn certified_success_dominates_random_povms(seed in any::<u64>(), t in 0.0f64..1.0, prior in 0.2f64..0.8) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s0 = random::mixed_or_pure(&mut rng, 2);
        let s1 = random::mixed_or_pure(&mut rng, 2);
        let priors = [prior, 1.0 - prior];
        let pair = WeightedPair::new([&s0, &s1], priors).unwrap();
        let cert = constrained_success(&pair, t).unwrap();
        let brute = brute_force([&s0, &s1], priors, t, &mut rng, 10_000);
        prop_assert!(cert.value + 1e-9 >= brute, "certified {:?} below brute force {}", cert, brute);
        prop_assert!(cert.value <= 1.0 && cert.value >= 0.5 * priors[0].max(priors[1]));
    }

    #[test]
    fn tail_eps_m_decreasing(n_a in 200u64..5000, frac in 0.05f64..0.4, d1 in 0.001f64..0.02, dd in 0.001f64..0.02) {
        let counts = ProtocolCounts::balanced(2 * n_a, n_a, n_a / 2, n_a / 10, 0);
        let n_m = (frac * n_a as f64) as u64;
        let p_m = n_m as f64 / n_a as f64;
        prop_assume!(d1 + dd < p_m);
        let e1 = tail_eps_m(&counts, 0, d1, 0.2, n_m).unwrap().eps;
        let e2 = tail_eps_m(&counts, 0, d1 + dd, 0.2, n_m).unwrap().eps;
        prop_assert!(e2 < e1);
        let bigger = ProtocolCounts::balanced(4 * n_a, 2 * n_a, n_a, n_a / 5, 0);
        let e3 = tail_eps_m(&bigger, 0, d1, 0.2, 2 * n_m).unwrap().eps;
        prop_assert!(e3 < e1);
    }

    #[test]
    fn pi_chain_monotone(
        nu in 0.0f64..1e-6, dnu in 1e-9f64..1e-6, dt in 0.0f64..1e-6, ddt in 1e-9f64..1e-6, p in 0.0f64..0.1,
    ) {
        let base = PiInputs {
            n_l: 20_000,
            n_l_basis: [10_000, 10_000],
            p_l_max: p,
            delta_k: 0.0,
            mu_l: 1e-9,
            nu_l: nu,
            dt_bar: dt,
            eps_p_log2: f64::NEG_INFINITY,
            q: [0.5, 0.5],
            c: 1e5,
        };
        let r = pi_chain(&base).r_l_minus;
        let more_nu = pi_chain(&PiInputs { nu_l: nu + dnu, ..base }).r_l_minus;
        let more_dt = pi_chain(&PiInputs { dt_bar: dt + ddt, ..base }).r_l_minus;
        let more_err = pi_chain(&PiInputs { p_l_max: p + 0.01, ..base }).r_l_minus;
        prop_assert!(more_nu <= r && more_dt <= r && more_err <= r);
    }

    #[test]
    fn zero_key_soundness(n_c in 0u64..200_000, test_frac in 0.01f64..0.5, qber in 0.0f64..0.5, c in 2.0f64..1e8) {
        let n_t = ((n_c as f64) * test_frac) as u64;
        let n_t_e = ((n_t as f64) * qber) as u64;
        let counts = ProtocolCounts::balanced(4 * n_c + 10, 2 * n_c + 5, n_c, n_t, n_t_e);
        let params = BoundParams { c, ..BoundParams::for_counts(&counts, 1e-10) };
        let r = key_bound(&counts, &params, &CharacterizedSource::ideal_bb84()).unwrap();
        if r.log2_pi_l.is_none() || r.r_e_k <= 0.0 {
            prop_assert_eq!(r.m, 0);
        }
        prop_assert!(r.leakage_bound >= 0.0);
        prop_assert!((r.m as f64) <= r.r_e_k.max(0.0));
        for v in [r.p_l_max, r.eps_t_e, r.mu_l, r.nu_l, r.dt_bar, r.eps_p, r.p_as] {
            prop_assert!((0.0..=1.0 + 1e-12).contains(&v), "{:?}", r);
        }
    }
}

fn tilted_source(angle: f64) -> CharacterizedSource {
    // Basis 1 rotated towards the Z axis by `angle`, which makes the
    // basis-averaged states differ.
    let theta = std::f64::consts::FRAC_PI_2 - angle;
    let bloch = [[0.0, 0.0, 1.0], [0.0, 0.0, -1.0], [theta.sin(), 0.0, theta.cos()], [-theta.sin(), 0.0, -theta.cos()]];
    let states = bloch.map(bb84_core::qmath::qubit_from_bloch);
    let spec = SourceSpec::new(states, [0.25; 4]).unwrap();
    let dec = decompose(&spec, 0.25, None).unwrap();
    CharacterizedSource::new(spec, dec, &QubitStrategy::Canonical).unwrap()
}

#[test]
fn key_length_nonincreasing_in_source_asymmetry() {
    let counts = ProtocolCounts::balanced(4_000_000, 1_000_000, 500_000, 50_000, 500);
    let params = BoundParams::for_counts(&counts, 1e-10);
    let mut last = (u64::MAX, 0.0);
    for angle in [0.0, 1e-5, 1e-4, 1e-3, 1e-2] {
        let src = tilted_source(angle);
        let r = key_bound(&counts, &params, &src).unwrap();
        assert!(r.m <= last.0, "angle {angle}: m = {} after {}", r.m, last.0);
        assert!(r.dt_bar >= last.1 - 1e-15);
        last = (r.m, r.dt_bar);
    }
}

#[test]
fn key_length_nonincreasing_in_qber_grid() {
    let src = CharacterizedSource::ideal_bb84();
    for n_t in [2_000u64, 20_000] {
        let mut last = u64::MAX;
        for permille in (0..=120).step_by(5) {
            let counts = ProtocolCounts::balanced(2_000_000, 400_000, 200_000, n_t, n_t * permille / 1000);
            let params = BoundParams::for_counts(&counts, 1e-10);
            let m = key_bound(&counts, &params, &src).unwrap().m;
            assert!(m <= last);
            last = m;
        }
    }
}
