//! Verification oracles: each compares a computed bound against an
//! independent evaluation (brute force, enumeration or simulation).

use bb84_core::bounds::{binomial_sandwich, key_bound, s_m_sup, BoundParams};
use bb84_core::extract::{leftover_oracle, universality_check, JointDistribution};
use bb84_core::protocol::{run_sessions, Detector, EveStrategy, ProtocolConfig};
use bb84_core::qmath::{fidelity, random, trace_distance, CMat};
use bb84_core::seed;
use bb84_core::source::{CharacterizedSource, Polarization};
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{BoundsBlock, RunConfig};
use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleResult {
    pub name: String,
    pub passed: bool,
    /// The checked quantity (worst case over the oracle's instances).
    pub measured: f64,
    /// What it is compared against.
    pub bound: f64,
    pub detail: String,
}

pub const COLUMNS: &[&str] = &["name", "passed", "measured", "bound", "detail"];

impl OracleResult {
    fn new(name: &str, passed: bool, measured: f64, bound: f64, detail: String) -> Self {
        OracleResult { name: name.to_string(), passed, measured, bound, detail }
    }

    fn error(name: &str, e: CliError) -> Self {
        OracleResult::new(name, false, f64::NAN, f64::NAN, e.to_string())
    }
}

/// `1/2 (1 + d_T)` against the best of `povms` random rank-one projective
/// measurements, for `pairs` random qubit pairs with equal priors.
pub fn helstrom(pairs: usize, povms: usize, seed: u64, tol: f64) -> OracleResult {
    let per_pair: Vec<(f64, f64)> = (0..pairs as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed, "helstrom", i);
            let s0 = random::mixed_or_pure(&mut rng, 2);
            let s1 = random::mixed_or_pure(&mut rng, 2);
            let closed = 0.5 * (1.0 + trace_distance(&s0, &s1).expect("same dimension"));
            let diff = s0.mat().sub(s1.mat());
            let brute = (0..povms)
                .map(|_| {
                    let p = CMat::outer(&random::ket(&mut rng, 2));
                    0.5 * (1.0 + diff.trace_product(&p))
                })
                .fold(0.0, f64::max);
            (closed, brute)
        })
        .collect();
    let worst_gap = per_pair.iter().map(|(c, b)| (c - b).abs()).fold(0.0, f64::max);
    let worst_excess = per_pair.iter().map(|(c, b)| b - c).fold(f64::NEG_INFINITY, f64::max);
    OracleResult::new(
        "helstrom",
        worst_gap <= 1e-3 && worst_excess <= tol,
        worst_gap,
        1e-3,
        format!("{pairs} pairs x {povms} projective measurements; max brute - closed = {worst_excess:.3e}"),
    )
}

/// `d_T <= sqrt(1 - F^2)` on random density pairs of dimension 2 to 4.
pub fn distance(pairs: usize, seed: u64, tol: f64) -> OracleResult {
    let excess = (0..pairs as u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = seed::rng(seed, "distance", i);
            let dim = rng.gen_range(2..=4);
            let a = random::mixed_or_pure(&mut rng, dim);
            let b = if rng.gen_bool(0.2) { a.clone() } else { random::mixed_or_pure(&mut rng, dim) };
            let d = trace_distance(&a, &b).expect("same dimension");
            let f = fidelity(&a, &b).expect("same dimension");
            d - (1.0 - f * f).max(0.0).sqrt()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .fold(f64::NEG_INFINITY, f64::max);
    OracleResult::new("distance", excess <= tol, excess, tol, format!("{pairs} pairs, max d_T - sqrt(1 - F^2)"))
}

/// `sum_{i<=k} C(n,i) j^i (10-j)^(n-i) / 10^n` in exact integer arithmetic.
pub fn binomial_cdf_rational(n: u32, k: u32, j: u32) -> f64 {
    let mut row = vec![1u128];
    for _ in 0..n {
        let mut next = vec![1u128; row.len() + 1];
        for i in 1..row.len() {
            next[i] = row[i - 1] + row[i];
        }
        row = next;
    }
    let num: u128 = (0..=k).map(|i| row[i as usize] * (j as u128).pow(i) * ((10 - j) as u128).pow(n - i)).sum();
    num as f64 / 10f64.powi(n as i32)
}

/// The entropy sandwich weighted by `q^k (1-q)^(n-k)`, which holds for
/// `k/n <= q`, and the log-space cumulative sum against exact rationals.
pub fn binomial(tol: f64) -> OracleResult {
    let mut worst_violation: f64 = f64::NEG_INFINITY;
    let mut worst_rel: f64 = 0.0;
    let mut checked = 0;
    for n in 1..=30u64 {
        for j in 1..=9u32 {
            let q = j as f64 / 10.0;
            for k in 0..=n {
                let s = binomial_sandwich(n, k, q).expect("valid arguments");
                if n <= 20 {
                    let exact = binomial_cdf_rational(n as u32, k as u32, j);
                    worst_rel = worst_rel.max(((s.exact - exact) / exact).abs());
                }
                if (k as f64) <= q * n as f64 {
                    let w = (k as f64 * q.ln() + (n - k) as f64 * (1.0 - q).ln()).exp();
                    let lo = s.lower * w - s.exact;
                    let hi = s.exact - s.upper * w;
                    worst_violation = worst_violation.max(lo.max(hi) / s.exact);
                    checked += 1;
                }
            }
        }
    }
    OracleResult::new(
        "binomial",
        worst_violation <= tol && worst_rel <= 1e-12,
        worst_violation,
        tol,
        format!("{checked} weighted sandwich cases; log-space vs rational max relative error {worst_rel:.3e}"),
    )
}

/// Realization of the Gram matrix by the purified columns and purity of
/// the purified states.
pub fn gram(tol: f64) -> OracleResult {
    let mut worst: f64 = 0.0;
    let mut lines = Vec::new();
    let sources: Vec<(&str, Result<CharacterizedSource, CliError>)> = vec![
        ("ideal", Ok(CharacterizedSource::ideal_bb84())),
        ("coherent 0.1", CharacterizedSource::coherent(0.1, Polarization::bb84()).map_err(CliError::from)),
        ("coherent 0.5", CharacterizedSource::coherent(0.5, Polarization::bb84()).map_err(CliError::from)),
    ];
    for (name, src) in sources {
        let src = match src {
            Ok(s) => s,
            Err(e) => return OracleResult::error("gram", e),
        };
        let pur = &src.purification;
        let realization = pur.realization_error();
        let purity = pur.pure_states.iter().map(|s| (s.purity() - 1.0).abs()).fold(0.0, f64::max);
        worst = worst.max(realization).max(purity);
        lines.push(format!("{name}: overlap {realization:.2e}, purity {purity:.2e}"));
    }
    OracleResult::new("gram", worst <= tol, worst, tol, lines.join("; "))
}

/// Random joint distribution of an `n`-bit key and a side variable.
pub fn random_joint<R: Rng + ?Sized>(rng: &mut R, n: usize) -> JointDistribution {
    let z_count = rng.gen_range(1..=8usize);
    let spread: f64 = rng.gen_range(0.0..6.0);
    let support_bits = rng.gen_range(0..=n);
    let mut p: Vec<Vec<f64>> = (0..z_count)
        .map(|_| {
            let pz: f64 = rng.gen_range(0.05..1.0);
            let mask: usize = rng.gen_range(0..1usize << n);
            let keep = (1usize << n) - (1usize << support_bits);
            (0..1usize << n)
                .map(|x| if (x ^ mask) & keep != 0 { 0.0 } else { pz * (spread * (rng.gen::<f64>() - 0.5)).exp() })
                .collect()
        })
        .collect();
    let total: f64 = p.iter().flatten().sum();
    p.iter_mut().flatten().for_each(|v| *v /= total);
    JointDistribution::new(n, p).expect("normalized by construction")
}

/// Leftover-hash leakage on random small distributions, worst margin
/// `measured - bound - sampling error`.
pub fn leftover(distributions: usize, hashes: usize, seed: u64, sigmas: f64) -> OracleResult {
    let margins: Vec<Result<(f64, usize, usize), CliError>> = (0..distributions as u64)
        .into_par_iter()
        .map(|d| {
            let mut rng = seed::rng(seed, "joint", d);
            let n = rng.gen_range(1..=12usize);
            let m = rng.gen_range(1..=n.min(4));
            let joint = random_joint(&mut rng, n);
            let c = leftover_oracle(&joint, m, None, hashes, seed::derive(seed, "hashes", d))?;
            Ok((c.measured - c.bound - c.mc_error * sigmas / 3.0, n, m))
        })
        .collect();
    let mut worst = f64::NEG_INFINITY;
    for r in margins {
        match r {
            Ok((margin, _, _)) => worst = worst.max(margin),
            Err(e) => return OracleResult::error("leftover", e),
        }
    }
    OracleResult::new(
        "leftover",
        worst <= 0.0,
        worst,
        0.0,
        format!("{distributions} distributions x {hashes} hashes; max I(S:Z,G) - bound - error"),
    )
}

pub const UNIVERSALITY_SIZES: [(usize, usize); 3] = [(8, 4), (16, 8), (24, 16)];

pub fn universality(trials: u64, seed: u64, sigmas: f64) -> OracleResult {
    let mut worst = f64::NEG_INFINITY;
    let mut lines = Vec::new();
    for (n, m) in UNIVERSALITY_SIZES {
        let est = match universality_check(n, m, trials, seed::derive(seed, "universality", n as u64)) {
            Ok(e) => e,
            Err(e) => return OracleResult::error("universality", e.into()),
        };
        worst = worst.max((est.rate - est.ideal) / est.sigma);
        lines.push(format!("({n},{m}): {}/{} vs 2^-{m}", est.collisions, est.trials));
    }
    OracleResult::new("universality", worst <= sigmas, worst, sigmas, lines.join("; "))
}

/// Fraction of sessions whose true error rate on `L` exceeds `p_L_max`,
/// against the mean `mu_L` plus `sigmas` binomial standard errors.
pub fn coverage(
    sessions: u64,
    n: u64,
    depolarizing: f64,
    seed: u64,
    sigmas: f64,
    bounds: &BoundsBlock,
) -> OracleResult {
    let src = CharacterizedSource::ideal_bb84();
    let cfg = ProtocolConfig {
        n,
        bob_basis_probs: [0.5, 0.5],
        detector: Detector::IDEAL,
        eve: EveStrategy::Passive { loss: 0.0, depolarizing },
        test_fraction: 0.1,
        seed,
    };
    let outcome = run_sessions(&cfg, &src, sessions).map_err(CliError::from).and_then(|records| {
        records
            .par_iter()
            .map(|r| {
                let params: BoundParams = bounds.params(&r.counts)?;
                let report = key_bound(&r.counts, &params, &src)?;
                Ok((r.error_rate_l() > report.p_l_max, report.mu_l))
            })
            .collect::<Result<Vec<_>, CliError>>()
    });
    let results = match outcome {
        Ok(r) => r,
        Err(e) => return OracleResult::error("coverage", e),
    };
    let s = results.len().max(1) as f64;
    let freq = results.iter().filter(|(x, _)| *x).count() as f64 / s;
    let mu = results.iter().map(|(_, m)| *m).sum::<f64>() / s;
    let allowed = mu + sigmas * (mu * (1.0 - mu) / s).sqrt();
    OracleResult::new(
        "coverage",
        freq <= allowed,
        freq,
        allowed,
        format!("{sessions} sessions, N = {n}, depolarizing {depolarizing}; mean mu_L {mu:.3e}"),
    )
}

/// Eve's guessing accuracy on `M` under the tag-exploiting attack against
/// the discrimination bound (or its override).
pub fn tag_exploit(sessions: u64, n: u64, mu: f64, seed: u64, sigmas: f64, s_m_override: Option<f64>) -> OracleResult {
    let src = match CharacterizedSource::coherent(mu, Polarization::bb84()) {
        Ok(s) => s,
        Err(e) => return OracleResult::error("tag_exploit", e.into()),
    };
    let bound = match s_m_override {
        Some(s) => s,
        None => {
            let per_basis = [0, 1].map(|a| s_m_sup(&src, a, 0.0).map(|b| b.value));
            match per_basis {
                [Ok(s0), Ok(s1)] => s0.max(s1),
                [Err(e), _] | [_, Err(e)] => return OracleResult::error("tag_exploit", e.into()),
            }
        }
    };
    let cfg = ProtocolConfig {
        n,
        bob_basis_probs: [0.5, 0.5],
        detector: Detector::IDEAL,
        eve: EveStrategy::TagExploit,
        test_fraction: 0.1,
        seed,
    };
    let records = match run_sessions(&cfg, &src, sessions) {
        Ok(r) => r,
        Err(e) => return OracleResult::error("tag_exploit", e.into()),
    };
    let (mut hits, mut total) = (0usize, 0usize);
    for r in &records {
        let (acc, size) = r.eve_accuracy_on_m();
        hits += (acc * size as f64).round() as usize;
        total += size;
    }
    let accuracy = if total == 0 { 0.0 } else { hits as f64 / total as f64 };
    let allowed = bound + sigmas * (bound * (1.0 - bound) / total.max(1) as f64).sqrt();
    OracleResult::new(
        "tag_exploit",
        accuracy <= allowed,
        accuracy,
        allowed,
        format!("{sessions} sessions, mu = {mu}, |M| = {total}, s_M = {bound}"),
    )
}

pub const ORACLES: [&str; 8] =
    ["helstrom", "distance", "binomial", "gram", "leftover", "universality", "coverage", "tag_exploit"];

/// Runs the oracle suite in a fixed order.
pub fn run_all(cfg: &RunConfig) -> Vec<OracleResult> {
    let v = &cfg.verify;
    let selected = |name: &str| v.only.as_ref().is_none_or(|only| only.iter().any(|o| o == name));
    let seed = |name: &str| seed::derive(cfg.seed, name, 0);
    let mut out = Vec::new();
    if let Some(unknown) = v.only.iter().flatten().find(|o| !ORACLES.contains(&o.as_str())) {
        out.push(OracleResult::new(unknown, false, f64::NAN, f64::NAN, "unknown oracle".into()));
    }
    for name in ORACLES.iter().copied().filter(|n| selected(n)) {
        out.push(match name {
            "helstrom" => helstrom(v.helstrom_pairs, v.helstrom_povms, seed(name), v.tolerance),
            "distance" => distance(v.distance_pairs, seed(name), v.tolerance),
            "binomial" => binomial(v.tolerance),
            "gram" => gram(v.tolerance),
            "leftover" => leftover(v.leftover_distributions, v.leftover_hashes, seed(name), v.sigmas),
            "universality" => universality(v.universality_trials, seed(name), v.sigmas),
            "coverage" => coverage(v.coverage_sessions, v.coverage_n, 0.05, seed(name), v.sigmas, &cfg.bounds),
            "tag_exploit" => {
                tag_exploit(v.tag_sessions, v.tag_n, v.tag_mu, seed(name), v.sigmas, cfg.bounds.s_m_override)
            }
            _ => unreachable!("filtered to known names"),
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rational_cdf_examples() {
        assert!((binomial_cdf_rational(10, 5, 5) - 0.623046875).abs() < 1e-15);
        assert_eq!(binomial_cdf_rational(7, 7, 3), 1.0);
        assert!((binomial_cdf_rational(1, 0, 1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn random_joint_is_normalized() {
        let mut rng = seed::rng(1, "t", 0);
        for n in 1..=8 {
            let j = random_joint(&mut rng, n);
            let total: f64 = j.p.iter().flatten().sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn cheap_oracles_pass() {
        assert!(gram(1e-9).passed);
        assert!(binomial(1e-9).passed);
        let d = distance(100, 3, 1e-9);
        assert!(d.passed, "{d:?}");
    }

    #[test]
    fn zero_tolerance_breaks_numeric_comparisons() {
        let d = distance(300, 3, 0.0);
        let g = gram(0.0);
        assert!(!d.passed || !g.passed);
    }
}
