//! Classical post-processing: reconciliation with leakage accounting,
//! Toeplitz privacy amplification, and an exhaustive check of the
//! leftover-hash leakage bound on small explicit distributions.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bounds::binary_entropy;
use crate::seed;

#[derive(Debug, Error, PartialEq)]
pub enum ExtractError {
    #[error("length mismatch: expected {expected} bits, got {got}")]
    Length { expected: usize, got: usize },
    #[error("output length {m} exceeds input length {n}")]
    OutputTooLong { n: usize, m: usize },
    #[error("bits must be 0 or 1")]
    NotABit,
    #[error("invalid distribution: {0}")]
    Distribution(String),
    #[error("invalid reconciliation config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ExtractError>;

/// An `m x n` Toeplitz matrix over GF(2): `bits[..m]` is the first column
/// (top to bottom), `bits[m..]` the first row without its leading entry.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HashSpec {
    pub n: usize,
    pub m: usize,
    pub toeplitz_bits: Vec<u8>,
}

impl HashSpec {
    pub fn new(n: usize, m: usize, toeplitz_bits: Vec<u8>) -> Result<Self> {
        if m > n {
            return Err(ExtractError::OutputTooLong { n, m });
        }
        let expected = (n + m).saturating_sub(1);
        if toeplitz_bits.len() != expected {
            return Err(ExtractError::Length { expected, got: toeplitz_bits.len() });
        }
        check_bits(&toeplitz_bits)?;
        Ok(Self { n, m, toeplitz_bits })
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R, n: usize, m: usize) -> Result<Self> {
        let bits = (0..(n + m).saturating_sub(1)).map(|_| rng.gen_range(0..2u8)).collect();
        Self::new(n, m, bits)
    }

    /// Matrix entry `T[i][j]`.
    pub fn entry(&self, i: usize, j: usize) -> u8 {
        if i >= j {
            self.toeplitz_bits[i - j]
        } else {
            self.toeplitz_bits[self.m + j - i - 1]
        }
    }

    /// Rows as bit masks (bit `j` is column `j`); requires `n <= 64`.
    fn row_masks(&self) -> Vec<u64> {
        debug_assert!(self.n <= 64);
        (0..self.m).map(|i| (0..self.n).fold(0u64, |acc, j| acc | (u64::from(self.entry(i, j)) << j))).collect()
    }

    pub fn to_hex(&self) -> String {
        bits_to_hex(&self.toeplitz_bits)
    }
}

fn check_bits(bits: &[u8]) -> Result<()> {
    if bits.iter().any(|&b| b > 1) {
        return Err(ExtractError::NotABit);
    }
    Ok(())
}

fn pack(bits: impl Iterator<Item = u8>) -> Vec<u64> {
    let mut words = Vec::new();
    for (i, b) in bits.enumerate() {
        if i % 64 == 0 {
            words.push(0);
        }
        *words.last_mut().expect("pushed") |= u64::from(b) << (i % 64);
    }
    words
}

/// 64 bits of `words` starting at bit `start`.
fn window(words: &[u64], start: usize) -> u64 {
    let (w, s) = (start / 64, start % 64);
    let lo = words.get(w).copied().unwrap_or(0) >> s;
    let hi = if s == 0 { 0 } else { words.get(w + 1).copied().unwrap_or(0) << (64 - s) };
    lo | hi
}

/// `T x` over GF(2).
pub fn toeplitz_hash(spec: &HashSpec, x: &[u8]) -> Result<Vec<u8>> {
    let (n, m) = (spec.n, spec.m);
    if x.len() != n {
        return Err(ExtractError::Length { expected: n, got: x.len() });
    }
    check_bits(x)?;
    if m == 0 {
        return Ok(Vec::new());
    }
    // T[i][j] = u[i - j + n - 1], so output i is the dot product of
    // u[i .. i + n] with x reversed.
    let u = pack((0..n + m - 1).map(|k| spec.entry(k.saturating_sub(n - 1), (n - 1).saturating_sub(k))));
    let x_rev = pack(x.iter().rev().copied());
    Ok((0..m)
        .map(|i| {
            let ones: u32 = x_rev.iter().enumerate().map(|(w, xw)| (window(&u, i + 64 * w) & xw).count_ones()).sum();
            (ones % 2) as u8
        })
        .collect())
}

/// Packs bits most-significant first into lowercase hex, zero-padding the
/// final nibble.
pub fn bits_to_hex(bits: &[u8]) -> String {
    bits.chunks(4)
        .map(|chunk| {
            let v = chunk.iter().enumerate().fold(0u32, |acc, (i, &b)| acc | (u32::from(b) << (3 - i)));
            char::from_digit(v, 16).expect("nibble")
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CollisionEstimate {
    pub trials: u64,
    pub collisions: u64,
    pub rate: f64,
    /// `2^-m`.
    pub ideal: f64,
    /// Binomial standard error at the ideal rate.
    pub sigma: f64,
}

impl CollisionEstimate {
    pub fn within(&self, k_sigma: f64) -> bool {
        self.rate <= self.ideal + k_sigma * self.sigma
    }
}

/// Monte-Carlo collision rate `Pr[g(x) = g(x')]` over random Toeplitz `g`
/// and random distinct `x, x'`.
pub fn universality_check(n: usize, m: usize, trials: u64, seed: u64) -> Result<CollisionEstimate> {
    if m > n {
        return Err(ExtractError::OutputTooLong { n, m });
    }
    if n == 0 || n > 63 {
        return Err(ExtractError::Config("universality check needs 1 <= n <= 63".into()));
    }
    const CHUNKS: u64 = 64;
    let full = (1u64 << n) - 1;
    let collisions: u64 = (0..CHUNKS)
        .into_par_iter()
        .map(|c| {
            let mut rng = seed::rng(seed, "universality", c);
            let count = trials / CHUNKS + u64::from(c < trials % CHUNKS);
            let mut hits = 0;
            for _ in 0..count {
                let spec = HashSpec::random(&mut rng, n, m).expect("m <= n");
                let x = rng.gen::<u64>() & full;
                let mut x2 = rng.gen::<u64>() & full;
                while x2 == x {
                    x2 = rng.gen::<u64>() & full;
                }
                let diff = x ^ x2;
                if spec.row_masks().iter().all(|r| (r & diff).count_ones().is_multiple_of(2)) {
                    hits += 1;
                }
            }
            hits
        })
        .sum();
    let ideal = 0.5f64.powi(m as i32);
    Ok(CollisionEstimate {
        trials,
        collisions,
        rate: collisions as f64 / trials.max(1) as f64,
        ideal,
        sigma: (ideal * (1.0 - ideal) / trials.max(1) as f64).sqrt(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ReconMode {
    /// Bob is handed `x^K`; `f n_K h(QBER)` bits are charged.
    Oracle,
    /// Binary-search parity exchange over shuffled blocks, then
    /// `verify_parities` random-subset parity checks.
    ParityExchange { rounds: u32, initial_block: usize, verify_parities: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReconConfig {
    pub mode: ReconMode,
    pub f: f64,
}

impl ReconConfig {
    pub fn oracle(f: f64) -> Self {
        Self { mode: ReconMode::Oracle, f }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.f >= 1.0) {
            return Err(ExtractError::Config("f must be at least 1".into()));
        }
        if let ReconMode::ParityExchange { initial_block, .. } = self.mode {
            if initial_block == 0 {
                return Err(ExtractError::Config("initial_block must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Reconciliation {
    pub corrected: Vec<u8>,
    pub leaked_bits: f64,
    /// False when a verification parity still disagrees.
    pub converged: bool,
    /// Disagreements left with `x` (known only to the simulator).
    pub residual_errors: usize,
}

/// Corrects Bob's `y` towards Alice's `x` and reports the leakage.
pub fn reconcile<R: Rng + ?Sized>(x: &[u8], y: &[u8], cfg: &ReconConfig, rng: &mut R) -> Result<Reconciliation> {
    cfg.validate()?;
    if x.len() != y.len() {
        return Err(ExtractError::Length { expected: x.len(), got: y.len() });
    }
    check_bits(x)?;
    check_bits(y)?;
    let n = x.len();
    match cfg.mode {
        ReconMode::Oracle => {
            let errors = x.iter().zip(y).filter(|(a, b)| a != b).count();
            let qber = if n == 0 { 0.0 } else { errors as f64 / n as f64 };
            Ok(Reconciliation {
                corrected: x.to_vec(),
                leaked_bits: cfg.f * n as f64 * binary_entropy(qber).expect("qber is a probability"),
                converged: true,
                residual_errors: 0,
            })
        }
        ReconMode::ParityExchange { rounds, initial_block, verify_parities } => {
            let mut z = y.to_vec();
            let mut leaked = 0u64;
            let mut order: Vec<usize> = (0..n).collect();
            let parity = |s: &[u8], idx: &[usize]| idx.iter().fold(0u8, |p, &i| p ^ s[i]);
            for round in 0..rounds {
                let block = initial_block.saturating_mul(1 << round.min(20)).min(n.max(1));
                order.shuffle(rng);
                for chunk in order.chunks(block) {
                    leaked += 1;
                    if parity(x, chunk) == parity(&z, chunk) {
                        continue;
                    }
                    let mut span = chunk;
                    while span.len() > 1 {
                        let (left, right) = span.split_at(span.len() / 2);
                        leaked += 1;
                        span = if parity(x, left) != parity(&z, left) { left } else { right };
                    }
                    z[span[0]] ^= 1;
                }
            }
            let mut converged = true;
            for _ in 0..verify_parities {
                let subset: Vec<usize> = (0..n).filter(|_| rng.gen::<bool>()).collect();
                leaked += 1;
                if parity(x, &subset) != parity(&z, &subset) {
                    converged = false;
                }
            }
            let residual_errors = x.iter().zip(&z).filter(|(a, b)| a != b).count();
            Ok(Reconciliation { corrected: z, leaked_bits: leaked as f64, converged, residual_errors })
        }
    }
}

/// Explicit joint distribution `p(x, z)` with `x` an `n`-bit string
/// (as an integer) and `z` in `0..z_count`, stored as `p[z][x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct JointDistribution {
    pub n: usize,
    pub p: Vec<Vec<f64>>,
}

impl JointDistribution {
    pub fn new(n: usize, p: Vec<Vec<f64>>) -> Result<Self> {
        if n == 0 || n > 16 {
            return Err(ExtractError::Distribution("need 1 <= n <= 16".into()));
        }
        if p.is_empty() || p.iter().any(|row| row.len() != 1 << n) {
            return Err(ExtractError::Distribution("each row needs 2^n entries".into()));
        }
        if p.iter().flatten().any(|v| !(*v >= 0.0)) {
            return Err(ExtractError::Distribution("negative or NaN probability".into()));
        }
        let total: f64 = p.iter().flatten().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ExtractError::Distribution(format!("total mass {total}")));
        }
        Ok(Self { n, p })
    }

    pub fn p_z(&self, z: usize) -> f64 {
        self.p[z].iter().sum()
    }

    /// `-log2 sum_x p(x|z)^2`.
    pub fn renyi2_given(&self, z: usize) -> f64 {
        let pz = self.p_z(z);
        -self.p[z].iter().map(|v| (v / pz).powi(2)).sum::<f64>().log2()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LeftoverCheck {
    /// `I(S : Z, G)` in bits with `G` uniform over the sampled hashes.
    pub measured: f64,
    /// Three standard errors of the hash-sample average.
    pub mc_error: f64,
    pub renyi_threshold: f64,
    /// `Pr_z[R(X|z) < threshold]`.
    pub eps: f64,
    pub l: f64,
    /// `n eps + 2^-l / ln 2`.
    pub bound: f64,
}

impl LeftoverCheck {
    pub fn holds(&self) -> bool {
        self.measured <= self.bound + self.mc_error
    }
}

fn entropy_bits(p: impl Iterator<Item = f64>) -> f64 {
    -p.filter(|&v| v > 0.0).map(|v| v * v.log2()).sum::<f64>()
}

/// Exact leakage of `S = g(X)` to `(Z, G)` against the leftover-hash bound.
/// `threshold` defaults to `min_z R(X|z)`, which makes `eps = 0`.
pub fn leftover_oracle(
    joint: &JointDistribution,
    m: usize,
    threshold: Option<f64>,
    hashes: usize,
    seed: u64,
) -> Result<LeftoverCheck> {
    let n = joint.n;
    if m > n {
        return Err(ExtractError::OutputTooLong { n, m });
    }
    let support: Vec<usize> = (0..joint.p.len()).filter(|&z| joint.p_z(z) > 0.0).collect();
    let min_r = support.iter().map(|&z| joint.renyi2_given(z)).fold(f64::INFINITY, f64::min);
    let threshold = threshold.unwrap_or(min_r);
    let eps: f64 = support.iter().filter(|&&z| joint.renyi2_given(z) < threshold).map(|&z| joint.p_z(z)).sum();
    let l = threshold - m as f64;
    let bound = n as f64 * eps + 2f64.powf(-l) / std::f64::consts::LN_2;

    let outputs = 1usize << m;
    let per_hash: Vec<(Vec<f64>, f64)> = (0..hashes as u64)
        .into_par_iter()
        .map(|h| {
            let mut rng = seed::rng(seed, "leftover", h);
            let masks = HashSpec::random(&mut rng, n, m).expect("m <= n").row_masks();
            let mut p_s = vec![0.0; outputs];
            let mut h_s_given_z = 0.0;
            let mut p_sz = vec![0.0; outputs];
            for &z in &support {
                p_sz.iter_mut().for_each(|v| *v = 0.0);
                for (x, &pxz) in joint.p[z].iter().enumerate() {
                    let s = masks
                        .iter()
                        .enumerate()
                        .fold(0usize, |acc, (i, r)| acc | ((((*r & x as u64).count_ones() & 1) as usize) << i));
                    p_sz[s] += pxz;
                }
                let pz = joint.p_z(z);
                h_s_given_z += pz * entropy_bits(p_sz.iter().map(|v| v / pz));
                p_s.iter_mut().zip(&p_sz).for_each(|(a, b)| *a += b);
            }
            (p_s, h_s_given_z)
        })
        .collect();
    let g = hashes.max(1) as f64;
    let mut mixture = vec![0.0; outputs];
    for (p_s, _) in &per_hash {
        mixture.iter_mut().zip(p_s).for_each(|(a, b)| *a += b / g);
    }
    let conditional: Vec<f64> = per_hash.iter().map(|(_, h)| *h).collect();
    let mean = conditional.iter().sum::<f64>() / g;
    let var = conditional.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / (g - 1.0).max(1.0);
    Ok(LeftoverCheck {
        measured: (entropy_bits(mixture.into_iter()) - mean).max(0.0),
        mc_error: 3.0 * (var / g).sqrt(),
        renyi_threshold: threshold,
        eps,
        l,
        bound,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn hand_computed_toeplitz_product() {
        // T = [[1 1 1 0], [0 1 1 1]]
        let spec = HashSpec::new(4, 2, vec![1, 0, 1, 1, 0]).unwrap();
        let rows: Vec<Vec<u8>> = (0..2).map(|i| (0..4).map(|j| spec.entry(i, j)).collect()).collect();
        assert_eq!(rows, vec![vec![1, 1, 1, 0], vec![0, 1, 1, 1]]);
        assert_eq!(toeplitz_hash(&spec, &[1, 0, 1, 0]).unwrap(), vec![0, 1]);
    }

    #[test]
    fn trivial_hashes() {
        let spec = HashSpec::random(&mut rng(1), 10, 4).unwrap();
        assert_eq!(toeplitz_hash(&spec, &[0; 10]).unwrap(), vec![0; 4]);
        let zero = HashSpec::new(10, 4, vec![0; 13]).unwrap();
        assert_eq!(toeplitz_hash(&zero, &[1, 0, 1, 1, 0, 1, 1, 1, 0, 1]).unwrap(), vec![0; 4]);
        assert!(toeplitz_hash(&spec, &[0; 9]).is_err());
        assert!(HashSpec::new(4, 5, vec![0; 8]).is_err());
        assert!(HashSpec::new(4, 2, vec![0; 4]).is_err());
    }

    #[test]
    fn packed_hash_matches_matrix_product() {
        let mut g = rng(8);
        for (n, m) in [(1, 1), (5, 0), (63, 10), (64, 64), (65, 3), (200, 130)] {
            let spec = HashSpec::random(&mut g, n, m).unwrap();
            let x: Vec<u8> = (0..n).map(|_| g.gen_range(0..2)).collect();
            let direct: Vec<u8> = (0..m).map(|i| (0..n).fold(0u8, |acc, j| acc ^ (spec.entry(i, j) & x[j]))).collect();
            assert_eq!(toeplitz_hash(&spec, &x).unwrap(), direct, "n={n} m={m}");
        }
    }

    #[test]
    fn hex_encoding() {
        assert_eq!(bits_to_hex(&[1, 0, 1, 1, 0]), "b0");
        assert_eq!(bits_to_hex(&[]), "");
        assert_eq!(bits_to_hex(&[1, 1, 1, 1, 0, 0, 0, 1]), "f1");
    }

    #[test]
    fn single_output_collision_rate() {
        let est = universality_check(6, 1, 20_000, 3).unwrap();
        assert!(est.within(3.0), "{est:?}");
    }

    #[test]
    fn oracle_leakage_closed_form() {
        let x = vec![0u8; 10_000];
        let zero = reconcile(&x, &x, &ReconConfig::oracle(1.0), &mut rng(0)).unwrap();
        assert_eq!(zero.leaked_bits, 0.0);
        let mut y = x.clone();
        for v in y.iter_mut().take(500) {
            *v = 1;
        }
        let r = reconcile(&x, &y, &ReconConfig::oracle(1.1), &mut rng(0)).unwrap();
        assert_eq!(r.corrected, x);
        assert_eq!(r.leaked_bits, 1.1 * 10_000.0 * binary_entropy(0.05).unwrap());
        assert!((r.leaked_bits - 3150.37).abs() < 0.01);
    }

    #[test]
    fn parity_exchange_corrects_sparse_errors() {
        let mut g = rng(9);
        let x: Vec<u8> = (0..4000).map(|_| g.gen_range(0..2)).collect();
        let y: Vec<u8> = x.iter().map(|&b| if g.gen::<f64>() < 0.02 { b ^ 1 } else { b }).collect();
        let cfg = ReconConfig {
            mode: ReconMode::ParityExchange { rounds: 8, initial_block: 36, verify_parities: 40 },
            f: 1.0,
        };
        let r = reconcile(&x, &y, &cfg, &mut g).unwrap();
        assert!(r.converged);
        assert_eq!(r.residual_errors, 0);
        assert!(r.leaked_bits > 4000.0 * binary_entropy(0.02).unwrap() * 0.9);
    }

    #[test]
    fn parity_exchange_flags_all_error_string() {
        let x = vec![0u8; 1000];
        let y = vec![1u8; 1000];
        let cfg = ReconConfig {
            mode: ReconMode::ParityExchange { rounds: 6, initial_block: 8, verify_parities: 40 },
            f: 1.0,
        };
        let r = reconcile(&x, &y, &cfg, &mut rng(2)).unwrap();
        assert!(!r.converged);
        assert!(r.residual_errors > 0);
    }

    #[test]
    fn leftover_deterministic_key_leaks_everything() {
        // x = z, so Eve knows x exactly.
        let n = 4;
        let p = (0..16).map(|z| (0..16).map(|x| if x == z { 1.0 / 16.0 } else { 0.0 }).collect()).collect();
        let joint = JointDistribution::new(n, p).unwrap();
        let c = leftover_oracle(&joint, 2, None, 200, 1).unwrap();
        assert_eq!(c.renyi_threshold, 0.0);
        assert!(c.measured > 1.9, "{c:?}");
        assert!(c.holds());
    }

    #[test]
    fn leftover_uniform_key_leaks_nothing() {
        let joint = JointDistribution::new(6, vec![vec![1.0 / 64.0; 64]; 1]).unwrap();
        let c = leftover_oracle(&joint, 3, None, 300, 4).unwrap();
        assert!((c.l - 3.0).abs() < 1e-12);
        assert!(c.measured <= 2f64.powf(-c.l) / std::f64::consts::LN_2 + c.mc_error);
    }

    #[test]
    fn leftover_eight_bits_renyi_six() {
        // For each z, x is uniform on 64 strings: R(X|z) = 6.
        let p: Vec<Vec<f64>> =
            (0..4).map(|z| (0..256).map(|x| if (x >> 6) == z { 1.0 / 256.0 } else { 0.0 }).collect()).collect();
        let joint = JointDistribution::new(8, p).unwrap();
        let c = leftover_oracle(&joint, 4, None, 1000, 5).unwrap();
        assert!((c.renyi_threshold - 6.0).abs() < 1e-12);
        assert!((c.bound - 0.25 / std::f64::consts::LN_2).abs() < 1e-12);
        assert!(c.holds(), "{c:?}");
    }
}
