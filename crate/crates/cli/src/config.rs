//! Run configuration: one TOML file with named blocks.

use bb84_core::bounds::{BasisCounts, BoundParams, ProtocolCounts};
use bb84_core::extract::ReconConfig;
use bb84_core::protocol::{Detector, EveStrategy, ProtocolConfig};
use bb84_core::qmath::{CMat, DensityOp, C64};
use bb84_core::source::{coherent_source, decompose, CharacterizedSource, Polarization, QubitStrategy, SourceSpec};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Rate,
    Simulate,
    Sweep,
    Verify,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Jsonl,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub command: Option<Command>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub source: SourceConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub protocol: Option<ProtocolBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub counts: Option<CountsBlock>,
    #[serde(default)]
    pub bounds: BoundsBlock,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepBlock>,
    #[serde(default)]
    pub verify: VerifyBlock,
    #[serde(default)]
    pub output: OutputBlock,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum SourceConfig {
    #[default]
    IdealBb84,
    /// BB84 states mixed with white noise of weight `noise`.
    NoisyBb84 { noise: f64 },
    /// Phase-randomized coherent pulses with mean photon number `mu`.
    Coherent {
        mu: f64,
        /// `(theta, phi)` Bloch angles for H, V, D, A.
        #[serde(default, skip_serializing_if = "Option::is_none")]
        angles: Option<[[f64; 2]; 4]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        probs: Option<[f64; 4]>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        cutoff: Option<usize>,
    },
    /// Density matrices as rows of `[re, im]` pairs, ordered (a, x) =
    /// (0,0), (0,1), (1,0), (1,1).
    Explicit {
        states: Vec<Vec<Vec<[f64; 2]>>>,
        probs: [f64; 4],
        p0: f64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        tag_states: Option<Vec<Vec<Vec<[f64; 2]>>>>,
        #[serde(default)]
        qubit_model: QubitModelChoice,
    },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QubitModelChoice {
    Canonical,
    #[default]
    DominantSubspace,
}

fn matrix(rows: &[Vec<[f64; 2]>]) -> Result<DensityOp, CliError> {
    let dim = rows.len();
    if dim == 0 || rows.iter().any(|r| r.len() != dim) {
        return Err(CliError::Config("explicit states must be square matrices".into()));
    }
    let mut m = CMat::zeros(dim, dim);
    for (i, row) in rows.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            m.0[(i, j)] = C64::new(v[0], v[1]);
        }
    }
    DensityOp::from_clipped(m, 1e-8).map_err(|e| CliError::Config(format!("explicit state: {e}")))
}

fn four_states(list: &[Vec<Vec<[f64; 2]>>]) -> Result<[DensityOp; 4], CliError> {
    if list.len() != 4 {
        return Err(CliError::Config("exactly four states are required".into()));
    }
    let v = list.iter().map(|s| matrix(s)).collect::<Result<Vec<_>, _>>()?;
    Ok([v[0].clone(), v[1].clone(), v[2].clone(), v[3].clone()])
}

impl SourceConfig {
    pub fn build(&self) -> Result<CharacterizedSource, CliError> {
        let src = match self {
            SourceConfig::IdealBb84 => return Ok(CharacterizedSource::ideal_bb84()),
            SourceConfig::NoisyBb84 { noise } => {
                if !(0.0..1.0).contains(noise) {
                    return Err(CliError::Config("noise must lie in [0, 1)".into()));
                }
                let spec = SourceSpec::bb84_with_noise(*noise);
                let dec = decompose(&spec, spec.min_prob(), None)?;
                CharacterizedSource::new(spec, dec, &QubitStrategy::Canonical)
            }
            SourceConfig::Coherent { mu, angles, probs, cutoff } => {
                let angles = match angles {
                    Some(a) => a.map(|[theta, phi]| Polarization { theta, phi }),
                    None => Polarization::bb84(),
                };
                let (spec, dec) = coherent_source(*mu, *cutoff, angles, probs.unwrap_or([0.25; 4]))?;
                CharacterizedSource::new(spec, dec, &QubitStrategy::Canonical)
            }
            SourceConfig::Explicit { states, probs, p0, tag_states, qubit_model } => {
                let spec = SourceSpec::new(four_states(states)?, *probs)?;
                let tags = tag_states.as_deref().map(four_states).transpose()?;
                let dec = decompose(&spec, *p0, tags.as_ref())?;
                let strategy = match qubit_model {
                    QubitModelChoice::Canonical => QubitStrategy::Canonical,
                    QubitModelChoice::DominantSubspace => QubitStrategy::DominantSubspace,
                };
                CharacterizedSource::new(spec, dec, &strategy)
            }
        };
        Ok(src?)
    }

    /// Replaces the mean photon number of a coherent source.
    pub fn with_mu(&self, value: f64) -> Result<Self, CliError> {
        match self {
            SourceConfig::Coherent { angles, probs, cutoff, .. } => {
                Ok(SourceConfig::Coherent { mu: value, angles: *angles, probs: *probs, cutoff: *cutoff })
            }
            _ => Err(CliError::Config("sweeping mu needs a coherent source".into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolBlock {
    pub n: u64,
    #[serde(default = "one")]
    pub sessions: u64,
    #[serde(default = "half")]
    pub bob_basis_probs: [f64; 2],
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    #[serde(default = "ideal_detector")]
    pub detector: Detector,
    #[serde(default)]
    pub eve: EveStrategy,
    /// Reconcile and hash each session's sifted key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon: Option<ReconConfig>,
}

fn one() -> u64 {
    1
}

fn half() -> [f64; 2] {
    [0.5, 0.5]
}

fn default_test_fraction() -> f64 {
    0.1
}

fn ideal_detector() -> Detector {
    Detector::IDEAL
}

impl ProtocolBlock {
    pub fn protocol_config(&self, seed: u64) -> ProtocolConfig {
        ProtocolConfig {
            n: self.n,
            bob_basis_probs: self.bob_basis_probs,
            detector: self.detector,
            eve: self.eve,
            test_fraction: self.test_fraction,
            seed,
        }
    }
}

/// Observed counts for `rate`. Without `basis` every set is split evenly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CountsBlock {
    pub n: u64,
    pub n_d: u64,
    pub n_c: u64,
    pub n_t: u64,
    pub n_t_e: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisCounts>,
}

impl CountsBlock {
    pub fn counts(&self, collapse_bob_mode: bool) -> Result<ProtocolCounts, CliError> {
        let mut c = ProtocolCounts::balanced(self.n, self.n_d, self.n_c, self.n_t, self.n_t_e);
        if let Some(b) = self.basis {
            c.basis = b;
        }
        c.collapse_bob_mode = collapse_bob_mode;
        c.validate()?;
        Ok(c)
    }
}

/// Bound parameters; unset slacks follow `delta = 0.3 sqrt(ln(1/eps)/n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundsBlock {
    #[serde(default = "default_eps")]
    pub eps: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_m: Option<[f64; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_p: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta_k: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ec_efficiency: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub account_reconciliation: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_leakage: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hash_term_target: Option<f64>,
    #[serde(default)]
    pub collapse_bob_mode: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub s_m_override: Option<f64>,
}

fn default_eps() -> f64 {
    1e-10
}

impl Default for BoundsBlock {
    fn default() -> Self {
        BoundsBlock {
            eps: default_eps(),
            delta_m: None,
            delta_p: None,
            delta_k: None,
            c: None,
            ec_efficiency: None,
            account_reconciliation: None,
            target_leakage: None,
            hash_term_target: None,
            collapse_bob_mode: false,
            s_m_override: None,
        }
    }
}

impl BoundsBlock {
    pub fn params(&self, counts: &ProtocolCounts) -> Result<BoundParams, CliError> {
        if !(self.eps > 0.0 && self.eps < 1.0) {
            return Err(CliError::Config("eps must lie in (0, 1)".into()));
        }
        let d = BoundParams::for_counts(counts, self.eps);
        let p = BoundParams {
            delta_m: self.delta_m.unwrap_or(d.delta_m),
            delta_p: self.delta_p.unwrap_or(d.delta_p),
            delta_k: self.delta_k.unwrap_or(d.delta_k),
            c: self.c.unwrap_or(d.c),
            ec_efficiency: self.ec_efficiency.unwrap_or(d.ec_efficiency),
            account_reconciliation: self.account_reconciliation.unwrap_or(d.account_reconciliation),
            target_leakage: self.target_leakage.or(d.target_leakage),
            hash_term_target: self.hash_term_target.unwrap_or(d.hash_term_target),
            s_m_override: self.s_m_override,
        };
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepParameter {
    C,
    DeltaP,
    DeltaK,
    Eps,
    Mu,
    /// Test-set error fraction; needs a counts block.
    Qber,
    Loss,
    Depolarizing,
    Efficiency,
    N,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepBlock {
    pub parameter: SweepParameter,
    pub values: Vec<f64>,
}

/// Sizes and tolerances of the verification oracles.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyBlock {
    /// Allowed slack in deterministic numeric comparisons.
    pub tolerance: f64,
    /// Standard errors allowed in Monte-Carlo comparisons.
    pub sigmas: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub only: Option<Vec<String>>,
    pub helstrom_pairs: usize,
    pub helstrom_povms: usize,
    pub distance_pairs: usize,
    pub leftover_distributions: usize,
    pub leftover_hashes: usize,
    pub universality_trials: u64,
    pub coverage_sessions: u64,
    pub coverage_n: u64,
    pub tag_sessions: u64,
    pub tag_n: u64,
    pub tag_mu: f64,
}

impl Default for VerifyBlock {
    fn default() -> Self {
        VerifyBlock {
            tolerance: 1e-9,
            sigmas: 3.0,
            only: None,
            helstrom_pairs: 200,
            helstrom_povms: 10_000,
            distance_pairs: 1000,
            leftover_distributions: 100,
            leftover_hashes: 1000,
            universality_trials: 100_000,
            coverage_sessions: 200,
            coverage_n: 20_000,
            tag_sessions: 20,
            tag_n: 20_000,
            tag_mu: 0.5,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputBlock {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub format: Option<Format>,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String, CliError> {
        toml::to_string(self).map_err(|e| CliError::Config(e.to_string()))
    }

    /// Checks that the blocks `command` needs are present.
    pub fn check_blocks(&self, command: Command) -> Result<(), CliError> {
        let missing = |b: &str| Err(CliError::Config(format!("command {command:?} needs a [{b}] block")));
        match command {
            Command::Rate if self.counts.is_none() && self.protocol.is_none() => missing("counts] or [protocol"),
            Command::Simulate if self.protocol.is_none() => missing("protocol"),
            Command::Sweep if self.sweep.is_none() => missing("sweep"),
            Command::Sweep if self.counts.is_none() && self.protocol.is_none() => missing("counts] or [protocol"),
            _ => Ok(()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"
seed = 42

[source]
model = "coherent"
mu = 0.3

[protocol]
n = 100000
sessions = 4
detector = { efficiency = 0.2, dark_count = 1e-5 }
eve = { kind = "intercept_resend", basis = 1 }
recon = { mode = { mode = "parity_exchange", rounds = 6, initial_block = 16, verify_parities = 32 }, f = 1.1 }

[counts]
n = 1000000
n_d = 500000
n_c = 250000
n_t = 25000
n_t_e = 250

[bounds]
c = 1e7
delta_p = 0.01

[sweep]
parameter = "c"
values = [1e3, 1e5, 1e7]

[verify]
tolerance = 0.0
only = ["gram"]

[output]
format = "csv"
"#;

    #[test]
    fn round_trip_is_identity() {
        let cfg = RunConfig::parse(SAMPLE).unwrap();
        let again = RunConfig::parse(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(cfg, again);
        assert_eq!(cfg.seed, 42);
        assert_eq!(cfg.verify.sigmas, 3.0);
        assert_eq!(cfg.protocol.as_ref().unwrap().eve, EveStrategy::InterceptResend { basis: Some(1) });
    }

    #[test]
    fn explicit_source_round_trips_and_builds() {
        let text = r#"
[source]
model = "explicit"
probs = [0.25, 0.25, 0.25, 0.25]
p0 = 0.25
qubit_model = "canonical"
states = [
  [[[1.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]]],
  [[[0.0, 0.0], [0.0, 0.0]], [[0.0, 0.0], [1.0, 0.0]]],
  [[[0.5, 0.0], [0.5, 0.0]], [[0.5, 0.0], [0.5, 0.0]]],
  [[[0.5, 0.0], [-0.5, 0.0]], [[-0.5, 0.0], [0.5, 0.0]]],
]
"#;
        let cfg = RunConfig::parse(text).unwrap();
        assert_eq!(cfg, RunConfig::parse(&cfg.to_toml().unwrap()).unwrap());
        let src = cfg.source.build().unwrap();
        assert!(src.model.max_dist() < 1e-9);
    }

    #[test]
    fn unknown_fields_are_rejected() {
        assert!(RunConfig::parse("seed = 1\nsed = 2\n").is_err());
        assert!(RunConfig::parse("[source]\nmodel = \"laser\"\n").is_err());
    }

    #[test]
    fn missing_blocks_are_reported() {
        let cfg = RunConfig::parse("seed = 1\n").unwrap();
        assert!(cfg.check_blocks(Command::Simulate).is_err());
        assert!(cfg.check_blocks(Command::Verify).is_ok());
    }
}
