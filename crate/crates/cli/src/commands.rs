//! The `rate`, `simulate` and `sweep` commands.

use bb84_core::bounds::{key_bound, ProtocolCounts, RateReport};
use bb84_core::extract::{bits_to_hex, reconcile, toeplitz_hash, HashSpec};
use bb84_core::protocol::{expected_counts, run_sessions, EveStrategy, SessionRecord};
use bb84_core::seed;
use bb84_core::source::CharacterizedSource;
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::config::{ProtocolBlock, RunConfig, SweepParameter};
use crate::output::Table;
use crate::CliError;

pub const RATE_COLUMNS: &[&str] = &["seed", "counts", "report", "non_finite"];

/// Counts from the `[counts]` block, or the expected counts of the
/// `[protocol]` block.
pub fn counts_for(cfg: &RunConfig, src: &CharacterizedSource) -> Result<ProtocolCounts, CliError> {
    let collapse = cfg.bounds.collapse_bob_mode;
    if let Some(c) = &cfg.counts {
        return c.counts(collapse);
    }
    let block = cfg.protocol.as_ref().ok_or_else(|| CliError::Config("need [counts] or [protocol]".into()))?;
    let mut counts = expected_counts(&block.protocol_config(cfg.seed), src)?;
    counts.collapse_bob_mode = collapse;
    Ok(counts)
}

fn report_value(report: &RateReport) -> (Value, Value) {
    let bad = report.non_finite_fields();
    let mut v = serde_json::to_value(report).expect("report serializes");
    if let Value::Object(map) = &mut v {
        for name in &bad {
            map.insert(name.to_string(), Value::Null);
        }
    }
    (v, Value::String(bad.join(";")))
}

pub fn rate_report(cfg: &RunConfig) -> Result<(ProtocolCounts, RateReport), CliError> {
    let src = cfg.source.build()?;
    let counts = counts_for(cfg, &src)?;
    let params = cfg.bounds.params(&counts)?;
    let report = key_bound(&counts, &params, &src)?;
    Ok((counts, report))
}

pub fn rate(cfg: &RunConfig) -> Result<Table, CliError> {
    cfg.check_blocks(crate::Command::Rate)?;
    let (counts, report) = rate_report(cfg)?;
    let (report, non_finite) = report_value(&report);
    let mut row = Map::new();
    row.insert("seed".into(), cfg.seed.into());
    row.insert("counts".into(), serde_json::to_value(counts).expect("counts serialize"));
    row.insert("report".into(), report);
    row.insert("non_finite".into(), non_finite);
    let mut t = Table::new(RATE_COLUMNS);
    t.push(row);
    Ok(t)
}

#[derive(Debug, Clone, Serialize)]
pub struct SessionSummary {
    pub index: u64,
    pub seed: u64,
    pub n: u64,
    pub n_d: u64,
    pub n_c: u64,
    pub n_t: u64,
    pub n_k: u64,
    pub n_t_e: u64,
    pub qber: f64,
    pub error_rate_k: f64,
    pub error_rate_l: f64,
    pub n_l: usize,
    pub n_m: usize,
    pub eve_accuracy_m: f64,
    pub p_l_max: f64,
    pub mu_l: f64,
    pub m: u64,
    pub zero_key_reason: Option<String>,
    pub recon_leaked_bits: Option<f64>,
    pub recon_converged: Option<bool>,
    pub hash_seed_hex: Option<String>,
    pub final_key_hex: Option<String>,
}

pub const SESSION_COLUMNS: &[&str] = &[
    "index",
    "seed",
    "n",
    "n_d",
    "n_c",
    "n_t",
    "n_k",
    "n_t_e",
    "qber",
    "error_rate_k",
    "error_rate_l",
    "n_l",
    "n_m",
    "eve_accuracy_m",
    "p_l_max",
    "mu_l",
    "m",
    "zero_key_reason",
    "recon_leaked_bits",
    "recon_converged",
    "hash_seed_hex",
    "final_key_hex",
];

fn reason_name(report: &RateReport) -> Option<String> {
    report.zero_key_reason.map(|r| serde_json::to_value(r).expect("enum").as_str().unwrap_or_default().to_string())
}

/// Simulated sessions with their bound and, if configured, the final key.
pub fn simulate_sessions(cfg: &RunConfig) -> Result<Vec<(SessionRecord, SessionSummary)>, CliError> {
    cfg.check_blocks(crate::Command::Simulate)?;
    let block = cfg.protocol.as_ref().expect("checked");
    let src = cfg.source.build()?;
    let pcfg = block.protocol_config(cfg.seed);
    let records = run_sessions(&pcfg, &src, block.sessions)?;
    records
        .into_par_iter()
        .map(|rec| {
            let mut counts = rec.counts;
            counts.collapse_bob_mode = cfg.bounds.collapse_bob_mode;
            let params = cfg.bounds.params(&counts)?;
            let report = key_bound(&counts, &params, &src)?;
            let (accuracy, n_m) = rec.eve_accuracy_on_m();
            let mut summary = SessionSummary {
                index: rec.index,
                seed: rec.seed,
                n: counts.n,
                n_d: counts.n_d,
                n_c: counts.n_c,
                n_t: counts.n_t,
                n_k: counts.n_k,
                n_t_e: counts.n_t_e,
                qber: counts.qber(),
                error_rate_k: rec.error_rate_k(),
                error_rate_l: rec.error_rate_l(),
                n_l: rec.l.len(),
                n_m,
                eve_accuracy_m: accuracy,
                p_l_max: report.p_l_max,
                mu_l: report.mu_l,
                m: report.m,
                zero_key_reason: reason_name(&report),
                recon_leaked_bits: None,
                recon_converged: None,
                hash_seed_hex: None,
                final_key_hex: None,
            };
            if let Some(recon) = &block.recon {
                let (xk, yk) = rec.sifted_keys();
                let mut rng = seed::rng(rec.seed, "recon", 0);
                let r = reconcile(&xk, &yk, recon, &mut rng)?;
                // The bound charged `ec_leakage`; any excess comes off the key.
                let excess = (r.leaked_bits - report.ec_leakage).max(0.0).ceil() as u64;
                let len = if r.converged { report.m.saturating_sub(excess).min(xk.len() as u64) } else { 0 };
                let spec = HashSpec::random(&mut seed::rng(rec.seed, "hash", 0), xk.len(), len as usize)?;
                let key = toeplitz_hash(&spec, &r.corrected)?;
                summary.recon_leaked_bits = Some(r.leaked_bits);
                summary.recon_converged = Some(r.converged);
                summary.hash_seed_hex = Some(spec.to_hex());
                summary.final_key_hex = Some(bits_to_hex(&key));
            }
            Ok((rec, summary))
        })
        .collect()
}

pub fn simulate(cfg: &RunConfig) -> Result<Table, CliError> {
    let sessions = simulate_sessions(cfg)?;
    let summaries: Vec<SessionSummary> = sessions.into_iter().map(|(_, s)| s).collect();
    Ok(Table::from_serialize(SESSION_COLUMNS, &summaries))
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepRow {
    pub row: &'static str,
    pub parameter: SweepParameter,
    pub value: f64,
    pub m: u64,
    pub l: f64,
    pub r_e_k: f64,
    pub n_k: u64,
    pub qber: f64,
    pub mu_l: f64,
    pub nu_l: f64,
    pub s_m: [f64; 2],
    pub leakage_bound: f64,
    pub zero_key_reason: Option<String>,
}

pub const SWEEP_COLUMNS: &[&str] = &[
    "row",
    "parameter",
    "value",
    "m",
    "l",
    "r_e_k",
    "n_k",
    "qber",
    "mu_l",
    "nu_l",
    "s_m",
    "leakage_bound",
    "zero_key_reason",
];

/// The configuration of one sweep grid point.
pub fn apply_sweep(cfg: &RunConfig, parameter: SweepParameter, value: f64) -> Result<RunConfig, CliError> {
    fn need_protocol(c: &mut RunConfig, parameter: SweepParameter) -> Result<&mut ProtocolBlock, CliError> {
        c.protocol.as_mut().ok_or_else(|| CliError::Config(format!("sweeping {parameter:?} needs [protocol]")))
    }
    let mut c = cfg.clone();
    match parameter {
        SweepParameter::C => c.bounds.c = Some(value),
        SweepParameter::DeltaP => c.bounds.delta_p = Some(value),
        SweepParameter::DeltaK => c.bounds.delta_k = Some(value),
        SweepParameter::Eps => c.bounds.eps = value,
        SweepParameter::Mu => c.source = c.source.with_mu(value)?,
        SweepParameter::Qber => {
            let counts = c.counts.as_mut().ok_or_else(|| CliError::Config("sweeping qber needs [counts]".into()))?;
            if !(0.0..=1.0).contains(&value) {
                return Err(CliError::Config("qber values must lie in [0, 1]".into()));
            }
            counts.n_t_e = (value * counts.n_t as f64).round() as u64;
        }
        SweepParameter::Loss | SweepParameter::Depolarizing => {
            let p = need_protocol(&mut c, parameter)?;
            let (mut loss, mut depolarizing) = match p.eve {
                EveStrategy::Passive { loss, depolarizing } => (loss, depolarizing),
                _ => return Err(CliError::Config("loss sweeps need a passive channel".into())),
            };
            if parameter == SweepParameter::Loss {
                loss = value;
            } else {
                depolarizing = value;
            }
            p.eve = EveStrategy::Passive { loss, depolarizing };
        }
        SweepParameter::Efficiency => need_protocol(&mut c, parameter)?.detector.efficiency = value,
        SweepParameter::N => {
            if !(value >= 0.0 && value.fract() == 0.0) {
                return Err(CliError::Config("N values must be non-negative integers".into()));
            }
            need_protocol(&mut c, parameter)?.n = value as u64;
            c.counts = None;
        }
    }
    Ok(c)
}

pub fn sweep_rows(cfg: &RunConfig) -> Result<Vec<SweepRow>, CliError> {
    cfg.check_blocks(crate::Command::Sweep)?;
    let block = cfg.sweep.as_ref().expect("checked");
    if block.values.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Config("sweep values must be finite".into()));
    }
    let configs = block.values.iter().map(|&v| apply_sweep(cfg, block.parameter, v)).collect::<Result<Vec<_>, _>>()?;
    let mut rows = configs
        .par_iter()
        .zip(&block.values)
        .map(|(c, &value)| {
            let (counts, r) = rate_report(c)?;
            Ok(SweepRow {
                row: "grid",
                parameter: block.parameter,
                value,
                m: r.m,
                l: r.l,
                r_e_k: r.r_e_k,
                n_k: counts.n_k,
                qber: r.qber,
                mu_l: r.mu_l,
                nu_l: r.nu_l,
                s_m: r.s_m,
                leakage_bound: r.leakage_bound,
                zero_key_reason: reason_name(&r),
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    let best = rows.iter().enumerate().fold(None, |best: Option<usize>, (i, r)| match best {
        Some(b) if rows[b].m >= r.m => Some(b),
        _ => Some(i),
    });
    if let Some(b) = best {
        let mut arg = rows[b].clone();
        arg.row = "argmax";
        rows.push(arg);
    }
    Ok(rows)
}

pub fn sweep(cfg: &RunConfig) -> Result<Table, CliError> {
    Ok(Table::from_serialize(SWEEP_COLUMNS, &sweep_rows(cfg)?))
}
