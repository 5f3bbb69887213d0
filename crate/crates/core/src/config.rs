//! Flat key-value scenario files.
//!
//! A config is a line-oriented `key = value` file; `#` starts a comment and
//! blank lines are ignored. Every key has a default (the infinite-horizon
//! baseline scenario), so the empty file is valid. Unknown keys are
//! rejected.
//!
//! | key | default | meaning |
//! |-----|---------|---------|
//! | `channel.kind` | `rayleigh` | `rayleigh`, `exponential`, `discrete`, `degenerate`, `per_slot` |
//! | `channel.sigma` | `1` | Rayleigh scale |
//! | `channel.mean` | — | exponential mean |
//! | `channel.atoms` | — | discrete atoms `h:p,h:p,...` |
//! | `channel.h0` | — | degenerate gain |
//! | `channel.count` | — | per-slot law count; laws under `channel.slot<k>.*` |
//! | `access.q` | `0.1` | Pr(denied next | granted) |
//! | `access.q_tilde` | `0.1` | Pr(denied next | denied) |
//! | `access.initial` | `stationary` | `stationary`, `granted`, `denied` |
//! | `harvest.e` | `3` | prediction per slot, single value or comma list |
//! | `harvest.error.kind` | `none` | `none`, `uniform`, `discrete` |
//! | `harvest.error.v` | — | uniform half-range |
//! | `harvest.error.step` | `0.1` | uniform step |
//! | `harvest.error.atoms` | — | discrete atoms `e:p,...` |
//! | `payoff.kind` | `log_rate` | only `log_rate` is loadable |
//! | `power.p_max` | `6` | max transmit power |
//! | `battery.b_max` | `15` | capacity |
//! | `battery.b0` | `2` | initial level |
//! | `slot.t_c` | `1` | slot length |
//! | `discount.gamma` | `0.85` | discount factor |
//! | `horizon.k` | `infinite` | slot count or `infinite` |
//! | `solver.delta` | `0.1` | grid spacing |
//! | `solver.alpha` | `0.0001` | value-iteration tolerance |

use crate::models::{
    AccessChain, ChannelLaw, ChannelSpec, ErrorLaw, HarvestSchedule, Horizon, PayoffModel, Scenario,
};
use crate::AccessState;
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {msg}")]
    Syntax { line: usize, msg: String },
    #[error("key {0}: {1}")]
    BadValue(String, String),
    #[error("unknown key {0}")]
    UnknownKey(String),
    #[error("duplicate key {0}")]
    DuplicateKey(String),
    #[error("scenario rejected: {0}")]
    Model(#[from] crate::models::ModelError),
}

/// Grid spacing and convergence tolerance for the solver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub delta: f64,
    pub alpha: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig { delta: 0.1, alpha: 1e-4 }
    }
}

fn split_key_values(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line: i + 1, msg: format!("expected key = value, got {line:?}") })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        if map.insert(key.clone(), value).is_some() {
            return Err(ConfigError::DuplicateKey(key));
        }
    }
    Ok(map)
}

fn parse_f64(key: &str, value: &str) -> Result<f64, ConfigError> {
    value
        .parse::<f64>()
        .map_err(|e| ConfigError::BadValue(key.to_string(), e.to_string()))
}

fn parse_pairs(key: &str, value: &str) -> Result<Vec<(f64, f64)>, ConfigError> {
    value
        .split(',')
        .map(|item| {
            let (a, b) = item
                .split_once(':')
                .ok_or_else(|| ConfigError::BadValue(key.to_string(), format!("expected v:p, got {item:?}")))?;
            Ok((parse_f64(key, a.trim())?, parse_f64(key, b.trim())?))
        })
        .collect()
}

fn parse_law(prefix: &str, map: &mut BTreeMap<String, String>) -> Result<ChannelLaw, ConfigError> {
    let kind_key = format!("{prefix}kind");
    let kind = map.remove(&kind_key).unwrap_or_else(|| "rayleigh".to_string());
    let mut take_f64 = |name: &str| -> Result<Option<f64>, ConfigError> {
        let key = format!("{prefix}{name}");
        map.remove(&key).map(|v| parse_f64(&key, &v)).transpose()
    };
    let law = match kind.as_str() {
        "rayleigh" => ChannelLaw::Rayleigh { sigma: take_f64("sigma")?.unwrap_or(1.0) },
        "exponential" => {
            let mean = take_f64("mean")?
                .ok_or_else(|| ConfigError::BadValue(format!("{prefix}mean"), "required for exponential".into()))?;
            ChannelLaw::Exponential { mean }
        }
        "degenerate" => {
            let h0 = take_f64("h0")?
                .ok_or_else(|| ConfigError::BadValue(format!("{prefix}h0"), "required for degenerate".into()))?;
            ChannelLaw::Degenerate { h0 }
        }
        "discrete" => {
            let key = format!("{prefix}atoms");
            let atoms = map
                .remove(&key)
                .ok_or_else(|| ConfigError::BadValue(key.clone(), "required for discrete".into()))?;
            ChannelLaw::Discrete { atoms: parse_pairs(&key, &atoms)? }
        }
        other => return Err(ConfigError::BadValue(kind_key, format!("unknown law kind {other:?}"))),
    };
    Ok(law)
}

fn emit_law(prefix: &str, law: &ChannelLaw, out: &mut Vec<(String, String)>) {
    match law {
        ChannelLaw::Rayleigh { sigma } => {
            out.push((format!("{prefix}kind"), "rayleigh".into()));
            out.push((format!("{prefix}sigma"), sigma.to_string()));
        }
        ChannelLaw::Exponential { mean } => {
            out.push((format!("{prefix}kind"), "exponential".into()));
            out.push((format!("{prefix}mean"), mean.to_string()));
        }
        ChannelLaw::Degenerate { h0 } => {
            out.push((format!("{prefix}kind"), "degenerate".into()));
            out.push((format!("{prefix}h0"), h0.to_string()));
        }
        ChannelLaw::Discrete { atoms } => {
            out.push((format!("{prefix}kind"), "discrete".into()));
            let list = atoms.iter().map(|(h, p)| format!("{h}:{p}")).collect::<Vec<_>>().join(",");
            out.push((format!("{prefix}atoms"), list));
        }
    }
}

/// Parses a scenario plus solver settings from config text, applying the
/// documented defaults for omitted keys.
pub fn parse_scenario(text: &str) -> Result<(Scenario, SolverConfig), ConfigError> {
    let mut map = split_key_values(text)?;

    let channel = if map.get("channel.kind").map(String::as_str) == Some("per_slot") {
        map.remove("channel.kind");
        let count_key = "channel.count";
        let count = map
            .remove(count_key)
            .ok_or_else(|| ConfigError::BadValue(count_key.into(), "required for per_slot".into()))?;
        let count = count
            .parse::<usize>()
            .map_err(|e| ConfigError::BadValue(count_key.into(), e.to_string()))?;
        let mut laws = Vec::with_capacity(count);
        for k in 1..=count {
            laws.push(parse_law(&format!("channel.slot{k}."), &mut map)?);
        }
        ChannelSpec::PerSlot(laws)
    } else {
        ChannelSpec::Stationary(parse_law("channel.", &mut map)?)
    };

    let mut take = |key: &str| map.remove(key);
    let q = take("access.q").map(|v| parse_f64("access.q", &v)).transpose()?.unwrap_or(0.1);
    let q_tilde = take("access.q_tilde")
        .map(|v| parse_f64("access.q_tilde", &v))
        .transpose()?
        .unwrap_or(0.1);
    let initial_access = match take("access.initial").as_deref() {
        None | Some("stationary") => None,
        Some("granted") => Some(AccessState::Granted),
        Some("denied") => Some(AccessState::Denied),
        Some(other) => return Err(ConfigError::BadValue("access.initial".into(), format!("{other:?}"))),
    };

    let e_values: Vec<f64> = match take("harvest.e") {
        Some(v) => v
            .split(',')
            .map(|x| parse_f64("harvest.e", x.trim()))
            .collect::<Result<_, _>>()?,
        None => vec![3.0],
    };
    let error_law = match take("harvest.error.kind").as_deref() {
        None | Some("none") => ErrorLaw::None,
        Some("uniform") => {
            let v = take("harvest.error.v")
                .map(|v| parse_f64("harvest.error.v", &v))
                .transpose()?
                .ok_or_else(|| ConfigError::BadValue("harvest.error.v".into(), "required for uniform".into()))?;
            let step = take("harvest.error.step")
                .map(|v| parse_f64("harvest.error.step", &v))
                .transpose()?
                .unwrap_or(0.1);
            ErrorLaw::uniform(v, step)?
        }
        Some("discrete") => {
            let atoms = take("harvest.error.atoms").ok_or_else(|| {
                ConfigError::BadValue("harvest.error.atoms".into(), "required for discrete".into())
            })?;
            ErrorLaw::Discrete { atoms: parse_pairs("harvest.error.atoms", &atoms)? }
        }
        Some(other) => return Err(ConfigError::BadValue("harvest.error.kind".into(), format!("{other:?}"))),
    };

    let payoff = match take("payoff.kind").as_deref() {
        None | Some("log_rate") => PayoffModel::LogRate,
        Some("general") => {
            return Err(ConfigError::BadValue(
                "payoff.kind".into(),
                "general payoffs are program-constructed, not loadable".into(),
            ))
        }
        Some(other) => return Err(ConfigError::BadValue("payoff.kind".into(), format!("{other:?}"))),
    };

    let p_max = take("power.p_max").map(|v| parse_f64("power.p_max", &v)).transpose()?.unwrap_or(6.0);
    let b_max = take("battery.b_max").map(|v| parse_f64("battery.b_max", &v)).transpose()?.unwrap_or(15.0);
    let b0 = take("battery.b0").map(|v| parse_f64("battery.b0", &v)).transpose()?.unwrap_or(2.0);
    let t_c = take("slot.t_c").map(|v| parse_f64("slot.t_c", &v)).transpose()?.unwrap_or(1.0);
    let gamma = take("discount.gamma")
        .map(|v| parse_f64("discount.gamma", &v))
        .transpose()?
        .unwrap_or(0.85);
    let horizon = match take("horizon.k").as_deref() {
        None | Some("infinite") => Horizon::Infinite,
        Some(v) => Horizon::Finite(
            v.parse::<usize>()
                .map_err(|e| ConfigError::BadValue("horizon.k".into(), e.to_string()))?,
        ),
    };

    let solver = SolverConfig {
        delta: take("solver.delta")
            .map(|v| parse_f64("solver.delta", &v))
            .transpose()?
            .unwrap_or(SolverConfig::default().delta),
        alpha: take("solver.alpha")
            .map(|v| parse_f64("solver.alpha", &v))
            .transpose()?
            .unwrap_or(SolverConfig::default().alpha),
    };

    if let Some(key) = map.keys().next() {
        return Err(ConfigError::UnknownKey(key.clone()));
    }

    let scenario = Scenario {
        channel,
        access: AccessChain::new(q, q_tilde)?,
        initial_access,
        harvest: HarvestSchedule::per_slot(e_values, error_law)?,
        payoff,
        p_max,
        b_max,
        b0,
        t_c,
        gamma,
        horizon,
    }
    .validated()?;
    Ok((scenario, solver))
}

/// Canonical config text for a scenario: every key explicit, keys sorted.
/// Two scenarios serialize identically exactly when they are the same
/// problem, which is what the fingerprint hashes.
pub fn scenario_to_config(s: &Scenario) -> String {
    let mut kv: Vec<(String, String)> = Vec::new();
    match &s.channel {
        ChannelSpec::Stationary(law) => emit_law("channel.", law, &mut kv),
        ChannelSpec::PerSlot(laws) => {
            kv.push(("channel.kind".into(), "per_slot".into()));
            kv.push(("channel.count".into(), laws.len().to_string()));
            for (i, law) in laws.iter().enumerate() {
                emit_law(&format!("channel.slot{}.", i + 1), law, &mut kv);
            }
        }
    }
    kv.push(("access.q".into(), s.access.q.to_string()));
    kv.push(("access.q_tilde".into(), s.access.q_tilde.to_string()));
    kv.push((
        "access.initial".into(),
        match s.initial_access {
            None => "stationary".into(),
            Some(AccessState::Granted) => "granted".into(),
            Some(AccessState::Denied) => "denied".into(),
        },
    ));
    kv.push((
        "harvest.e".into(),
        s.harvest
            .predictions()
            .iter()
            .map(|e| e.to_string())
            .collect::<Vec<_>>()
            .join(","),
    ));
    match &s.harvest.error_law {
        ErrorLaw::None => kv.push(("harvest.error.kind".into(), "none".into())),
        ErrorLaw::Uniform { v, step } => {
            kv.push(("harvest.error.kind".into(), "uniform".into()));
            kv.push(("harvest.error.v".into(), v.to_string()));
            kv.push(("harvest.error.step".into(), step.to_string()));
        }
        ErrorLaw::Discrete { atoms } => {
            kv.push(("harvest.error.kind".into(), "discrete".into()));
            let list = atoms.iter().map(|(e, p)| format!("{e}:{p}")).collect::<Vec<_>>().join(",");
            kv.push(("harvest.error.atoms".into(), list));
        }
    }
    kv.push((
        "payoff.kind".into(),
        match s.payoff {
            PayoffModel::LogRate => "log_rate".into(),
            PayoffModel::General(_) => "general".into(),
        },
    ));
    kv.push(("power.p_max".into(), s.p_max.to_string()));
    kv.push(("battery.b_max".into(), s.b_max.to_string()));
    kv.push(("battery.b0".into(), s.b0.to_string()));
    kv.push(("slot.t_c".into(), s.t_c.to_string()));
    kv.push(("discount.gamma".into(), s.gamma.to_string()));
    kv.push((
        "horizon.k".into(),
        match s.horizon {
            Horizon::Finite(k) => k.to_string(),
            Horizon::Infinite => "infinite".into(),
        },
    ));
    kv.sort();
    let mut out = String::new();
    for (k, v) in kv {
        out.push_str(&format!("{k} = {v}\n"));
    }
    out
}

/// Short hash of the canonical config; planning stamps it into the policy
/// table and the CLI refuses tables whose fingerprint does not match the
/// scenario in use.
pub fn scenario_fingerprint(s: &Scenario) -> String {
    let digest = Sha256::digest(scenario_to_config(s).as_bytes());
    let mut hex = String::with_capacity(16);
    for byte in digest.iter().take(8) {
        hex.push_str(&format!("{byte:02x}"));
    }
    hex
}
