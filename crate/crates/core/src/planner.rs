//! Offline planning and online allocation.
//!
//! Planning runs the backup backwards over a finite horizon, or iterates it
//! to a fixed point for the discounted infinite horizon, and stores the
//! resulting value functions in a [`PolicyTable`]. Online allocation takes
//! an observation `(b, h, A)` — with the battery level continuous, not
//! snapped to the grid — rebuilds the future-value staircase at that exact
//! level and applies the allocator.

use crate::bellman::{
    accumulated_error_bound, approximation_error_bound, backup, bisection_allocation, build_future_value,
    closed_form_allocation, BellmanError, FutureValue, SlotContext,
};
use crate::config::{scenario_fingerprint, scenario_to_config, ConfigError};
use crate::models::{Horizon, ModelError, Scenario};
use crate::pwl::{BatteryGrid, PwlError, PwlValue};
use crate::AccessState;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("operation requires a {0} horizon")]
    WrongHorizon(&'static str),
    #[error("value iteration did not converge within {iterations} iterations (last distance {last})")]
    NotConverged { iterations: usize, last: f64, trace: Vec<f64> },
    #[error("invalid observation: {0}")]
    BadObservation(String),
    #[error("slot {k} is outside the horizon 1..={horizon}")]
    SlotOutOfRange { k: usize, horizon: usize },
    #[error("operation requires a {0} policy table")]
    WrongKind(&'static str),
    #[error("malformed policy table: {0}")]
    Parse(String),
    #[error("policy table fingerprint {found} does not match scenario fingerprint {expected}")]
    FingerprintMismatch { found: String, expected: String },
    #[error(transparent)]
    Bellman(#[from] BellmanError),
    #[error(transparent)]
    Pwl(#[from] PwlError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Iteration cap fallback when the distance-based estimate is degenerate.
pub const MIN_ITERATION_CAP: usize = 500;

/// One observed system state at the start of a slot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Observation {
    pub b: f64,
    pub h: f64,
    pub a: AccessState,
    /// 1-based slot index; required for finite-horizon tables.
    pub k: Option<usize>,
}

#[derive(Debug, Clone)]
pub enum TableKind {
    /// One value function per slot, `slots[k - 1]` holding slot `k`'s.
    Finite { slots: Vec<PwlValue> },
    /// The converged value function plus the convergence trace
    /// (sup-distance after each iteration).
    Infinite { converged: PwlValue, alpha: f64, trace: Vec<f64> },
}

/// Stored output of the offline phase, sufficient for online allocation.
#[derive(Debug, Clone)]
pub struct PolicyTable {
    kind: TableKind,
    fingerprint: String,
    delta: f64,
    gamma: f64,
    per_iteration_bounds: Vec<f64>,
    accumulated_bound: f64,
    iterations: usize,
}

impl PolicyTable {
    pub fn kind(&self) -> &TableKind {
        &self.kind
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Per-iteration error bounds in iteration order (first backup first).
    pub fn per_iteration_bounds(&self) -> &[f64] {
        &self.per_iteration_bounds
    }

    /// Discounted accumulation of the per-iteration bounds at the final
    /// iteration.
    pub fn accumulated_bound(&self) -> f64 {
        self.accumulated_bound
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    pub fn horizon(&self) -> Option<usize> {
        match &self.kind {
            TableKind::Finite { slots } => Some(slots.len()),
            TableKind::Infinite { .. } => None,
        }
    }

    /// Stored value function for 1-based slot `k`.
    pub fn slot_value(&self, k: usize) -> Option<&PwlValue> {
        match &self.kind {
            TableKind::Finite { slots } => slots.get(k - 1),
            TableKind::Infinite { converged, .. } => Some(converged),
        }
    }

    pub fn converged(&self) -> Option<&PwlValue> {
        match &self.kind {
            TableKind::Infinite { converged, .. } => Some(converged),
            TableKind::Finite { .. } => None,
        }
    }

    pub fn convergence_trace(&self) -> Option<&[f64]> {
        match &self.kind {
            TableKind::Infinite { trace, .. } => Some(trace),
            TableKind::Finite { .. } => None,
        }
    }

    pub fn matches(&self, s: &Scenario) -> bool {
        self.fingerprint == scenario_fingerprint(s)
    }
}

/// Backward induction over a finite horizon: the terminal slot is backed up
/// against a zero continuation, then each earlier slot against its
/// successor. Stores all `K` value functions and the error-bound series.
pub fn plan_finite(s: &Scenario, delta: f64) -> Result<PolicyTable, PlanError> {
    let horizon = match s.horizon {
        Horizon::Finite(k) => k,
        Horizon::Infinite => return Err(PlanError::WrongHorizon("finite")),
    };
    let grid = BatteryGrid::new(s.b_max, delta)?;
    let mut slots: Vec<Option<PwlValue>> = vec![None; horizon];
    let mut bounds = Vec::with_capacity(horizon);
    let mut w_next = PwlValue::zeros(grid);
    for k in (1..=horizon).rev() {
        let ctx = SlotContext::for_slot(s, k);
        let out = backup(&w_next, &ctx)?;
        bounds.push(out.error_bound);
        w_next = out.value.clone();
        slots[k - 1] = Some(out.value);
    }
    let accumulated = accumulated_error_bound(&bounds, s.gamma);
    Ok(PolicyTable {
        kind: TableKind::Finite { slots: slots.into_iter().map(Option::unwrap).collect() },
        fingerprint: scenario_fingerprint(s),
        delta,
        gamma: s.gamma,
        per_iteration_bounds: bounds,
        accumulated_bound: accumulated,
        iterations: horizon,
    })
}

/// Value iteration from the zero function until the sup-distance between
/// successive iterates drops to `alpha`.
///
/// The iteration cap defaults to ten times the geometric estimate
/// `log_gamma(alpha / d_1)` (with `d_1` the first distance), never below
/// [`MIN_ITERATION_CAP`]; exceeding it returns the convergence trace inside
/// the error.
pub fn plan_infinite(s: &Scenario, delta: f64, alpha: f64, max_iters: Option<usize>) -> Result<PolicyTable, PlanError> {
    if !matches!(s.horizon, Horizon::Infinite) {
        return Err(PlanError::WrongHorizon("infinite"));
    }
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(PlanError::BadObservation(format!("convergence tolerance {alpha}")));
    }
    let grid = BatteryGrid::new(s.b_max, delta)?;
    let ctx = SlotContext::for_slot(s, 1);
    let mut w = PwlValue::zeros(grid);
    let mut trace = Vec::new();
    let mut bounds = Vec::new();
    let mut cap = max_iters;
    loop {
        let out = backup(&w, &ctx)?;
        let d = out.value.sup_distance(&w)?;
        trace.push(d);
        bounds.push(out.error_bound);
        w = out.value;
        if d <= alpha {
            break;
        }
        if cap.is_none() {
            // First distance seeds the geometric iteration estimate.
            let est = if s.gamma > 0.0 && d > alpha {
                (10.0 * (alpha / d).log(s.gamma).ceil()) as usize
            } else {
                0
            };
            cap = Some(est.max(MIN_ITERATION_CAP));
        }
        if trace.len() >= cap.unwrap() {
            return Err(PlanError::NotConverged { iterations: trace.len(), last: d, trace });
        }
    }
    let accumulated = accumulated_error_bound(&bounds, s.gamma);
    let iterations = trace.len();
    Ok(PolicyTable {
        kind: TableKind::Infinite { converged: w, alpha, trace },
        fingerprint: scenario_fingerprint(s),
        delta,
        gamma: s.gamma,
        per_iteration_bounds: bounds,
        accumulated_bound: accumulated,
        iterations,
    })
}

/// Online allocation for an observation, together with the future-value
/// staircase it used (for diagnostics).
pub fn allocate_with_diagnostics(
    table: &PolicyTable,
    obs: &Observation,
    s: &Scenario,
) -> Result<(f64, Option<FutureValue>), PlanError> {
    if !obs.b.is_finite() || obs.b < 0.0 || obs.b > s.b_max * (1.0 + 1e-12) {
        return Err(PlanError::BadObservation(format!("battery level {} outside [0, {}]", obs.b, s.b_max)));
    }
    if !obs.h.is_finite() || obs.h < 0.0 {
        return Err(PlanError::BadObservation(format!("channel gain {}", obs.h)));
    }
    if obs.a == AccessState::Denied {
        return Ok((0.0, None));
    }

    let mut terminal_zero = None;
    let (w_next, slot): (&PwlValue, usize) = match &table.kind {
        TableKind::Finite { slots } => {
            let k = obs.k.ok_or_else(|| PlanError::BadObservation("finite table needs a slot index".into()))?;
            if k == 0 || k > slots.len() {
                return Err(PlanError::SlotOutOfRange { k, horizon: slots.len() });
            }
            // Slot k allocates against slot k+1's value; the last slot has a
            // zero continuation.
            if k < slots.len() {
                (&slots[k], k)
            } else {
                (terminal_zero.insert(PwlValue::zeros(slots[0].grid().clone())), k)
            }
        }
        TableKind::Infinite { converged, .. } => (converged, obs.k.unwrap_or(1)),
    };

    let ctx = SlotContext::for_slot(s, slot);
    let fv = build_future_value(w_next, obs.b, AccessState::Granted, &ctx)?;
    let p = if s.payoff.is_log_rate() {
        closed_form_allocation(&fv.derivative, obs.h)?
    } else {
        bisection_allocation(&fv, &s.payoff, obs.h)?
    };
    Ok((p, Some(fv)))
}

/// Online allocation: zero when access is denied, otherwise the allocator
/// applied to the staircase rebuilt at the observed battery level.
pub fn allocate(table: &PolicyTable, obs: &Observation, s: &Scenario) -> Result<f64, PlanError> {
    allocate_with_diagnostics(table, obs, s).map(|(p, _)| p)
}

/// A-posteriori distance bound between the converged table and the exact
/// fixed point: `(gamma * alpha + beta) / (1 - gamma)`, with `beta` the
/// leading second difference of the converged function (maximized over the
/// access states) standing in for the unknown fixed point's.
pub fn theorem3_bound(table: &PolicyTable, alpha: f64, gamma: f64) -> Result<f64, PlanError> {
    let converged = match &table.kind {
        TableKind::Infinite { converged, .. } => converged,
        TableKind::Finite { .. } => return Err(PlanError::WrongKind("infinite")),
    };
    let beta = approximation_error_bound(converged)?.max(0.0);
    Ok((gamma * alpha + beta) / (1.0 - gamma))
}

// ---------------------------------------------------------------------------
// Persistence
// ---------------------------------------------------------------------------

/// Serializes the table plus the scenario it was planned for. The format is
/// line-oriented: `# key = value` metadata, the scenario config embedded
/// between `# config-begin` / `# config-end`, then one value-function block
/// per slot.
pub fn table_to_string(table: &PolicyTable, s: &Scenario) -> String {
    let mut out = String::new();
    out.push_str("# powalloc policy table v1\n");
    let kind = match &table.kind {
        TableKind::Finite { .. } => "finite",
        TableKind::Infinite { .. } => "infinite",
    };
    out.push_str(&format!("# kind = {kind}\n"));
    out.push_str(&format!("# delta = {}\n", table.delta));
    out.push_str(&format!("# gamma = {}\n", table.gamma));
    out.push_str(&format!("# iterations = {}\n", table.iterations));
    out.push_str(&format!("# accumulated_bound = {}\n", table.accumulated_bound));
    out.push_str(&format!("# per_iteration_bounds = {}\n", join_floats(&table.per_iteration_bounds)));
    if let TableKind::Infinite { alpha, trace, .. } = &table.kind {
        out.push_str(&format!("# alpha = {alpha}\n"));
        out.push_str(&format!("# convergence_trace = {}\n", join_floats(trace)));
    }
    out.push_str(&format!("# fingerprint = {}\n", table.fingerprint));
    out.push_str("# config-begin\n");
    for line in scenario_to_config(s).lines() {
        out.push_str(&format!("# {line}\n"));
    }
    out.push_str("# config-end\n");
    match &table.kind {
        TableKind::Finite { slots } => {
            for (i, v) in slots.iter().enumerate() {
                out.push_str(&format!("# slot = {}\n", i + 1));
                v.write_table(&mut out);
            }
        }
        TableKind::Infinite { converged, .. } => {
            out.push_str("# value = converged\n");
            converged.write_table(&mut out);
        }
    }
    out
}

fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn parse_floats(s: &str) -> Result<Vec<f64>, PlanError> {
    if s.trim().is_empty() {
        return Ok(vec![]);
    }
    s.split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| PlanError::Parse(format!("float list: {e}"))))
        .collect()
}

/// Parses the output of [`table_to_string`], returning the table and the
/// embedded scenario. The stored fingerprint must match the embedded
/// config, otherwise the file was edited and is rejected.
pub fn table_from_string(text: &str) -> Result<(PolicyTable, Scenario), PlanError> {
    let mut meta: std::collections::HashMap<String, String> = std::collections::HashMap::new();
    let mut config_lines: Vec<String> = Vec::new();
    let mut blocks: Vec<(String, String)> = Vec::new(); // (marker, table text)
    let mut in_config = false;

    for line in text.lines() {
        if let Some(rest) = line.strip_prefix('#') {
            let rest = rest.trim();
            if rest == "config-begin" {
                in_config = true;
            } else if rest == "config-end" {
                in_config = false;
            } else if in_config {
                config_lines.push(rest.to_string());
            } else if let Some((key, value)) = rest.split_once('=') {
                let key = key.trim().to_string();
                let value = value.trim().to_string();
                if key == "slot" || key == "value" {
                    blocks.push((value, String::new()));
                } else {
                    meta.insert(key, value);
                }
            }
        } else if !line.trim().is_empty() {
            match blocks.last_mut() {
                Some((_, body)) => {
                    body.push_str(line);
                    body.push('\n');
                }
                None => return Err(PlanError::Parse(format!("data before any block marker: {line:?}"))),
            }
        }
    }

    let get = |k: &str| -> Result<&String, PlanError> {
        meta.get(k).ok_or_else(|| PlanError::Parse(format!("missing metadata key {k}")))
    };
    let getf = |k: &str| -> Result<f64, PlanError> {
        get(k)?.parse::<f64>().map_err(|e| PlanError::Parse(format!("{k}: {e}")))
    };

    let kind_name = get("kind")?.clone();
    let delta = getf("delta")?;
    let gamma = getf("gamma")?;
    let iterations = getf("iterations")? as usize;
    let accumulated_bound = getf("accumulated_bound")?;
    let per_iteration_bounds = parse_floats(get("per_iteration_bounds")?)?;
    let fingerprint = get("fingerprint")?.clone();

    let config_text = config_lines.join("\n");
    let (scenario, _) = crate::config::parse_scenario(&config_text)?;
    let expected = scenario_fingerprint(&scenario);
    if expected != fingerprint {
        return Err(PlanError::FingerprintMismatch { found: fingerprint, expected });
    }

    let mut values = Vec::with_capacity(blocks.len());
    for (_, body) in &blocks {
        values.push(PwlValue::parse_table(body)?);
    }
    let kind = match kind_name.as_str() {
        "finite" => {
            if values.is_empty() {
                return Err(PlanError::Parse("finite table has no slots".into()));
            }
            TableKind::Finite { slots: values }
        }
        "infinite" => {
            let alpha = getf("alpha")?;
            let trace = parse_floats(get("convergence_trace")?)?;
            if values.len() != 1 {
                return Err(PlanError::Parse(format!("infinite table expects 1 block, got {}", values.len())));
            }
            TableKind::Infinite { converged: values.remove(0), alpha, trace }
        }
        other => return Err(PlanError::Parse(format!("unknown table kind {other:?}"))),
    };

    Ok((
        PolicyTable {
            kind,
            fingerprint,
            delta,
            gamma,
            per_iteration_bounds,
            accumulated_bound,
            iterations,
        },
        scenario,
    ))
}

/// Writes the table for later online use.
pub fn store_table(table: &PolicyTable, s: &Scenario, path: &std::path::Path) -> Result<(), PlanError> {
    std::fs::write(path, table_to_string(table, s))?;
    Ok(())
}

/// Loads a stored table and the scenario it embeds.
pub fn load_table(path: &std::path::Path) -> Result<(PolicyTable, Scenario), PlanError> {
    let text = std::fs::read_to_string(path)?;
    table_from_string(&text)
}
