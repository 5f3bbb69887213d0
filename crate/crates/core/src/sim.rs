//! Monte-Carlo policy evaluation with exact battery dynamics.
//!
//! A trial samples one realization of the exogenous processes, walks the
//! battery recursion under a policy and accumulates the discounted payoff.
//! Feasibility is asserted, not clipped: a policy emitting an infeasible
//! power is a bug and fails the trial loudly. Trials are independent, run
//! in parallel, and aggregate in seed order so summaries reproduce exactly.

use crate::baselines::{
    balanced_policy, greedy_policy, offline_noncausal_optimum, BaselineError, DiscreteMdp,
};
use crate::models::{sample_trajectory, Scenario};
use crate::planner::{allocate, Observation, PlanError, PolicyTable};
use crate::AccessState;
use rayon::prelude::*;
use thiserror::Error;

/// Slack for floating-point representation when auditing feasibility.
const FEASIBILITY_SLACK: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("policy {policy} emitted infeasible power {p} in slot {slot} (cap {cap})")]
    Infeasible { policy: String, slot: usize, p: f64, cap: f64 },
    #[error("policy {policy} failed in slot {slot}: {message}")]
    PolicyFailure { policy: String, slot: usize, message: String },
    #[error("battery went negative ({value}) in slot {slot}")]
    NegativeBattery { slot: usize, value: f64 },
    #[error("evaluation needs at least 2 trials, got {0}")]
    TooFewTrials(usize),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
}

/// A power-allocation policy driven by per-slot observations.
pub trait Policy: Sync {
    fn name(&self) -> &str;
    fn decide(&self, obs: &Observation, s: &Scenario) -> Result<f64, PlanError>;
}

/// The solver's policy: online allocation against a planned table.
pub struct PlannerPolicy<'a> {
    pub table: &'a PolicyTable,
    pub label: String,
}

impl<'a> PlannerPolicy<'a> {
    pub fn new(table: &'a PolicyTable) -> PlannerPolicy<'a> {
        PlannerPolicy { table, label: "proposed".to_string() }
    }

    pub fn labeled(table: &'a PolicyTable, label: &str) -> PlannerPolicy<'a> {
        PlannerPolicy { table, label: label.to_string() }
    }
}

impl Policy for PlannerPolicy<'_> {
    fn name(&self) -> &str {
        &self.label
    }

    fn decide(&self, obs: &Observation, s: &Scenario) -> Result<f64, PlanError> {
        allocate(self.table, obs, s)
    }
}

pub struct GreedyPolicy;

impl Policy for GreedyPolicy {
    fn name(&self) -> &str {
        "greedy"
    }

    fn decide(&self, obs: &Observation, s: &Scenario) -> Result<f64, PlanError> {
        Ok(greedy_policy(obs, s))
    }
}

pub struct BalancedPolicy;

impl Policy for BalancedPolicy {
    fn name(&self) -> &str {
        "balanced"
    }

    fn decide(&self, obs: &Observation, s: &Scenario) -> Result<f64, PlanError> {
        Ok(balanced_policy(obs, s))
    }
}

pub struct DiscreteMdpPolicy<'a> {
    pub table: &'a DiscreteMdp,
    pub label: String,
}

impl<'a> DiscreteMdpPolicy<'a> {
    pub fn new(table: &'a DiscreteMdp) -> DiscreteMdpPolicy<'a> {
        DiscreteMdpPolicy { table, label: "discrete_mdp".to_string() }
    }

    pub fn labeled(table: &'a DiscreteMdp, label: &str) -> DiscreteMdpPolicy<'a> {
        DiscreteMdpPolicy { table, label: label.to_string() }
    }
}

impl Policy for DiscreteMdpPolicy<'_> {
    fn name(&self) -> &str {
        &self.label
    }

    fn decide(&self, obs: &Observation, s: &Scenario) -> Result<f64, PlanError> {
        Ok(self.table.action(obs, s))
    }
}

/// Transmit nothing, ever. Useful as a reference point.
pub struct ZeroPolicy;

impl Policy for ZeroPolicy {
    fn name(&self) -> &str {
        "zero"
    }

    fn decide(&self, _: &Observation, _: &Scenario) -> Result<f64, PlanError> {
        Ok(0.0)
    }
}

/// Per-slot record of one trial.
#[derive(Debug, Clone)]
pub struct SlotRecord {
    pub b: f64,
    pub h: f64,
    pub a: AccessState,
    pub eps: f64,
    pub p: f64,
    pub payoff: f64,
}

/// One Monte-Carlo realization under a policy.
#[derive(Debug, Clone)]
pub struct TrialRecord {
    pub seed: u64,
    pub slots: Vec<SlotRecord>,
    /// Discounted total payoff.
    pub total: f64,
}

/// Evaluation summary for one policy.
#[derive(Debug, Clone)]
pub struct EvalSummary {
    pub policy: String,
    pub trials: usize,
    pub mean: f64,
    pub stderr: f64,
    /// Per-trial totals in seed order; paired comparisons consume these.
    pub totals: Vec<f64>,
}

impl EvalSummary {
    fn from_totals(policy: &str, totals: Vec<f64>) -> EvalSummary {
        let n = totals.len();
        let mean = totals.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            totals.iter().map(|t| (t - mean) * (t - mean)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        EvalSummary { policy: policy.to_string(), trials: n, mean, stderr: (var / n as f64).sqrt(), totals }
    }
}

/// Mean and standard error of the per-trial difference `a - b` under common
/// random numbers.
pub fn paired_gap(a: &EvalSummary, b: &EvalSummary) -> (f64, f64) {
    assert_eq!(a.trials, b.trials, "paired comparison needs equal trial counts");
    let n = a.trials;
    let diffs: Vec<f64> = a.totals.iter().zip(&b.totals).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        diffs.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n - 1) as f64
    } else {
        0.0
    };
    (mean, (var / n as f64).sqrt())
}

/// Runs one trial: sample the realization for `seed`, drive the battery
/// recursion, audit feasibility every slot.
pub fn run_trial(policy: &dyn Policy, s: &Scenario, seed: u64, horizon: usize) -> Result<TrialRecord, SimError> {
    let real = sample_trajectory(s, seed, horizon);
    run_trial_on(policy, s, seed, &real)
}

fn run_trial_on(
    policy: &dyn Policy,
    s: &Scenario,
    seed: u64,
    real: &crate::models::Realization,
) -> Result<TrialRecord, SimError> {
    let horizon = real.len();
    let mut slots = Vec::with_capacity(horizon);
    let mut b = s.b0;
    let mut total = 0.0;
    let mut discount = 1.0;
    for k in 1..=horizon {
        let h = real.h[k - 1];
        let a = real.a[k - 1];
        let eps = real.eps[k - 1];
        let obs = Observation { b, h, a, k: Some(k) };
        let p = policy
            .decide(&obs, s)
            .map_err(|e| SimError::PolicyFailure { policy: policy.name().to_string(), slot: k, message: e.to_string() })?;
        let cap = if a == AccessState::Granted { s.p_max.min(b / s.t_c) } else { 0.0 };
        if !(p >= -FEASIBILITY_SLACK && p <= cap + FEASIBILITY_SLACK) {
            return Err(SimError::Infeasible { policy: policy.name().to_string(), slot: k, p, cap });
        }
        let payoff = s.payoff.rate(p.max(0.0), h);
        total += discount * payoff;
        slots.push(SlotRecord { b, h, a, eps, p, payoff });
        let next = (b + s.harvest.e_at(k) + eps - p * s.t_c).min(s.b_max);
        if next < -FEASIBILITY_SLACK {
            return Err(SimError::NegativeBattery { slot: k, value: next });
        }
        b = next.max(0.0);
        discount *= s.gamma;
    }
    Ok(TrialRecord { seed, slots, total })
}

/// Evaluates a policy over `trials` seeds starting at `base_seed`.
///
/// Policies evaluated with the same scenario and seed range see identical
/// realizations (common random numbers), which sharpens ordering
/// comparisons.
pub fn evaluate(policy: &dyn Policy, s: &Scenario, trials: usize, base_seed: u64) -> Result<EvalSummary, SimError> {
    if trials < 2 {
        return Err(SimError::TooFewTrials(trials));
    }
    let horizon = s.eval_horizon();
    let totals: Result<Vec<f64>, SimError> = (0..trials)
        .into_par_iter()
        .map(|i| run_trial(policy, s, base_seed + i as u64, horizon).map(|t| t.total))
        .collect();
    Ok(EvalSummary::from_totals(policy.name(), totals?))
}

/// Evaluates the offline non-causal optimum over the same seeds, replaying
/// each optimal power sequence through the audited dynamics.
pub fn evaluate_offline(
    s: &Scenario,
    trials: usize,
    base_seed: u64,
    delta_ref: f64,
) -> Result<EvalSummary, SimError> {
    if trials < 2 {
        return Err(SimError::TooFewTrials(trials));
    }
    let horizon = s.eval_horizon();
    let totals: Result<Vec<f64>, SimError> = (0..trials)
        .into_par_iter()
        .map(|i| {
            let seed = base_seed + i as u64;
            let real = sample_trajectory(s, seed, horizon);
            let sol = offline_noncausal_optimum(&real, s, delta_ref)?;
            let replay = ReplayPolicy { powers: &sol.powers };
            let record = run_trial_on(&replay, s, seed, &real)?;
            Ok(record.total)
        })
        .collect();
    Ok(EvalSummary::from_totals("offline", totals?))
}

/// Replays a fixed power sequence (already indexed by slot).
struct ReplayPolicy<'a> {
    powers: &'a [f64],
}

impl Policy for ReplayPolicy<'_> {
    fn name(&self) -> &str {
        "offline"
    }

    fn decide(&self, obs: &Observation, _: &Scenario) -> Result<f64, PlanError> {
        let k = obs.k.unwrap_or(1);
        Ok(self.powers.get(k - 1).copied().unwrap_or(0.0))
    }
}
