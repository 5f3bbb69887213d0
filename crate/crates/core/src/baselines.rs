//! Comparison policies: greedy, balanced, the standard discrete MDP, and
//! the offline non-causal optimum.
//!
//! The discrete MDP exists in two forms. [`DiscreteMdp`] is the simulation
//! baseline: battery, gain and power all quantized to the same step, with
//! an exhaustive action search — the method the solver is benchmarked
//! against. [`discrete_action_plan`] keeps the solver's own expectation
//! machinery and only restricts the action set to the grid multiples; that
//! is the construction whose values the solver provably dominates
//! pointwise, and it is what the dominance tests compare against.

use crate::bellman::{build_future_value, closed_form_allocation, SlotContext};
use crate::models::{expected_over_channel, ChannelLaw, Horizon, ModelError, Realization, Scenario};
use crate::planner::Observation;
use crate::pwl::{BatteryGrid, PwlError, PwlValue};
use crate::quad::GaussLegendre;
use crate::AccessState;
use crate::bellman::BellmanError;
use rayon::prelude::*;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error("state-action-observation product {product} exceeds the budget {budget}")]
    BudgetExceeded { product: u128, budget: u128 },
    #[error("value iteration did not converge within {0} iterations")]
    NotConverged(usize),
    #[error("operation requires a {0} horizon")]
    WrongHorizon(&'static str),
    #[error("realization and scenario disagree: {0}")]
    BadRealization(String),
    #[error(transparent)]
    Bellman(#[from] BellmanError),
    #[error(transparent)]
    Pwl(#[from] PwlError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Default cap on `battery levels x access states x actions x gain atoms x
/// error atoms x slots` for the discrete MDP.
pub const DEFAULT_STATE_BUDGET: u128 = 1_000_000_000;

/// Transmit as much as currently feasible.
pub fn greedy_policy(obs: &Observation, s: &Scenario) -> f64 {
    match obs.a {
        AccessState::Denied => 0.0,
        AccessState::Granted => s.p_max.min(obs.b / s.t_c),
    }
}

/// Transmit at the mean net harvest rate, capped by feasibility.
pub fn balanced_policy(obs: &Observation, s: &Scenario) -> f64 {
    match obs.a {
        AccessState::Denied => 0.0,
        AccessState::Granted => {
            let target = (s.harvest.mean_e() + s.harvest.error_law.mean()) / s.t_c;
            target.min(s.p_max).min(obs.b / s.t_c)
        }
    }
}

/// How online gains are mapped back to the quantized gain atoms.
#[derive(Debug, Clone)]
enum GainQuantizer {
    /// Continuous law binned at the grid step; lookup is `floor(h / step)`.
    Binned { step: f64, count: usize },
    /// Discrete law kept as-is; lookup is the nearest atom.
    Atoms { values: Vec<f64> },
}

impl GainQuantizer {
    fn index_of(&self, h: f64) -> usize {
        match self {
            GainQuantizer::Binned { step, count } => {
                (((h / step).floor() as isize).max(0) as usize).min(count - 1)
            }
            GainQuantizer::Atoms { values } => {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for (i, &v) in values.iter().enumerate() {
                    let d = (v - h).abs();
                    if d < best_d {
                        best_d = d;
                        best = i;
                    }
                }
                best
            }
        }
    }
}

/// Fully discretized dynamic program: the standard baseline.
#[derive(Debug, Clone)]
pub struct DiscreteMdp {
    delta: f64,
    grid: BatteryGrid,
    quantizers: Vec<GainQuantizer>,
    /// `values[slot][b_index][access]`; a single slot holds the converged
    /// infinite-horizon table.
    values: Vec<Vec<[f64; 2]>>,
    /// `actions[slot][b_index][gain_index]` for the granted state.
    actions: Vec<Vec<Vec<f64>>>,
    horizon: Option<usize>,
    iterations: usize,
}

impl DiscreteMdp {
    pub fn plan(s: &Scenario, delta: f64, alpha: f64) -> Result<DiscreteMdp, BaselineError> {
        DiscreteMdp::plan_with_budget(s, delta, alpha, DEFAULT_STATE_BUDGET)
    }

    /// Quantizes every continuous variable at step `delta` and runs backward
    /// induction (finite horizon) or value iteration to tolerance `alpha`
    /// (infinite). Rejects problems whose state-action-observation product
    /// exceeds the budget.
    pub fn plan_with_budget(
        s: &Scenario,
        delta: f64,
        alpha: f64,
        budget: u128,
    ) -> Result<DiscreteMdp, BaselineError> {
        let grid = BatteryGrid::new(s.b_max, delta)?;
        let n_b = grid.len();
        let slots = match s.horizon {
            Horizon::Finite(k) => k,
            Horizon::Infinite => 1,
        };

        let mut h_atoms = Vec::with_capacity(slots);
        let mut quantizers = Vec::with_capacity(slots);
        for k in 1..=slots {
            let (atoms, quantizer) = quantize_channel(s.channel.law_at(k), delta);
            h_atoms.push(atoms);
            quantizers.push(quantizer);
        }

        let n_p = (s.p_max.min(s.b_max / s.t_c) / delta).floor() as u128 + 1;
        let n_h = h_atoms.iter().map(Vec::len).max().unwrap_or(1) as u128;
        let n_eps = s.harvest.error_law.atoms().len() as u128;
        let product = n_b as u128 * 2 * n_p * n_h * n_eps * slots as u128;
        if product > budget {
            return Err(BaselineError::BudgetExceeded { product, budget });
        }

        match s.horizon {
            Horizon::Finite(horizon) => {
                let mut values = vec![Vec::new(); horizon];
                let mut actions = vec![Vec::new(); horizon];
                let mut next: Vec<[f64; 2]> = vec![[0.0; 2]; n_b];
                for k in (1..=horizon).rev() {
                    let (vals, acts) = discrete_stage(s, &grid, delta, &h_atoms[k - 1], &next, k);
                    next = vals.clone();
                    values[k - 1] = vals;
                    actions[k - 1] = acts;
                }
                Ok(DiscreteMdp { delta, grid, quantizers, values, actions, horizon: Some(horizon), iterations: horizon })
            }
            Horizon::Infinite => {
                let mut current: Vec<[f64; 2]> = vec![[0.0; 2]; n_b];
                let mut iterations = 0;
                let mut cap = None;
                loop {
                    let (vals, acts) = discrete_stage(s, &grid, delta, &h_atoms[0], &current, 1);
                    iterations += 1;
                    let d = vals
                        .iter()
                        .zip(&current)
                        .map(|(a, b)| (a[0] - b[0]).abs().max((a[1] - b[1]).abs()))
                        .fold(0.0f64, f64::max);
                    current = vals;
                    if d <= alpha {
                        return Ok(DiscreteMdp {
                            delta,
                            grid,
                            quantizers,
                            values: vec![current],
                            actions: vec![acts],
                            horizon: None,
                            iterations,
                        });
                    }
                    if cap.is_none() {
                        let est = if s.gamma > 0.0 && d > alpha {
                            (10.0 * (alpha / d).log(s.gamma).ceil()) as usize
                        } else {
                            0
                        };
                        cap = Some(est.max(crate::planner::MIN_ITERATION_CAP));
                    }
                    if iterations >= cap.unwrap() {
                        return Err(BaselineError::NotConverged(iterations));
                    }
                }
            }
        }
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }

    /// Values over the quantized battery grid for 1-based `slot`, indexed by
    /// `[b_index][access]`.
    pub fn values_at(&self, slot: usize) -> &[[f64; 2]] {
        let idx = if self.horizon.is_some() { slot - 1 } else { 0 };
        &self.values[idx]
    }

    /// Greedy action for an online observation. The battery is quantized
    /// downwards so the stored action, feasible at the grid level, stays
    /// feasible at the true level.
    pub fn action(&self, obs: &Observation, s: &Scenario) -> f64 {
        if obs.a == AccessState::Denied {
            return 0.0;
        }
        let slot_idx = match self.horizon {
            Some(horizon) => obs.k.unwrap_or(1).clamp(1, horizon) - 1,
            None => 0,
        };
        let slack = 1e-12 * s.b_max.max(1.0);
        let b_idx = self.grid.points().partition_point(|&pt| pt <= obs.b + slack).saturating_sub(1);
        let law_idx = slot_idx.min(self.quantizers.len() - 1);
        let h_idx = self.quantizers[law_idx].index_of(obs.h);
        self.actions[slot_idx][b_idx][h_idx]
    }

    /// Dumps the value table for one slot in the shared tabular format.
    pub fn table_dump(&self, slot: usize) -> String {
        let mut out = String::from("b\tv_a0\tv_a1\n");
        for (i, &b) in self.grid.points().iter().enumerate() {
            let v = self.values_at(slot)[i];
            out.push_str(&format!("{}\t{}\t{}\n", b, v[0], v[1]));
        }
        out
    }
}

/// Bins a continuous law at step `delta` (bin mass as probability, bin
/// conditional mean as atom), truncated at the 1 - 1e-6 quantile; discrete
/// laws keep their atoms.
fn quantize_channel(law: &ChannelLaw, delta: f64) -> (Vec<(f64, f64)>, GainQuantizer) {
    if let Some(atoms) = law.atoms() {
        let values = atoms.iter().map(|&(h, _)| h).collect();
        return (atoms, GainQuantizer::Atoms { values });
    }
    let hi = law.quantile(1.0 - 1e-6);
    let count = (hi / delta).ceil().max(1.0) as usize;
    let rule = GaussLegendre::new(16);
    let mut atoms = Vec::with_capacity(count);
    let mut total = 0.0;
    for j in 0..count {
        let lo = j as f64 * delta;
        let hi_edge = ((j + 1) as f64 * delta).min(hi);
        let mass = (law.cdf(hi_edge) - law.cdf(lo)).max(0.0);
        let center = 0.5 * (lo + hi_edge);
        if mass <= 0.0 {
            atoms.push((center, 0.0));
            continue;
        }
        let first_moment = rule.integrate(&|h| h * law.density(h), lo, hi_edge).unwrap_or(mass * center);
        atoms.push((first_moment / mass, mass));
        total += mass;
    }
    for a in &mut atoms {
        a.1 /= total;
    }
    (atoms, GainQuantizer::Binned { step: delta, count })
}

/// One stage of the discrete DP: exhaustive action search per quantized
/// state, battery transitions rounded to the nearest grid point.
fn discrete_stage(
    s: &Scenario,
    grid: &BatteryGrid,
    delta: f64,
    h_atoms: &[(f64, f64)],
    next: &[[f64; 2]],
    k: usize,
) -> (Vec<[f64; 2]>, Vec<Vec<f64>>) {
    let e = s.harvest.e_at(k);
    let eps_atoms = s.harvest.error_law.atoms();
    let points = grid.points();
    let n_b = points.len();
    let round_idx = |x: f64| ((x / delta).round() as isize).clamp(0, n_b as isize - 1) as usize;

    let future = |b: f64, p: f64, a: AccessState| -> f64 {
        let pi = s.access.step_distribution(a);
        let mut total = 0.0;
        for &(eps, rho) in &eps_atoms {
            let target = (b + e + eps - p * s.t_c).min(s.b_max);
            let idx = round_idx(target);
            total += rho * (pi[0] * next[idx][0] + pi[1] * next[idx][1]);
        }
        s.gamma * total
    };

    // Payoff at zero power is zero for log-rate; a general payoff may pay
    // even in a denied slot.
    let idle_payoff: f64 = if s.payoff.is_log_rate() {
        0.0
    } else {
        h_atoms.iter().map(|&(h, prob)| prob * s.payoff.rate(0.0, h)).sum()
    };

    let rows: Vec<([f64; 2], Vec<f64>)> = (0..n_b)
        .into_par_iter()
        .map(|bi| {
            let b = points[bi];
            let v0 = idle_payoff + future(b, 0.0, AccessState::Denied);
            let p_cap = s.p_max.min(b / s.t_c);
            let n_act = (p_cap / delta).floor() as usize + 1;
            let mut v1 = 0.0;
            let mut acts = Vec::with_capacity(h_atoms.len());
            for &(h, prob) in h_atoms {
                let mut best = f64::NEG_INFINITY;
                let mut best_p = 0.0;
                for ai in 0..n_act {
                    let p = ai as f64 * delta;
                    let val = s.payoff.rate(p, h) + future(b, p, AccessState::Granted);
                    if val > best {
                        best = val;
                        best_p = p;
                    }
                }
                v1 += prob * best;
                acts.push(best_p);
            }
            ([v0, v1], acts)
        })
        .collect();

    let mut values = Vec::with_capacity(n_b);
    let mut actions = Vec::with_capacity(n_b);
    for (v, a) in rows {
        values.push(v);
        actions.push(a);
    }
    (values, actions)
}

/// Finite-horizon values of the grid-exact discrete-action construction:
/// identical to the solver's backup except that the per-gain maximization
/// runs over the grid multiples `{0, delta, 2 delta, ...}` instead of the
/// whole interval. The solver's values dominate these pointwise.
pub fn discrete_action_plan(s: &Scenario, delta: f64) -> Result<Vec<PwlValue>, BaselineError> {
    let horizon = match s.horizon {
        Horizon::Finite(k) => k,
        Horizon::Infinite => return Err(BaselineError::WrongHorizon("finite")),
    };
    let grid = BatteryGrid::new(s.b_max, delta)?;
    let mut out: Vec<Option<PwlValue>> = vec![None; horizon];
    let mut w_next = PwlValue::zeros(grid.clone());
    for k in (1..=horizon).rev() {
        let ctx = SlotContext::for_slot(s, k);
        let points = grid.points().to_vec();
        let rows: Vec<Result<(f64, f64), BaselineError>> = points
            .par_iter()
            .map(|&b| {
                let denied = build_future_value(&w_next, b, AccessState::Denied, &ctx)?;
                let idle = if ctx.payoff.is_log_rate() {
                    0.0
                } else {
                    expected_over_channel(|h| ctx.payoff.rate(0.0, h), ctx.channel, &[])?
                };
                let v0 = idle + denied.value_at_zero();

                let fv = build_future_value(&w_next, b, AccessState::Granted, &ctx)?;
                let p_cap = fv.upper();
                let n_act = (p_cap / delta).floor() as usize + 1;
                let hints = fv.derivative.gain_breakpoints();
                let v1 = expected_over_channel(
                    |h| {
                        let mut best = f64::NEG_INFINITY;
                        for ai in 0..n_act {
                            let p = ai as f64 * delta;
                            best = best.max(ctx.payoff.rate(p, h) + fv.eval(p));
                        }
                        best
                    },
                    ctx.channel,
                    &hints,
                )?;
                Ok((v0, v1))
            })
            .collect();
        let mut denied = Vec::with_capacity(points.len());
        let mut granted = Vec::with_capacity(points.len());
        for r in rows {
            let (v0, v1) = r?;
            denied.push(v0);
            granted.push(v1);
        }
        let value = PwlValue::new(grid.clone(), denied, granted)?;
        w_next = value.clone();
        out[k - 1] = Some(value);
    }
    Ok(out.into_iter().map(Option::unwrap).collect())
}

/// Power sequence and payoff of the offline non-causal optimum for one
/// realization.
#[derive(Debug, Clone)]
pub struct OfflineSolution {
    pub powers: Vec<f64>,
    pub payoff: f64,
}

/// Solves the deterministic-equivalent problem — gains, access states and
/// net arrivals all known — by backward induction on a fine battery grid
/// with the per-stage maximization done in closed form against the
/// next-stage interpolant, then a forward pass at the continuous battery
/// level.
///
/// With spacing `delta_ref` the payoff is within the usual interpolation
/// error bound of the true optimum; callers pass `delta_ref = delta / 10`.
pub fn offline_noncausal_optimum(
    real: &Realization,
    s: &Scenario,
    delta_ref: f64,
) -> Result<OfflineSolution, BaselineError> {
    if real.is_empty() {
        return Err(BaselineError::BadRealization("empty realization".into()));
    }
    let horizon = real.len();
    let grid = BatteryGrid::new(s.b_max, delta_ref)?;
    let error_law = crate::models::ErrorLaw::None;

    // Stage value functions D_k, k = 1..=horizon+1; both access branches
    // hold the same samples because the realization fixes the access states.
    let mut stages: Vec<PwlValue> = vec![PwlValue::zeros(grid.clone()); horizon + 1];
    for k in (1..=horizon).rev() {
        let net = s.harvest.e_at(k) + real.eps[k - 1];
        let ctx = SlotContext {
            channel: s.channel.law_at(k),
            e: net,
            error_law: &error_law,
            chain: &s.access,
            payoff: &s.payoff,
            p_max: s.p_max,
            t_c: s.t_c,
            gamma: s.gamma,
        };
        let h = real.h[k - 1];
        let transmitting = real.a[k - 1] == AccessState::Granted && h > 0.0;
        let next = stages[k].clone();
        let samples: Vec<Result<f64, BaselineError>> = grid
            .points()
            .par_iter()
            .map(|&b| {
                if transmitting {
                    let fv = build_future_value(&next, b, AccessState::Granted, &ctx)?;
                    let p = if ctx.payoff.is_log_rate() {
                        closed_form_allocation(&fv.derivative, h)?
                    } else {
                        crate::bellman::bisection_allocation(&fv, ctx.payoff, h)?
                    };
                    Ok(ctx.payoff.rate(p, h) + fv.eval(p))
                } else {
                    // No transmission: the battery just absorbs the arrival.
                    let x = (b + net).min(s.b_max);
                    Ok(ctx.gamma * next.eval(x, AccessState::Granted)?)
                }
            })
            .collect();
        let mut vals = Vec::with_capacity(samples.len());
        for v in samples {
            vals.push(v?);
        }
        stages[k - 1] = PwlValue::new(grid.clone(), vals.clone(), vals)?;
    }

    // Forward pass at the continuous battery level.
    let mut powers = Vec::with_capacity(horizon);
    let mut payoff = 0.0;
    let mut b = s.b0;
    let mut discount = 1.0;
    for k in 1..=horizon {
        let net = s.harvest.e_at(k) + real.eps[k - 1];
        let h = real.h[k - 1];
        let p = if real.a[k - 1] == AccessState::Granted && h > 0.0 {
            let ctx = SlotContext {
                channel: s.channel.law_at(k),
                e: net,
                error_law: &error_law,
                chain: &s.access,
                payoff: &s.payoff,
                p_max: s.p_max,
                t_c: s.t_c,
                gamma: s.gamma,
            };
            let fv = build_future_value(&stages[k], b, AccessState::Granted, &ctx)?;
            if ctx.payoff.is_log_rate() {
                closed_form_allocation(&fv.derivative, h)?
            } else {
                crate::bellman::bisection_allocation(&fv, ctx.payoff, h)?
            }
        } else {
            0.0
        };
        if real.a[k - 1] == AccessState::Granted {
            payoff += discount * s.payoff.rate(p, h);
        }
        powers.push(p);
        b = (b + net - p * s.t_c).min(s.b_max).max(0.0);
        discount *= s.gamma;
    }
    Ok(OfflineSolution { powers, payoff })
}
