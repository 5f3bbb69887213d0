//! Approximately optimal transmit-power scheduling for an energy-harvesting,
//! access-controlled transmitter over a fading channel.
//!
//! The solver treats the problem as a Markov decision process whose state is
//! the (continuous) battery level plus a binary channel-access flag. Value
//! functions are kept concave and piecewise linear over a uniform battery
//! grid, which makes every per-slot subproblem a one-dimensional concave
//! maximization with a staircase derivative; for the log-rate payoff that
//! maximization has a closed-form water-filling solution.
//!
//! Module map:
//!
//! - [`pwl`] — piecewise-linear value functions on the battery grid.
//! - [`models`] — channel, access-chain, harvest, payoff and scenario types.
//! - [`quad`] — adaptive Gauss–Legendre quadrature for channel expectations.
//! - [`bellman`] — one backup of the value function and its error bounds.
//! - [`planner`] — finite- and infinite-horizon planning plus online allocation.
//! - [`baselines`] — greedy, balanced, discrete-MDP and offline-optimal policies.
//! - [`sim`] — Monte-Carlo policy evaluation with exact battery dynamics.
//! - [`config`] — flat key-value scenario files.
//! - [`experiments`] — named benchmark suites emitting CSV tables.

pub mod baselines;
pub mod bellman;
pub mod config;
pub mod experiments;
pub mod models;
pub mod planner;
pub mod pwl;
pub mod quad;
pub mod sim;

/// Channel-access permission for one slot.
///
/// Access follows a two-state Markov chain driven by the control center; a
/// denied slot forces zero transmit power.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AccessState {
    Denied,
    Granted,
}

impl AccessState {
    /// Branch index used for per-access-state storage (denied = 0, granted = 1).
    pub fn index(self) -> usize {
        match self {
            AccessState::Denied => 0,
            AccessState::Granted => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<AccessState> {
        match i {
            0 => Some(AccessState::Denied),
            1 => Some(AccessState::Granted),
            _ => None,
        }
    }

    pub const BOTH: [AccessState; 2] = [AccessState::Denied, AccessState::Granted];
}

impl std::fmt::Display for AccessState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.index())
    }
}
