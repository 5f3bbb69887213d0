//! Stochastic scenario description: channel fading law, access-control
//! Markov chain, harvest schedule with prediction error, payoff model and
//! the physical constants tying them together.
//!
//! All types are immutable after construction and samplers are pure
//! functions of an explicit seed, so everything here is safe to share
//! across threads.

use crate::quad::{adaptive, GaussLegendre, QuadError};
use crate::AccessState;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use std::sync::{Arc, OnceLock};
use thiserror::Error;

/// Shared 16-point Gauss–Legendre rule; node computation is not free, so it
/// is done once.
fn gl16() -> &'static GaussLegendre {
    static RULE: OnceLock<GaussLegendre> = OnceLock::new();
    RULE.get_or_init(|| GaussLegendre::new(16))
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid parameter: {0}")]
    BadParameter(String),
    #[error("probabilities must lie in [0, 1], got {0}")]
    BadProbability(f64),
    #[error("channel law density integrates to {0}, expected 1 within 1e-8")]
    BadDensity(f64),
    #[error("harvest prediction plus worst-case error is negative in slot {slot}: {value}")]
    NegativeNetHarvest { slot: usize, value: f64 },
    #[error("payoff model failed the concavity spot check near p = {0}")]
    NonConcavePayoff(f64),
    #[error("quadrature failure: {0}")]
    Quad(#[from] QuadError),
    #[error("expectation integrand non-finite at h = {h}")]
    NonFiniteIntegrand { h: f64 },
}

/// Quantile used to truncate continuous channel laws when integrating; the
/// discarded tail mass is far below reporting precision for the slowly
/// growing log-rate integrands.
pub const CHANNEL_TAIL_QUANTILE: f64 = 1.0 - 1e-9;

/// Relative tolerance of the channel-expectation quadrature.
pub const CHANNEL_QUAD_REL_TOL: f64 = 1e-8;

/// Distribution of the per-slot channel gain `h`.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelLaw {
    /// Rayleigh with scale parameter sigma.
    Rayleigh { sigma: f64 },
    /// Exponential with the given mean.
    Exponential { mean: f64 },
    /// Finitely many atoms `(h, probability)`.
    Discrete { atoms: Vec<(f64, f64)> },
    /// A single deterministic gain.
    Degenerate { h0: f64 },
}

impl ChannelLaw {
    pub fn rayleigh(sigma: f64) -> Result<ChannelLaw, ModelError> {
        let law = ChannelLaw::Rayleigh { sigma };
        law.validate()?;
        Ok(law)
    }

    pub fn exponential(mean: f64) -> Result<ChannelLaw, ModelError> {
        let law = ChannelLaw::Exponential { mean };
        law.validate()?;
        Ok(law)
    }

    pub fn discrete(atoms: Vec<(f64, f64)>) -> Result<ChannelLaw, ModelError> {
        let law = ChannelLaw::Discrete { atoms };
        law.validate()?;
        Ok(law)
    }

    pub fn degenerate(h0: f64) -> Result<ChannelLaw, ModelError> {
        let law = ChannelLaw::Degenerate { h0 };
        law.validate()?;
        Ok(law)
    }

    /// Checks the law parameters; for continuous laws, additionally checks by
    /// quadrature that the density mass on the truncated support is 1 within
    /// 1e-8.
    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ChannelLaw::Rayleigh { sigma } => {
                if !(sigma.is_finite() && *sigma > 0.0) {
                    return Err(ModelError::BadParameter(format!("rayleigh sigma {sigma}")));
                }
                self.check_density_mass()
            }
            ChannelLaw::Exponential { mean } => {
                if !(mean.is_finite() && *mean > 0.0) {
                    return Err(ModelError::BadParameter(format!("exponential mean {mean}")));
                }
                self.check_density_mass()
            }
            ChannelLaw::Discrete { atoms } => {
                if atoms.is_empty() {
                    return Err(ModelError::BadParameter("discrete law needs at least one atom".into()));
                }
                let mut total = 0.0;
                for &(h, p) in atoms {
                    if !(h.is_finite() && h >= 0.0) {
                        return Err(ModelError::BadParameter(format!("atom gain {h}")));
                    }
                    if !(p.is_finite() && p >= 0.0) {
                        return Err(ModelError::BadProbability(p));
                    }
                    total += p;
                }
                if (total - 1.0).abs() > 1e-8 {
                    return Err(ModelError::BadDensity(total));
                }
                Ok(())
            }
            ChannelLaw::Degenerate { h0 } => {
                if !(h0.is_finite() && *h0 >= 0.0) {
                    return Err(ModelError::BadParameter(format!("degenerate gain {h0}")));
                }
                Ok(())
            }
        }
    }

    fn check_density_mass(&self) -> Result<(), ModelError> {
        let hi = self.quantile(1.0 - 1e-10);
        let mass = adaptive(gl16(), &|h| self.density(h), 0.0, hi, 1e-10)?;
        if (mass - 1.0).abs() > 1e-8 {
            return Err(ModelError::BadDensity(mass));
        }
        Ok(())
    }

    /// Probability density (continuous laws only; zero elsewhere).
    pub fn density(&self, h: f64) -> f64 {
        if h < 0.0 {
            return 0.0;
        }
        match self {
            ChannelLaw::Rayleigh { sigma } => {
                let s2 = sigma * sigma;
                h / s2 * (-h * h / (2.0 * s2)).exp()
            }
            ChannelLaw::Exponential { mean } => (-h / mean).exp() / mean,
            ChannelLaw::Discrete { .. } | ChannelLaw::Degenerate { .. } => 0.0,
        }
    }

    pub fn cdf(&self, h: f64) -> f64 {
        if h < 0.0 {
            return 0.0;
        }
        match self {
            ChannelLaw::Rayleigh { sigma } => 1.0 - (-h * h / (2.0 * sigma * sigma)).exp(),
            ChannelLaw::Exponential { mean } => 1.0 - (-h / mean).exp(),
            ChannelLaw::Discrete { atoms } => atoms.iter().filter(|(a, _)| *a <= h).map(|(_, p)| p).sum(),
            ChannelLaw::Degenerate { h0 } => {
                if h >= *h0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub fn quantile(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0 - 1e-16);
        match self {
            ChannelLaw::Rayleigh { sigma } => sigma * (-2.0 * (1.0 - u).ln()).sqrt(),
            ChannelLaw::Exponential { mean } => -mean * (1.0 - u).ln(),
            ChannelLaw::Discrete { atoms } => {
                let mut acc = 0.0;
                for &(h, p) in atoms {
                    acc += p;
                    if acc >= u {
                        return h;
                    }
                }
                atoms.last().map(|&(h, _)| h).unwrap_or(0.0)
            }
            ChannelLaw::Degenerate { h0 } => *h0,
        }
    }

    pub fn mean(&self) -> f64 {
        match self {
            ChannelLaw::Rayleigh { sigma } => sigma * (std::f64::consts::PI / 2.0).sqrt(),
            ChannelLaw::Exponential { mean } => *mean,
            ChannelLaw::Discrete { atoms } => atoms.iter().map(|(h, p)| h * p).sum(),
            ChannelLaw::Degenerate { h0 } => *h0,
        }
    }

    /// Atoms of a purely discrete law, if any.
    pub fn atoms(&self) -> Option<Vec<(f64, f64)>> {
        match self {
            ChannelLaw::Discrete { atoms } => Some(atoms.clone()),
            ChannelLaw::Degenerate { h0 } => Some(vec![(*h0, 1.0)]),
            _ => None,
        }
    }

    /// Inverse-CDF sampling, so one uniform draw per gain.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.gen::<f64>())
    }
}

/// Two-state access-control chain with `q = Pr(A' = denied | granted)` and
/// `q_tilde = Pr(A' = denied | denied)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AccessChain {
    pub q: f64,
    pub q_tilde: f64,
}

impl AccessChain {
    pub fn new(q: f64, q_tilde: f64) -> Result<AccessChain, ModelError> {
        for p in [q, q_tilde] {
            if !(p.is_finite() && (0.0..=1.0).contains(&p)) {
                return Err(ModelError::BadProbability(p));
            }
        }
        Ok(AccessChain { q, q_tilde })
    }

    /// One-step transition distribution out of `a`, indexed by
    /// [`AccessState::index`]; the two entries sum to one.
    pub fn step_distribution(&self, a: AccessState) -> [f64; 2] {
        match a {
            AccessState::Granted => [self.q, 1.0 - self.q],
            AccessState::Denied => [self.q_tilde, 1.0 - self.q_tilde],
        }
    }

    /// Stationary distribution, indexed by [`AccessState::index`].
    ///
    /// When both states are absorbing (`q = 0`, `q_tilde = 1`) the chain has
    /// no unique stationary law; we take access-granted, the state the
    /// experiments start from.
    pub fn stationary(&self) -> [f64; 2] {
        let denom = 1.0 + self.q - self.q_tilde;
        if denom <= 1e-12 {
            return [0.0, 1.0];
        }
        let denied = self.q / denom;
        [denied, 1.0 - denied]
    }

    pub fn sample_next<R: Rng>(&self, rng: &mut R, a: AccessState) -> AccessState {
        let p_denied = self.step_distribution(a)[0];
        if rng.gen::<f64>() < p_denied {
            AccessState::Denied
        } else {
            AccessState::Granted
        }
    }

    pub fn sample_stationary<R: Rng>(&self, rng: &mut R) -> AccessState {
        if rng.gen::<f64>() < self.stationary()[0] {
            AccessState::Denied
        } else {
            AccessState::Granted
        }
    }
}

/// Distribution of the additive harvest-prediction error.
#[derive(Debug, Clone, PartialEq)]
pub enum ErrorLaw {
    /// Perfect prediction: the error is identically zero.
    None,
    /// Discrete uniform on `{-v, -v + step, ..., v}`.
    Uniform { v: f64, step: f64 },
    /// Arbitrary atoms `(value, probability)`.
    Discrete { atoms: Vec<(f64, f64)> },
}

impl ErrorLaw {
    pub fn uniform(v: f64, step: f64) -> Result<ErrorLaw, ModelError> {
        if !(v.is_finite() && v >= 0.0) {
            return Err(ModelError::BadParameter(format!("error half-range {v}")));
        }
        if v > 0.0 {
            if !(step.is_finite() && step > 0.0) {
                return Err(ModelError::BadParameter(format!("error step {step}")));
            }
            let ratio = 2.0 * v / step;
            if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) {
                return Err(ModelError::BadParameter(format!(
                    "error range 2*{v} is not a multiple of step {step}"
                )));
            }
        }
        Ok(ErrorLaw::Uniform { v, step })
    }

    /// Materializes the atom list `(value, probability)`.
    pub fn atoms(&self) -> Vec<(f64, f64)> {
        match self {
            ErrorLaw::None => vec![(0.0, 1.0)],
            ErrorLaw::Uniform { v, step } => {
                if *v == 0.0 {
                    return vec![(0.0, 1.0)];
                }
                let n = (2.0 * v / step).round() as usize + 1;
                let p = 1.0 / n as f64;
                (0..n).map(|i| (-v + i as f64 * step, p)).collect()
            }
            ErrorLaw::Discrete { atoms } => atoms.clone(),
        }
    }

    pub fn mean(&self) -> f64 {
        self.atoms().iter().map(|(e, p)| e * p).sum()
    }

    pub fn min_value(&self) -> f64 {
        self.atoms().iter().map(|&(e, _)| e).fold(f64::INFINITY, f64::min)
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match self {
            ErrorLaw::None => 0.0,
            ErrorLaw::Uniform { v, step } => {
                if *v == 0.0 {
                    return 0.0;
                }
                let n = (2.0 * v / step).round() as usize + 1;
                let i = ((rng.gen::<f64>() * n as f64) as usize).min(n - 1);
                -v + i as f64 * step
            }
            ErrorLaw::Discrete { atoms } => {
                let u = rng.gen::<f64>();
                let mut acc = 0.0;
                for &(e, p) in atoms {
                    acc += p;
                    if u < acc {
                        return e;
                    }
                }
                atoms.last().map(|&(e, _)| e).unwrap_or(0.0)
            }
        }
    }

    fn validate(&self) -> Result<(), ModelError> {
        match self {
            ErrorLaw::None => Ok(()),
            ErrorLaw::Uniform { v, step } => ErrorLaw::uniform(*v, *step).map(|_| ()),
            ErrorLaw::Discrete { atoms } => {
                if atoms.is_empty() {
                    return Err(ModelError::BadParameter("error law needs at least one atom".into()));
                }
                let total: f64 = atoms.iter().map(|(_, p)| p).sum();
                for &(e, p) in atoms {
                    if !e.is_finite() {
                        return Err(ModelError::BadParameter(format!("error atom {e}")));
                    }
                    if !(p.is_finite() && p >= 0.0) {
                        return Err(ModelError::BadProbability(p));
                    }
                }
                if (total - 1.0).abs() > 1e-8 {
                    return Err(ModelError::BadDensity(total));
                }
                Ok(())
            }
        }
    }
}

/// Predicted harvested energy per slot plus the law of the prediction error.
#[derive(Debug, Clone, PartialEq)]
pub struct HarvestSchedule {
    e: Vec<f64>,
    pub error_law: ErrorLaw,
}

impl HarvestSchedule {
    /// Constant prediction, the usual infinite-horizon form.
    pub fn constant(e: f64, error_law: ErrorLaw) -> Result<HarvestSchedule, ModelError> {
        HarvestSchedule::per_slot(vec![e], error_law)
    }

    pub fn per_slot(e: Vec<f64>, error_law: ErrorLaw) -> Result<HarvestSchedule, ModelError> {
        if e.is_empty() {
            return Err(ModelError::BadParameter("harvest schedule needs at least one slot".into()));
        }
        error_law.validate()?;
        let min_err = error_law.min_value();
        for (i, &ek) in e.iter().enumerate() {
            if !(ek.is_finite() && ek >= 0.0) {
                return Err(ModelError::BadParameter(format!("harvest prediction {ek} in slot {}", i + 1)));
            }
            // A net arrival below zero could drive the battery negative,
            // which the dynamics never define; reject it up front.
            if ek + min_err < -1e-12 {
                return Err(ModelError::NegativeNetHarvest { slot: i + 1, value: ek + min_err });
            }
        }
        Ok(HarvestSchedule { e, error_law })
    }

    /// Prediction for 1-based slot `k`; a single-entry schedule repeats.
    pub fn e_at(&self, k: usize) -> f64 {
        if self.e.len() == 1 {
            self.e[0]
        } else {
            self.e[(k - 1).min(self.e.len() - 1)]
        }
    }

    pub fn predictions(&self) -> &[f64] {
        &self.e
    }

    pub fn mean_e(&self) -> f64 {
        self.e.iter().sum::<f64>() / self.e.len() as f64
    }
}

type PayoffFn = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

/// A payoff that is continuous, non-decreasing and concave in the power for
/// every fixed gain, supplied as an evaluator plus a derivative in `p`.
#[derive(Clone)]
pub struct GeneralPayoff {
    value: PayoffFn,
    deriv: PayoffFn,
}

impl std::fmt::Debug for GeneralPayoff {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("GeneralPayoff {{ .. }}")
    }
}

impl GeneralPayoff {
    /// Wraps the callables after spot-checking monotonicity and concavity on
    /// random `(p1 < p2 < p3, h)` triples.
    pub fn new<V, D>(value: V, deriv: D) -> Result<GeneralPayoff, ModelError>
    where
        V: Fn(f64, f64) -> f64 + Send + Sync + 'static,
        D: Fn(f64, f64) -> f64 + Send + Sync + 'static,
    {
        let payoff = GeneralPayoff { value: Arc::new(value), deriv: Arc::new(deriv) };
        let mut rng = ChaCha8Rng::seed_from_u64(0x9a7f_11);
        for _ in 0..64 {
            let h = rng.gen_range(0.0..8.0);
            let mut ps = [rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0), rng.gen_range(0.0..20.0)];
            ps.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let [p1, p2, p3] = ps;
            if p3 - p1 < 1e-6 {
                continue;
            }
            let (v1, v2, v3) = ((payoff.value)(p1, h), (payoff.value)(p2, h), (payoff.value)(p3, h));
            if v2 < v1 - 1e-9 {
                return Err(ModelError::NonConcavePayoff(p1));
            }
            let t = (p2 - p1) / (p3 - p1);
            let chord = v1 + t * (v3 - v1);
            if v2 < chord - 1e-9 * (1.0 + chord.abs()) {
                return Err(ModelError::NonConcavePayoff(p2));
            }
        }
        Ok(payoff)
    }
}

/// Payoff model: either the log-rate `log(1 + p h)` in nats, or a general
/// concave payoff that forces the solver onto the bisection path.
#[derive(Debug, Clone)]
pub enum PayoffModel {
    LogRate,
    General(GeneralPayoff),
}

impl PayoffModel {
    pub fn rate(&self, p: f64, h: f64) -> f64 {
        match self {
            PayoffModel::LogRate => (1.0 + p * h).ln(),
            PayoffModel::General(g) => (g.value)(p, h),
        }
    }

    /// Derivative of the payoff in `p` at fixed `h`.
    pub fn rate_deriv(&self, p: f64, h: f64) -> f64 {
        match self {
            PayoffModel::LogRate => h / (1.0 + p * h),
            PayoffModel::General(g) => (g.deriv)(p, h),
        }
    }

    pub fn is_log_rate(&self) -> bool {
        matches!(self, PayoffModel::LogRate)
    }
}

/// Channel law per slot: a single stationary law or one law per slot.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelSpec {
    Stationary(ChannelLaw),
    PerSlot(Vec<ChannelLaw>),
}

impl ChannelSpec {
    /// Law governing 1-based slot `k`.
    pub fn law_at(&self, k: usize) -> &ChannelLaw {
        match self {
            ChannelSpec::Stationary(law) => law,
            ChannelSpec::PerSlot(laws) => &laws[(k - 1).min(laws.len() - 1)],
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        match self {
            ChannelSpec::Stationary(law) => law.validate(),
            ChannelSpec::PerSlot(laws) => {
                if laws.is_empty() {
                    return Err(ModelError::BadParameter("per-slot channel list is empty".into()));
                }
                laws.iter().try_for_each(|l| l.validate())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Horizon {
    Finite(usize),
    Infinite,
}

/// Complete problem description for planning and simulation.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub channel: ChannelSpec,
    pub access: AccessChain,
    /// Initial access state; `None` draws from the chain's stationary law.
    pub initial_access: Option<AccessState>,
    pub harvest: HarvestSchedule,
    pub payoff: PayoffModel,
    /// Maximum transmit power per slot.
    pub p_max: f64,
    /// Battery capacity.
    pub b_max: f64,
    /// Battery level at the start of slot 1.
    pub b0: f64,
    /// Slot length.
    pub t_c: f64,
    /// Discount factor.
    pub gamma: f64,
    pub horizon: Horizon,
}

impl Scenario {
    /// Validates cross-field invariants and returns the scenario.
    pub fn validated(self) -> Result<Scenario, ModelError> {
        self.channel.validate()?;
        if !(self.p_max.is_finite() && self.p_max > 0.0) {
            return Err(ModelError::BadParameter(format!("p_max {}", self.p_max)));
        }
        if !(self.b_max.is_finite() && self.b_max > 0.0) {
            return Err(ModelError::BadParameter(format!("b_max {}", self.b_max)));
        }
        if !(self.b0.is_finite() && (0.0..=self.b_max).contains(&self.b0)) {
            return Err(ModelError::BadParameter(format!("b0 {} outside [0, {}]", self.b0, self.b_max)));
        }
        if !(self.t_c.is_finite() && self.t_c > 0.0) {
            return Err(ModelError::BadParameter(format!("t_c {}", self.t_c)));
        }
        if !(self.gamma.is_finite() && (0.0..=1.0).contains(&self.gamma)) {
            return Err(ModelError::BadParameter(format!("gamma {}", self.gamma)));
        }
        match self.horizon {
            Horizon::Finite(k) => {
                if k == 0 {
                    return Err(ModelError::BadParameter("finite horizon must be at least 1".into()));
                }
                if let ChannelSpec::PerSlot(laws) = &self.channel {
                    if laws.len() != k {
                        return Err(ModelError::BadParameter(format!(
                            "per-slot channel list has {} laws for horizon {k}",
                            laws.len()
                        )));
                    }
                }
                let preds = self.harvest.predictions().len();
                if preds != 1 && preds != k {
                    return Err(ModelError::BadParameter(format!(
                        "harvest schedule has {preds} slots for horizon {k}"
                    )));
                }
            }
            Horizon::Infinite => {
                if self.gamma >= 1.0 {
                    return Err(ModelError::BadParameter(
                        "infinite horizon requires a discount factor below 1".into(),
                    ));
                }
                if matches!(self.channel, ChannelSpec::PerSlot(_)) {
                    return Err(ModelError::BadParameter(
                        "infinite horizon requires a stationary channel law".into(),
                    ));
                }
                if self.harvest.predictions().len() != 1 {
                    return Err(ModelError::BadParameter(
                        "infinite horizon requires a constant harvest prediction".into(),
                    ));
                }
            }
        }
        if let PayoffModel::General(_) = &self.payoff {
            // Already spot-checked at construction of GeneralPayoff.
        }
        Ok(self)
    }

    /// Number of slots a discounted infinite-horizon evaluation is truncated
    /// to so that the discarded tail is below 1e-6 of the payoff scale.
    pub fn eval_horizon(&self) -> usize {
        match self.horizon {
            Horizon::Finite(k) => k,
            Horizon::Infinite => {
                let g = self.gamma.clamp(1e-6, 1.0 - 1e-9);
                ((1e-6f64).ln() / g.ln()).ceil() as usize
            }
        }
    }
}

/// One sampled realization of the exogenous processes.
#[derive(Debug, Clone)]
pub struct Realization {
    pub h: Vec<f64>,
    pub a: Vec<AccessState>,
    pub eps: Vec<f64>,
}

impl Realization {
    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }
}

/// Samples `{h_k, A_k, eps_k}` for `length` slots, deterministically in the
/// seed. Gains are i.i.d. per the slot's law, the access state follows the
/// chain from its stationary law (or the configured fixed start), and errors
/// are i.i.d. from the error law.
pub fn sample_trajectory(s: &Scenario, seed: u64, length: usize) -> Realization {
    assert!(length >= 1, "trajectory length must be at least 1");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut h = Vec::with_capacity(length);
    let mut a = Vec::with_capacity(length);
    let mut eps = Vec::with_capacity(length);
    let mut access = match s.initial_access {
        Some(state) => state,
        None => s.access.sample_stationary(&mut rng),
    };
    for k in 1..=length {
        h.push(s.channel.law_at(k).sample(&mut rng));
        eps.push(s.harvest.error_law.sample(&mut rng));
        a.push(access);
        access = s.access.sample_next(&mut rng, access);
    }
    Realization { h, a, eps }
}

/// Expectation `E_h[f(h)]` under a channel law.
///
/// Discrete laws reduce to the literal weighted atom sum. Continuous laws
/// integrate `f * density` by adaptive Gauss–Legendre quadrature on segments
/// split at the supplied breakpoints (the kinks of `f`), truncated at the
/// tail quantile, with relative tolerance [`CHANNEL_QUAD_REL_TOL`].
pub fn expected_over_channel<F: Fn(f64) -> f64>(
    f: F,
    law: &ChannelLaw,
    breakpoints: &[f64],
) -> Result<f64, ModelError> {
    if let Some(atoms) = law.atoms() {
        let mut total = 0.0;
        for (h, p) in atoms {
            let v = f(h);
            if !v.is_finite() {
                return Err(ModelError::NonFiniteIntegrand { h });
            }
            total += p * v;
        }
        return Ok(total);
    }

    let hi = law.quantile(CHANNEL_TAIL_QUANTILE);
    let mut edges: Vec<f64> = breakpoints.iter().copied().filter(|&b| b > 0.0 && b < hi && b.is_finite()).collect();
    edges.sort_by(|a, b| a.partial_cmp(b).unwrap());
    edges.dedup_by(|a, b| (*a - *b).abs() <= 1e-12 * a.abs().max(1.0));
    let mut cuts = Vec::with_capacity(edges.len() + 2);
    cuts.push(0.0);
    cuts.extend(edges);
    cuts.push(hi);

    let rule = gl16();
    let integrand = |h: f64| f(h) * law.density(h);

    // One coarse pass fixes the absolute tolerance for the adaptive passes.
    let mut rough = 0.0;
    for w in cuts.windows(2) {
        rough += rule.integrate(&integrand, w[0], w[1]).map_err(quad_to_model)?;
    }
    let tol = CHANNEL_QUAD_REL_TOL * rough.abs().max(1e-12) / (cuts.len() - 1) as f64;

    let mut total = 0.0;
    for w in cuts.windows(2) {
        total += adaptive(rule, &integrand, w[0], w[1], tol).map_err(quad_to_model)?;
    }
    Ok(total)
}

fn quad_to_model(e: QuadError) -> ModelError {
    match e {
        QuadError::NonFinite { x } => ModelError::NonFiniteIntegrand { h: x },
        other => ModelError::Quad(other),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::AccessState::{Denied, Granted};

    fn near(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn constant_function_has_unit_expectation() {
        for law in [
            ChannelLaw::rayleigh(1.0).unwrap(),
            ChannelLaw::exponential(2.0).unwrap(),
            ChannelLaw::discrete(vec![(0.5, 0.25), (1.0, 0.5), (2.0, 0.25)]).unwrap(),
            ChannelLaw::degenerate(1.5).unwrap(),
        ] {
            let e = expected_over_channel(|_| 1.0, &law, &[]).unwrap();
            assert!(near(e, 1.0, 1e-7), "law {law:?}: {e}");
        }
    }

    #[test]
    fn identity_recovers_the_mean() {
        let law = ChannelLaw::exponential(2.0).unwrap();
        let e = expected_over_channel(|h| h, &law, &[]).unwrap();
        assert!(near(e, 2.0, 1e-6), "{e}");
        let ray = ChannelLaw::rayleigh(1.3).unwrap();
        let e = expected_over_channel(|h| h, &ray, &[]).unwrap();
        assert!(near(e, ray.mean(), 1e-6), "{e} vs {}", ray.mean());
    }

    // Oracle: a large Monte-Carlo sample of the same expectation.
    #[test]
    fn log_rate_expectation_matches_monte_carlo() {
        let law = ChannelLaw::rayleigh(1.0).unwrap();
        let quad = expected_over_channel(|h| (1.0 + 6.0 * h).ln(), &law, &[]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0xfeed);
        let n = 10_000_000usize;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let v = (1.0 + 6.0 * law.sample(&mut rng)).ln();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let se = (var / n as f64).sqrt();
        assert!(
            (quad - mean).abs() <= 3.0 * se,
            "quad {quad} vs mc {mean} (se {se})"
        );
    }

    #[test]
    fn quadrature_is_self_consistent_under_breakpoint_choice() {
        // Splitting at arbitrary extra points must not change the value
        // beyond the requested tolerance.
        let law = ChannelLaw::rayleigh(0.9).unwrap();
        let f = |h: f64| (1.0 + 3.0 * h).ln().min(1.2);
        let a = expected_over_channel(f, &law, &[]).unwrap();
        let b = expected_over_channel(f, &law, &[0.3, 1.1, 2.2]).unwrap();
        assert!(near(a, b, 1e-7), "{a} vs {b}");
    }

    #[test]
    fn discrete_expectation_is_the_literal_weighted_sum() {
        let atoms = vec![(0.5, 0.25), (1.0, 0.5), (2.0, 0.25)];
        let law = ChannelLaw::discrete(atoms.clone()).unwrap();
        let f = |h: f64| (1.0 + h).ln();
        let want: f64 = atoms.iter().map(|&(h, p)| p * f(h)).sum();
        let got = expected_over_channel(f, &law, &[]).unwrap();
        assert_eq!(got, want);
    }

    #[test]
    fn non_finite_integrand_names_the_gain() {
        let law = ChannelLaw::discrete(vec![(2.0, 1.0)]).unwrap();
        let err = expected_over_channel(|_| f64::NAN, &law, &[]).unwrap_err();
        assert!(matches!(err, ModelError::NonFiniteIntegrand { h } if h == 2.0));
    }

    #[test]
    fn access_step_distribution_examples() {
        let chain = AccessChain::new(0.1, 0.3).unwrap();
        assert_eq!(chain.step_distribution(Granted), [0.1, 0.9]);
        let det = AccessChain::new(0.2, 0.0).unwrap();
        assert_eq!(det.step_distribution(Denied), [0.0, 1.0]);
    }

    #[test]
    fn stationary_fraction_matches_long_simulation() {
        let chain = AccessChain::new(0.1, 0.1).unwrap();
        assert!(near(chain.stationary()[1], 0.9, 1e-12));
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let mut a = chain.sample_stationary(&mut rng);
        let n = 1_000_000usize;
        let mut granted = 0usize;
        for _ in 0..n {
            if a == Granted {
                granted += 1;
            }
            a = chain.sample_next(&mut rng, a);
        }
        let frac = granted as f64 / n as f64;
        assert!(near(frac, 0.9, 0.003), "{frac}");
    }

    #[test]
    fn trajectory_is_deterministic_in_the_seed() {
        let s = test_scenario();
        let r1 = sample_trajectory(&s, 99, 64);
        let r2 = sample_trajectory(&s, 99, 64);
        assert_eq!(r1.h, r2.h);
        assert_eq!(r1.a, r2.a);
        assert_eq!(r1.eps, r2.eps);
        let r3 = sample_trajectory(&s, 100, 64);
        assert_ne!(r1.h, r3.h);
    }

    #[test]
    fn degenerate_channel_yields_constant_gains() {
        let mut s = test_scenario();
        s.channel = ChannelSpec::Stationary(ChannelLaw::degenerate(1.25).unwrap());
        let r = sample_trajectory(&s, 1, 32);
        assert!(r.h.iter().all(|&h| h == 1.25));
    }

    #[test]
    fn trajectory_gain_mean_matches_analytic_moment() {
        let s = test_scenario();
        let n = 1_000_000usize;
        let r = sample_trajectory(&s, 7, n);
        let mean = r.h.iter().sum::<f64>() / n as f64;
        let law = s.channel.law_at(1);
        let analytic = law.mean();
        // Rayleigh variance is (2 - pi/2) sigma^2.
        let var = (2.0 - std::f64::consts::PI / 2.0) * 1.0;
        let se = (var / n as f64).sqrt();
        assert!((mean - analytic).abs() <= 3.0 * se, "{mean} vs {analytic}");
    }

    #[test]
    fn trajectory_access_transitions_converge_to_chain_rates() {
        let s = test_scenario();
        let n = 400_000usize;
        let r = sample_trajectory(&s, 5, n);
        let mut from_granted = [0usize; 2];
        let mut from_denied = [0usize; 2];
        for w in r.a.windows(2) {
            match w[0] {
                Granted => from_granted[w[1].index()] += 1,
                Denied => from_denied[w[1].index()] += 1,
            }
        }
        let q_hat = from_granted[0] as f64 / (from_granted[0] + from_granted[1]) as f64;
        let qt_hat = from_denied[0] as f64 / (from_denied[0] + from_denied[1]) as f64;
        let slack = 4.0 / (n as f64).sqrt();
        assert!((q_hat - s.access.q).abs() < slack, "{q_hat}");
        assert!((qt_hat - s.access.q_tilde).abs() < slack * 3.0, "{qt_hat}");
    }

    #[test]
    fn harvest_rejects_negative_net_arrival() {
        let law = ErrorLaw::uniform(2.0, 0.5).unwrap();
        let err = HarvestSchedule::constant(1.5, law).unwrap_err();
        assert!(matches!(err, ModelError::NegativeNetHarvest { .. }));
    }

    #[test]
    fn uniform_error_atoms_cover_the_range() {
        let law = ErrorLaw::uniform(1.0, 0.5).unwrap();
        let atoms = law.atoms();
        assert_eq!(atoms.len(), 5);
        assert_eq!(atoms[0].0, -1.0);
        assert_eq!(atoms[4].0, 1.0);
        assert!(near(law.mean(), 0.0, 1e-12));
        assert!(near(atoms.iter().map(|(_, p)| p).sum::<f64>(), 1.0, 1e-12));
    }

    #[test]
    fn scenario_validation_catches_bad_fields() {
        let mut s = test_scenario();
        s.b0 = 99.0;
        assert!(s.validated().is_err());
        let mut s = test_scenario();
        s.gamma = 1.0;
        s.horizon = Horizon::Infinite;
        assert!(s.validated().is_err());
    }

    #[test]
    fn general_payoff_rejects_convex_functions() {
        assert!(GeneralPayoff::new(|p, _| p * p, |p, _| 2.0 * p).is_err());
        assert!(GeneralPayoff::new(|p, h| p * h, |_, h| h).is_ok());
    }

    pub(crate) fn test_scenario() -> Scenario {
        Scenario {
            channel: ChannelSpec::Stationary(ChannelLaw::rayleigh(1.0).unwrap()),
            access: AccessChain::new(0.1, 0.1).unwrap(),
            initial_access: None,
            harvest: HarvestSchedule::constant(3.0, ErrorLaw::None).unwrap(),
            payoff: PayoffModel::LogRate,
            p_max: 6.0,
            b_max: 15.0,
            b0: 2.0,
            t_c: 1.0,
            gamma: 0.85,
            horizon: Horizon::Infinite,
        }
    }
}
