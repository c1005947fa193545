//! Owners, bids, valuation functions and auction outcomes.
//!
//! Valuations are the money an owner demands for a given privacy loss. The
//! four continuous families are scaled by a per-owner rate; the step family
//! models single-minded owners who sell all or nothing.

use std::cmp::Ordering;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_non_negative, ensure_positive, Error, Result};

/// Slack allowed when comparing a realized privacy parameter with a budget.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValuationFamily {
    Linear,
    Quadratic,
    SquareRoot,
    Exponential,
    Step,
}

impl ValuationFamily {
    pub const CONTINUOUS: [ValuationFamily; 4] = [
        ValuationFamily::Linear,
        ValuationFamily::Quadratic,
        ValuationFamily::SquareRoot,
        ValuationFamily::Exponential,
    ];

    pub fn is_continuous(self) -> bool {
        self != ValuationFamily::Step
    }
}

/// A non-decreasing valuation `v(eps)` with `v(0) = 0`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ValuationFunction {
    family: ValuationFamily,
    scale: f64,
    #[serde(default)]
    step_threshold: f64,
}

impl ValuationFunction {
    pub fn new(family: ValuationFamily, scale: f64) -> Result<Self> {
        ensure_positive("valuation scale", scale)?;
        Ok(Self {
            family,
            scale,
            step_threshold: 0.0,
        })
    }

    pub fn linear(alpha: f64) -> Result<Self> {
        Self::new(ValuationFamily::Linear, alpha)
    }

    pub fn quadratic(alpha: f64) -> Result<Self> {
        Self::new(ValuationFamily::Quadratic, alpha)
    }

    pub fn square_root(alpha: f64) -> Result<Self> {
        Self::new(ValuationFamily::SquareRoot, alpha)
    }

    pub fn exponential(alpha: f64) -> Result<Self> {
        Self::new(ValuationFamily::Exponential, alpha)
    }

    /// Single-minded valuation: 0 up to `threshold`, `value` beyond it.
    pub fn step(value: f64, threshold: f64) -> Result<Self> {
        ensure_positive("step value", value)?;
        ensure_non_negative("step threshold", threshold)?;
        Ok(Self {
            family: ValuationFamily::Step,
            scale: value,
            step_threshold: threshold,
        })
    }

    pub fn family(&self) -> ValuationFamily {
        self.family
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn step_threshold(&self) -> f64 {
        self.step_threshold
    }

    pub fn eval(&self, eps: f64) -> Result<f64> {
        ensure_non_negative("privacy parameter", eps)?;
        Ok(self.eval_unchecked(eps))
    }

    /// Evaluates without validating `eps`; negative inputs are clamped to 0.
    pub fn eval_unchecked(&self, eps: f64) -> f64 {
        let eps = eps.max(0.0);
        let a = self.scale;
        match self.family {
            ValuationFamily::Linear => a * 2.0 * eps,
            ValuationFamily::Quadratic => a * eps * eps,
            ValuationFamily::SquareRoot => a * 2.0 * eps.sqrt(),
            ValuationFamily::Exponential => a * eps.exp_m1(),
            ValuationFamily::Step => {
                if eps > self.step_threshold {
                    a
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative `v'(eps)`. The square-root family is singular at zero, so
    /// its derivative is evaluated no closer than `1e-6` to the origin.
    pub fn derivative(&self, eps: f64) -> f64 {
        let eps = eps.max(0.0);
        let a = self.scale;
        match self.family {
            ValuationFamily::Linear => 2.0 * a,
            ValuationFamily::Quadratic => 2.0 * a * eps,
            ValuationFamily::SquareRoot => a / eps.max(1e-6).sqrt(),
            ValuationFamily::Exponential => a * eps.exp(),
            ValuationFamily::Step => 0.0,
        }
    }
}

pub fn eval_valuation(f: &ValuationFunction, eps: f64) -> Result<f64> {
    f.eval(eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bid {
    pub valuation: ValuationFunction,
    pub privacy_budget: f64,
}

impl Bid {
    pub fn new(valuation: ValuationFunction, privacy_budget: f64) -> Result<Self> {
        ensure_non_negative("privacy budget", privacy_budget)?;
        Ok(Self {
            valuation,
            privacy_budget,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Bid>", into = "Vec<Bid>")]
pub struct BidProfile {
    bids: Vec<Bid>,
}

impl BidProfile {
    pub fn new(bids: Vec<Bid>) -> Result<Self> {
        if bids.is_empty() {
            return Err(Error::EmptyProfile);
        }
        Ok(Self { bids })
    }

    pub fn bids(&self) -> &[Bid] {
        &self.bids
    }

    pub fn len(&self) -> usize {
        self.bids.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Copy of this profile with owner `i`'s bid replaced.
    pub fn with_bid(&self, i: usize, bid: Bid) -> Self {
        let mut bids = self.bids.clone();
        bids[i] = bid;
        Self { bids }
    }

    pub fn to_single_minded(&self) -> Self {
        Self {
            bids: self.bids.iter().map(to_single_minded).collect(),
        }
    }
}

impl TryFrom<Vec<Bid>> for BidProfile {
    type Error = Error;
    fn try_from(bids: Vec<Bid>) -> Result<Self> {
        Self::new(bids)
    }
}

impl From<BidProfile> for Vec<Bid> {
    fn from(p: BidProfile) -> Self {
        p.bids
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuctionOutcome {
    pub epsilons: Vec<f64>,
    pub payments: Vec<f64>,
}

impl AuctionOutcome {
    pub fn empty(n: usize) -> Self {
        Self {
            epsilons: vec![0.0; n],
            payments: vec![0.0; n],
        }
    }

    pub fn total_payment(&self) -> f64 {
        self.payments.iter().sum()
    }

    pub fn winners(&self) -> impl Iterator<Item = usize> + '_ {
        self.epsilons
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0.0)
            .map(|(i, _)| i)
    }

    pub fn has_winner(&self) -> bool {
        self.epsilons.iter().any(|&e| e > 0.0)
    }

    /// Checks budget feasibility and `eps_i <= reported budget_i`.
    pub fn is_feasible(&self, reported: &BidProfile, budget: f64) -> bool {
        self.epsilons.len() == reported.len()
            && self.payments.len() == reported.len()
            && self.total_payment() <= budget + FEASIBILITY_TOL
            && self
                .epsilons
                .iter()
                .zip(reported.bids())
                .all(|(&e, b)| e >= 0.0 && e <= b.privacy_budget + FEASIBILITY_TOL)
            && self.payments.iter().all(|&p| p >= 0.0)
    }
}

/// An owner's utility. Exceeding the true privacy budget is infinitely bad,
/// which is kept as a distinct variant rather than an IEEE infinity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Utility {
    NegInfinity,
    Finite(f64),
}

impl Utility {
    pub fn finite(self) -> Option<f64> {
        match self {
            Utility::Finite(u) => Some(u),
            Utility::NegInfinity => None,
        }
    }

    pub fn is_neg_infinity(self) -> bool {
        matches!(self, Utility::NegInfinity)
    }
}

impl PartialOrd for Utility {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        match (self, other) {
            (Utility::NegInfinity, Utility::NegInfinity) => Some(Ordering::Equal),
            (Utility::NegInfinity, Utility::Finite(_)) => Some(Ordering::Less),
            (Utility::Finite(_), Utility::NegInfinity) => Some(Ordering::Greater),
            (Utility::Finite(a), Utility::Finite(b)) => a.partial_cmp(b),
        }
    }
}

impl fmt::Display for Utility {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Utility::NegInfinity => write!(f, "-inf"),
            Utility::Finite(u) => write!(f, "{u}"),
        }
    }
}

/// `payment - v(eps)` while `eps` stays within the true budget.
pub fn owner_utility(true_bid: &Bid, eps: f64, payment: f64) -> Result<Utility> {
    ensure_non_negative("privacy parameter", eps)?;
    if !payment.is_finite() {
        return Err(Error::Domain {
            what: "payment",
            constraint: "finite",
            value: payment,
        });
    }
    if eps > true_bid.privacy_budget + FEASIBILITY_TOL {
        return Ok(Utility::NegInfinity);
    }
    Ok(Utility::Finite(payment - true_bid.valuation.eval_unchecked(eps)))
}

/// Collapses a continuous bid into a single-minded one worth `v(budget)`.
/// A zero budget yields a zero-valued step, which All-in rejects as input.
pub fn to_single_minded(b: &Bid) -> Bid {
    let value = b.valuation.eval_unchecked(b.privacy_budget);
    let valuation = ValuationFunction {
        family: ValuationFamily::Step,
        scale: value,
        step_threshold: 0.0,
    };
    Bid {
        valuation,
        privacy_budget: b.privacy_budget,
    }
}

/// Upper end of the privacy-budget draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    /// Lowly sensitive owners, budgets up to 5.0.
    Low,
    /// Highly sensitive owners, budgets up to 2.0.
    High,
}

impl Scenario {
    pub fn sensitivity(self) -> f64 {
        match self {
            Scenario::Low => 5.0,
            Scenario::High => 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MarketConfig {
    pub n: usize,
    pub budget: f64,
    pub sensitivity: f64,
    pub alpha_range: (f64, f64),
    pub budget_range_low: f64,
    pub seed: u64,
}

impl Default for MarketConfig {
    fn default() -> Self {
        Self {
            n: 10,
            budget: 10.0,
            sensitivity: Scenario::Low.sensitivity(),
            alpha_range: (0.5, 1.5),
            budget_range_low: 0.5,
            seed: 0,
        }
    }
}

impl MarketConfig {
    pub fn for_scenario(n: usize, budget: f64, scenario: Scenario, seed: u64) -> Self {
        Self {
            n,
            budget,
            sensitivity: scenario.sensitivity(),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::Config("n must be at least 1".into()));
        }
        ensure_positive("budget", self.budget)?;
        ensure_positive("sensitivity", self.sensitivity)?;
        let (lo, hi) = self.alpha_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!(
                "alpha range [{lo}, {hi}] must lie in (0, inf)"
            )));
        }
        if !(self.budget_range_low >= 0.0 && self.budget_range_low < self.sensitivity) {
            return Err(Error::Config(format!(
                "privacy budget range [{}, {}] is empty",
                self.budget_range_low, self.sensitivity
            )));
        }
        Ok(())
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }
}

/// Draws `cfg.n` owners with a uniformly chosen continuous family, rate and
/// privacy budget.
pub fn generate_bid_profile<R: Rng + ?Sized>(cfg: &MarketConfig, rng: &mut R) -> Result<BidProfile> {
    cfg.validate()?;
    let (lo, hi) = cfg.alpha_range;
    let bids = (0..cfg.n)
        .map(|_| {
            let family = ValuationFamily::CONTINUOUS[rng.random_range(0..4)];
            let alpha = uniform(rng, lo, hi);
            let budget = uniform(rng, cfg.budget_range_low, cfg.sensitivity);
            Bid {
                valuation: ValuationFunction {
                    family,
                    scale: alpha,
                    step_threshold: 0.0,
                },
                privacy_budget: budget,
            }
        })
        .collect();
    BidProfile::new(bids)
}

pub(crate) fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        lo + (hi - lo) * rng.random::<f64>()
    } else {
        lo
    }
}
