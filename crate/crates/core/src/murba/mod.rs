//! MURBA: bid transformation plus the MBR allocation/payment network pair.
//!
//! Each owner's reported bid is expanded into `M` sub-bids offering
//! `budget / m` at `v(budget / m)`. The allocation network emits, per owner,
//! a softmax over `M + 1` slots (slot 0 is the "lose" dummy), so the
//! probabilities on real sub-bids sum to at most one. The payment network
//! emits a softmax over owners and pays `fraction_i * B`, which makes every
//! outcome exhaust the budget exactly. The realized privacy parameter is the
//! expected sub-bid, `sum_m z_im * budget_i / m`.

mod checkpoint;
mod metrics;
mod train;

pub use checkpoint::{checkpoint_name, load_checkpoint, save_checkpoint, CheckpointMeta};
pub use metrics::{
    best_response, empirical_err, empirical_ir, empirical_regret, evaluate, owner_utilities,
    project_misreport, EvalReport, PaymentShift, ViolationSummary,
};
pub use train::{
    find_misreports, lagrangian_and_gradient, sample_instances, train_mbr, train_mbr_with, EpochLog, LagrangianEval,
    MarketInstance, TrainConfig, TrainOutcome, TrainState, LOG_HEADER,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::market::{AuctionOutcome, Bid, BidProfile};
use crate::nn::{DenseNetwork, GradientTape, OutputActivation};

/// One item of the transformed auction: `privacy` units at `valuation`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubBid {
    pub valuation: f64,
    pub privacy: f64,
}

/// `b_i^(m) = (v_i(budget_i / m), budget_i / m)` for `m = 1..=M`.
pub fn transform_bids(profile: &BidProfile, m: usize) -> Result<Vec<Vec<SubBid>>> {
    if m == 0 {
        return Err(Error::Config("M must be at least 1".into()));
    }
    Ok(profile
        .bids()
        .iter()
        .map(|b| {
            (1..=m)
                .map(|k| {
                    let privacy = b.privacy_budget / k as f64;
                    SubBid {
                        valuation: b.valuation.eval_unchecked(privacy),
                        privacy,
                    }
                })
                .collect()
        })
        .collect())
}

/// Raw (unscaled) MBR input: per owner `M` sub-bid valuations and the
/// reported budget, plus the financial budget.
#[derive(Debug, Clone, PartialEq)]
pub struct MbrInput {
    n: usize,
    m: usize,
    /// `valuations[i * m + (k - 1)] = v_i(budget_i / k)`
    valuations: Vec<f64>,
    budgets: Vec<f64>,
    money: f64,
}

impl MbrInput {
    pub fn from_profile(profile: &BidProfile, m: usize, budget: f64) -> Result<Self> {
        if !(budget > 0.0 && budget.is_finite()) {
            return Err(Error::Domain {
                what: "financial budget",
                constraint: "0 < B < inf",
                value: budget,
            });
        }
        let subs = transform_bids(profile, m)?;
        Ok(Self {
            n: profile.len(),
            m,
            valuations: subs.iter().flatten().map(|s| s.valuation).collect(),
            budgets: profile.bids().iter().map(|b| b.privacy_budget).collect(),
            money: budget,
        })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn budget(&self) -> f64 {
        self.money
    }

    pub fn privacy_budget(&self, owner: usize) -> f64 {
        self.budgets[owner]
    }

    /// The `M` valuations followed by the reported budget of one owner.
    pub fn owner_slots(&self, owner: usize) -> Vec<f64> {
        let mut s = self.valuations[owner * self.m..(owner + 1) * self.m].to_vec();
        s.push(self.budgets[owner]);
        s
    }

    pub fn set_owner_slots(&mut self, owner: usize, slots: &[f64]) {
        debug_assert_eq!(slots.len(), self.m + 1);
        self.valuations[owner * self.m..(owner + 1) * self.m].copy_from_slice(&slots[..self.m]);
        self.budgets[owner] = slots[self.m];
    }

    /// Flattened layout `[v_11..v_1M, budget_1, ..., v_n1..v_nM, budget_n, B]`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n * (self.m + 1) + 1);
        for i in 0..self.n {
            out.extend_from_slice(&self.valuations[i * self.m..(i + 1) * self.m]);
            out.push(self.budgets[i]);
        }
        out.push(self.money);
        out
    }
}

/// Allocation probabilities on real sub-bids (`n x M`, row-major) and
/// payments.
#[derive(Debug, Clone, PartialEq)]
pub struct MbrOutput {
    pub z: Vec<f64>,
    pub payments: Vec<f64>,
    pub m: usize,
}

impl MbrOutput {
    pub fn row(&self, owner: usize) -> &[f64] {
        &self.z[owner * self.m..(owner + 1) * self.m]
    }

    /// `eps_i = sum_m z_im * budget_i / m` against the reported budgets.
    pub fn epsilons(&self, input: &MbrInput) -> Vec<f64> {
        (0..input.n)
            .map(|i| expected_privacy(self.row(i), input.budgets[i]))
            .collect()
    }
}

pub(crate) fn expected_privacy(row: &[f64], budget: f64) -> f64 {
    row.iter()
        .enumerate()
        .map(|(k, z)| z * budget / (k + 1) as f64)
        .sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MbrConfig {
    pub n: usize,
    pub m: usize,
    pub hidden: Vec<usize>,
    /// Money normalizer for valuations and the financial budget (`B_max`).
    pub money_scale: f64,
    /// Privacy normalizer for reported budgets (the sensitivity `E`).
    pub privacy_scale: f64,
}

impl Default for MbrConfig {
    fn default() -> Self {
        Self {
            n: 10,
            m: 20,
            hidden: vec![128, 128],
            money_scale: 40.0,
            privacy_scale: 5.0,
        }
    }
}

impl MbrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 {
            return Err(Error::Config("n and M must be at least 1".into()));
        }
        if self.hidden.contains(&0) {
            return Err(Error::Config("hidden layers must be non-empty".into()));
        }
        if !(self.money_scale > 0.0 && self.privacy_scale > 0.0) {
            return Err(Error::Config("input scales must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.n * (self.m + 1) + 1
    }

    fn sizes(&self, outputs: usize) -> Vec<usize> {
        let mut s = vec![self.input_dim()];
        s.extend(&self.hidden);
        s.push(outputs);
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MbrModel {
    config: MbrConfig,
    allocation: DenseNetwork,
    payment: DenseNetwork,
}

pub(crate) struct TapedForward {
    /// Full allocation softmax including the dummy slot, `n x (M + 1)`.
    pub alloc_out: Vec<f64>,
    pub pay_out: Vec<f64>,
    pub alloc_tape: GradientTape,
    pub pay_tape: GradientTape,
}

impl MbrModel {
    pub fn new<R: Rng + ?Sized>(config: MbrConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let allocation = DenseNetwork::glorot(
            &config.sizes(config.n * (config.m + 1)),
            OutputActivation::SoftmaxRows { group: config.m + 1 },
            rng,
        )?;
        let payment = DenseNetwork::glorot(&config.sizes(config.n), OutputActivation::SoftmaxVector, rng)?;
        Ok(Self {
            config,
            allocation,
            payment,
        })
    }

    pub fn zeros(config: MbrConfig) -> Result<Self> {
        config.validate()?;
        let allocation = DenseNetwork::zeros(
            &config.sizes(config.n * (config.m + 1)),
            OutputActivation::SoftmaxRows { group: config.m + 1 },
        )?;
        let payment = DenseNetwork::zeros(&config.sizes(config.n), OutputActivation::SoftmaxVector)?;
        Ok(Self {
            config,
            allocation,
            payment,
        })
    }

    pub fn from_networks(config: MbrConfig, allocation: DenseNetwork, payment: DenseNetwork) -> Result<Self> {
        config.validate()?;
        let dim = config.input_dim();
        let checks = [
            (allocation.input_dim(), dim, "allocation input"),
            (payment.input_dim(), dim, "payment input"),
            (allocation.output_dim(), config.n * (config.m + 1), "allocation output"),
            (payment.output_dim(), config.n, "payment output"),
        ];
        for (actual, expected, context) in checks {
            if actual != expected {
                return Err(Error::DimensionMismatch {
                    context,
                    expected,
                    actual,
                });
            }
        }
        if allocation.output_activation() != (OutputActivation::SoftmaxRows { group: config.m + 1 })
            || payment.output_activation() != OutputActivation::SoftmaxVector
        {
            return Err(Error::Format("unexpected MBR output heads".into()));
        }
        Ok(Self {
            config,
            allocation,
            payment,
        })
    }

    pub fn config(&self) -> &MbrConfig {
        &self.config
    }

    pub fn n(&self) -> usize {
        self.config.n
    }

    pub fn m(&self) -> usize {
        self.config.m
    }

    pub fn allocation(&self) -> &DenseNetwork {
        &self.allocation
    }

    pub fn payment(&self) -> &DenseNetwork {
        &self.payment
    }

    pub(crate) fn networks_mut(&mut self) -> (&mut DenseNetwork, &mut DenseNetwork) {
        (&mut self.allocation, &mut self.payment)
    }

    fn check_shape(&self, input: &MbrInput) -> Result<()> {
        if input.n != self.config.n {
            return Err(Error::DimensionMismatch {
                context: "MBR owners",
                expected: self.config.n,
                actual: input.n,
            });
        }
        if input.m != self.config.m {
            return Err(Error::DimensionMismatch {
                context: "MBR sub-bids",
                expected: self.config.m,
                actual: input.m,
            });
        }
        Ok(())
    }

    /// Network features: valuations and `B` over the money scale, budgets
    /// over the privacy scale.
    pub(crate) fn features(&self, input: &MbrInput) -> Vec<f64> {
        let money = self.config.money_scale;
        let privacy = self.config.privacy_scale;
        let mut x = input.flatten();
        let stride = self.config.m + 1;
        for (j, v) in x.iter_mut().enumerate() {
            let slot = j % stride;
            if j == self.config.n * stride || slot < self.config.m {
                *v /= money;
            } else {
                *v /= privacy;
            }
        }
        x
    }

    fn split_alloc(&self, alloc_out: &[f64]) -> Vec<f64> {
        let m = self.config.m;
        alloc_out
            .chunks_exact(m + 1)
            .flat_map(|row| row[1..].iter().copied())
            .collect()
    }

    pub fn forward(&self, input: &MbrInput) -> Result<MbrOutput> {
        self.check_shape(input)?;
        let x = self.features(input);
        let alloc = self.allocation.predict(&x)?;
        let pay = self.payment.predict(&x)?;
        Ok(MbrOutput {
            z: self.split_alloc(&alloc),
            payments: pay.iter().map(|p| p * input.money).collect(),
            m: self.config.m,
        })
    }

    pub(crate) fn forward_taped(&self, input: &MbrInput) -> Result<TapedForward> {
        self.check_shape(input)?;
        let x = self.features(input);
        let (alloc_out, alloc_tape) = self.allocation.forward(&x)?;
        let (pay_out, pay_tape) = self.payment.forward(&x)?;
        Ok(TapedForward {
            alloc_out,
            pay_out,
            alloc_tape,
            pay_tape,
        })
    }

    /// Upstream gradients of owner `i`'s utility with respect to the two
    /// network outputs, plus `(eps_i, v'(eps_i))`.
    pub(crate) fn utility_upstream(
        &self,
        input: &MbrInput,
        alloc_out: &[f64],
        pay_out: &[f64],
        owner: usize,
        truth: &Bid,
    ) -> (f64, Vec<f64>, Vec<f64>, f64) {
        let m = self.config.m;
        let row = &alloc_out[owner * (m + 1) + 1..(owner + 1) * (m + 1)];
        let budget = input.budgets[owner];
        let eps = expected_privacy(row, budget);
        let utility = pay_out[owner] * input.money - truth.valuation.eval_unchecked(eps);
        let dv = truth.valuation.derivative(eps);
        let mut up_alloc = vec![0.0; alloc_out.len()];
        for k in 1..=m {
            up_alloc[owner * (m + 1) + k] = -dv * budget / k as f64;
        }
        let mut up_pay = vec![0.0; pay_out.len()];
        up_pay[owner] = input.money;
        (utility, up_alloc, up_pay, dv)
    }

    /// Chain rule from feature-space gradient back to owner `i`'s raw slots.
    pub(crate) fn owner_slot_gradient(
        &self,
        feature_grad: &[f64],
        alloc_out: &[f64],
        owner: usize,
        dv: f64,
    ) -> Vec<f64> {
        let m = self.config.m;
        let base = owner * (m + 1);
        let mut g: Vec<f64> = feature_grad[base..base + m]
            .iter()
            .map(|v| v / self.config.money_scale)
            .collect();
        // The budget also scales every sub-bid's privacy directly.
        let row = &alloc_out[base + 1..base + m + 1];
        let direct: f64 = row.iter().enumerate().map(|(k, z)| z / (k + 1) as f64).sum();
        g.push(feature_grad[base + m] / self.config.privacy_scale - dv * direct);
        g
    }
}

/// A mechanism over the transformed-bid input space whose owner utilities
/// can be differentiated with respect to that owner's report.
pub trait MbrMechanism: Sync {
    fn n_owners(&self) -> usize;

    fn sub_bids(&self) -> usize;

    fn run(&self, input: &MbrInput) -> Result<MbrOutput>;

    /// Utility of `owner` under its true bid at this (possibly misreported)
    /// input, and the gradient over the owner's `M + 1` slots.
    fn owner_utility_with_grad(&self, input: &MbrInput, owner: usize, truth: &Bid) -> Result<(f64, Vec<f64>)>;
}

impl MbrMechanism for MbrModel {
    fn n_owners(&self) -> usize {
        self.config.n
    }

    fn sub_bids(&self) -> usize {
        self.config.m
    }

    fn run(&self, input: &MbrInput) -> Result<MbrOutput> {
        self.forward(input)
    }

    fn owner_utility_with_grad(&self, input: &MbrInput, owner: usize, truth: &Bid) -> Result<(f64, Vec<f64>)> {
        let fwd = self.forward_taped(input)?;
        let (u, up_alloc, up_pay, dv) = self.utility_upstream(input, &fwd.alloc_out, &fwd.pay_out, owner, truth);
        let mut g = self.allocation.input_gradient(fwd.alloc_tape, &up_alloc)?;
        let gp = self.payment.input_gradient(fwd.pay_tape, &up_pay)?;
        g.iter_mut().zip(&gp).for_each(|(a, b)| *a += b);
        Ok((u, self.owner_slot_gradient(&g, &fwd.alloc_out, owner, dv)))
    }
}

pub fn mbr_forward(model: &MbrModel, input: &MbrInput) -> Result<MbrOutput> {
    model.forward(input)
}

/// Runs MURBA on a reported profile. Privacy parameters are the expected
/// sub-bid under the allocation probabilities.
pub fn murba_auction<M: MbrMechanism + ?Sized>(
    model: &M,
    profile: &BidProfile,
    budget: f64,
) -> Result<AuctionOutcome> {
    if profile.len() != model.n_owners() {
        return Err(Error::DimensionMismatch {
            context: "MURBA owners",
            expected: model.n_owners(),
            actual: profile.len(),
        });
    }
    let input = MbrInput::from_profile(profile, model.sub_bids(), budget)?;
    let out = model.run(&input)?;
    Ok(AuctionOutcome {
        epsilons: out.epsilons(&input),
        payments: out.payments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market::{generate_bid_profile, MarketConfig, Scenario, ValuationFunction};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config(n: usize, m: usize) -> MbrConfig {
        MbrConfig {
            n,
            m,
            hidden: vec![8, 8],
            money_scale: 20.0,
            privacy_scale: 5.0,
        }
    }

    #[test]
    fn transform_examples() {
        let p = BidProfile::new(vec![Bid::new(ValuationFunction::linear(1.0).unwrap(), 2.0).unwrap()]).unwrap();
        let subs = transform_bids(&p, 2).unwrap();
        assert_eq!(subs[0], vec![SubBid { valuation: 4.0, privacy: 2.0 }, SubBid { valuation: 2.0, privacy: 1.0 }]);
        let one = transform_bids(&p, 1).unwrap();
        assert_eq!(one[0], vec![SubBid { valuation: 4.0, privacy: 2.0 }]);
        assert!(transform_bids(&p, 0).is_err());
        let many = transform_bids(&p, 1000).unwrap();
        assert!(many[0][999].privacy < 0.01 && many[0][999].valuation < 0.01);
    }

    #[test]
    fn input_layout() {
        let p = BidProfile::new(vec![
            Bid::new(ValuationFunction::linear(1.0).unwrap(), 2.0).unwrap(),
            Bid::new(ValuationFunction::quadratic(1.0).unwrap(), 3.0).unwrap(),
        ])
        .unwrap();
        let x = MbrInput::from_profile(&p, 2, 7.0).unwrap();
        assert_eq!(x.flatten(), vec![4.0, 2.0, 2.0, 9.0, 2.25, 3.0, 7.0]);
        assert_eq!(x.owner_slots(1), vec![9.0, 2.25, 3.0]);
    }

    #[test]
    fn zero_model_is_uniform() {
        let model = MbrModel::zeros(small_config(3, 4)).unwrap();
        let cfg = MarketConfig::for_scenario(3, 6.0, Scenario::Low, 1);
        let p = generate_bid_profile(&cfg, &mut cfg.rng()).unwrap();
        let out = model.forward(&MbrInput::from_profile(&p, 4, 6.0).unwrap()).unwrap();
        for z in &out.z {
            assert_relative_eq!(*z, 0.2, epsilon = 1e-15);
        }
        for pay in &out.payments {
            assert_relative_eq!(*pay, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn expected_privacy_example() {
        assert_relative_eq!(expected_privacy(&[0.5, 0.5], 2.0), 1.5);
        assert_eq!(expected_privacy(&[0.0, 0.0, 0.0], 2.0), 0.0);
    }

    #[test]
    fn structural_budget_and_privacy_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for trial in 0..1000 {
            let model = MbrModel::new(small_config(4, 3), &mut rng).unwrap();
            let budget = 1.0 + (trial % 37) as f64;
            let cfg = MarketConfig::for_scenario(4, budget, Scenario::High, trial);
            let p = generate_bid_profile(&cfg, &mut cfg.rng()).unwrap();
            let out = murba_auction(&model, &p, budget).unwrap();
            assert!((out.total_payment() - budget).abs() <= 1e-9 * budget.max(1.0));
            assert!(out.is_feasible(&p, budget));
            let raw = model.forward(&MbrInput::from_profile(&p, 3, budget).unwrap()).unwrap();
            for i in 0..4 {
                assert!(raw.row(i).iter().sum::<f64>() <= 1.0 + 1e-12);
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let model = MbrModel::zeros(small_config(3, 2)).unwrap();
        let cfg = MarketConfig::for_scenario(4, 5.0, Scenario::Low, 0);
        let p = generate_bid_profile(&cfg, &mut cfg.rng()).unwrap();
        assert!(murba_auction(&model, &p, 5.0).is_err());
        let x = MbrInput::from_profile(&p, 2, 5.0).unwrap();
        assert!(model.forward(&x).is_err());
    }

    #[test]
    fn utility_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = MbrModel::new(small_config(3, 3), &mut rng).unwrap();
        let cfg = MarketConfig::for_scenario(3, 8.0, Scenario::Low, 21);
        let p = generate_bid_profile(&cfg, &mut cfg.rng()).unwrap();
        let x = MbrInput::from_profile(&p, 3, 8.0).unwrap();
        for owner in 0..3 {
            let truth = p.bids()[owner];
            let (_, g) = model.owner_utility_with_grad(&x, owner, &truth).unwrap();
            let slots = x.owner_slots(owner);
            for s in 0..slots.len() {
                let h = 1e-6;
                let mut up = x.clone();
                let mut dn = x.clone();
                let mut su = slots.clone();
                let mut sd = slots.clone();
                su[s] += h;
                sd[s] -= h;
                up.set_owner_slots(owner, &su);
                dn.set_owner_slots(owner, &sd);
                let fu = model.owner_utility_with_grad(&up, owner, &truth).unwrap().0;
                let fd = model.owner_utility_with_grad(&dn, owner, &truth).unwrap().0;
                let num = (fu - fd) / (2.0 * h);
                assert!((num - g[s]).abs() <= 1e-5 * num.abs().max(1.0), "slot {s}: {num} vs {}", g[s]);
            }
        }
    }
}
