//! Augmented-Lagrangian training of MBR.
//!
//! Each iteration minimizes
//!
//! ```text
//! C = ERR + sum_i phi_rgv_i rgv_i + rho_rgv/2 (sum_i rgv_i)^2
//!         + sum_i phi_irv_i irv_i + rho_irv/2 (sum_i irv_i)^2
//! ```
//!
//! over one batch with a plain gradient step. Misreports are found first by
//! projected gradient ascent and then held fixed while differentiating, so
//! `C` is an ordinary function of the network parameters. Multipliers move
//! every `Q` iterations; the penalty coefficients grow on a fixed epoch
//! schedule.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::metrics::{best_response, owner_utilities};
use super::{expected_privacy, MbrConfig, MbrInput, MbrModel};
use crate::aggregation::varopt_err_with_grad;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ldp::ClipBound;
use crate::market::{generate_bid_profile, uniform, BidProfile, MarketConfig};
use crate::nn::NetworkGradients;

/// A reported profile together with the buyer's financial budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarketInstance {
    pub profile: BidProfile,
    pub budget: f64,
}

impl MarketInstance {
    pub fn input(&self, m: usize) -> Result<MbrInput> {
        MbrInput::from_profile(&self.profile, m, self.budget)
    }
}

/// `count` profiles from `market`, each with a budget drawn uniformly from
/// `budget_range`.
pub fn sample_instances<R: Rng + ?Sized>(
    market: &MarketConfig,
    budget_range: (f64, f64),
    count: usize,
    rng: &mut R,
) -> Result<Vec<MarketInstance>> {
    let (lo, hi) = budget_range;
    if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
        return Err(Error::Config(format!("budget range [{lo}, {hi}] must lie in (0, inf)")));
    }
    (0..count)
        .map(|_| {
            let profile = generate_bid_profile(market, rng)?;
            Ok(MarketInstance {
                profile,
                budget: uniform(rng, lo, hi),
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub model: MbrConfig,
    pub market: MarketConfig,
    pub budget_range: (f64, f64),
    /// `T`
    pub batches: usize,
    /// `K`
    pub batch_size: usize,
    pub epochs: usize,
    /// `R`
    pub misreport_rounds: usize,
    /// `gamma`
    pub misreport_step: f64,
    /// `Q`
    pub multiplier_interval: usize,
    /// `psi`
    pub learning_rate: f64,
    pub initial_multiplier: f64,
    pub rho_rgv: f64,
    pub rho_irv: f64,
    pub rho_rgv_increment: f64,
    pub rho_irv_increment: f64,
    pub rho_increment_every: usize,
    pub clip: f64,
    pub seed: u64,
    pub execution: Execution,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: MbrConfig::default(),
            market: MarketConfig::default(),
            budget_range: (1.0, 40.0),
            batches: 100,
            batch_size: 1000,
            epochs: 100,
            misreport_rounds: 25,
            misreport_step: 0.1,
            multiplier_interval: 10,
            learning_rate: 0.001,
            initial_multiplier: 1.0,
            rho_rgv: 1.0,
            rho_irv: 4.0,
            rho_rgv_increment: 1.0,
            rho_irv_increment: 3.0,
            rho_increment_every: 2,
            clip: 1.0,
            seed: 0,
            execution: Execution::Parallel,
        }
    }
}

impl TrainConfig {
    /// Small configuration that trains in minutes on one core: five owners,
    /// five sub-bids, 10k profiles and 20 epochs.
    pub fn desk() -> Self {
        Self {
            model: MbrConfig {
                n: 5,
                m: 5,
                hidden: vec![32, 32],
                money_scale: 20.0,
                privacy_scale: 5.0,
            },
            market: MarketConfig {
                n: 5,
                ..MarketConfig::default()
            },
            budget_range: (1.0, 20.0),
            batches: 100,
            batch_size: 100,
            epochs: 20,
            ..Self::default()
        }
    }

    /// The `T x K` training profiles, drawn from a stream of `seed` that
    /// the weight initialization does not use.
    pub fn training_sample(&self) -> Result<Vec<MarketInstance>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        sample_instances(&self.market, self.budget_range, self.sample_size(), &mut rng)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.market.validate()?;
        if self.market.n != self.model.n {
            return Err(Error::Config(format!(
                "market has {} owners but the model expects {}",
                self.market.n, self.model.n
            )));
        }
        if self.batches == 0 || self.batch_size == 0 {
            return Err(Error::Config("T and K must be at least 1".into()));
        }
        if self.multiplier_interval == 0 || self.rho_increment_every == 0 {
            return Err(Error::Config("update intervals must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.misreport_step >= 0.0) {
            return Err(Error::Config("step sizes must be non-negative".into()));
        }
        if !(self.rho_rgv > 0.0 && self.rho_irv > 0.0) {
            return Err(Error::Config("penalty coefficients must be positive".into()));
        }
        ClipBound::new(self.clip)?;
        Ok(())
    }

    pub fn sample_size(&self) -> usize {
        self.batches * self.batch_size
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub phi_rgv: Vec<f64>,
    pub phi_irv: Vec<f64>,
    pub rho_rgv: f64,
    pub rho_irv: f64,
    pub epoch: usize,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig) -> Self {
        Self {
            phi_rgv: vec![cfg.initial_multiplier; cfg.model.n],
            phi_irv: vec![cfg.initial_multiplier; cfg.model.n],
            rho_rgv: cfg.rho_rgv,
            rho_irv: cfg.rho_irv,
            epoch: 0,
            iteration: 0,
        }
    }

    /// `phi <- phi + rho * violation`
    pub fn update_multipliers(&mut self, rgv: &[f64], irv: &[f64]) {
        for (p, v) in self.phi_rgv.iter_mut().zip(rgv) {
            *p += self.rho_rgv * v;
        }
        for (p, v) in self.phi_irv.iter_mut().zip(irv) {
            *p += self.rho_irv * v;
        }
    }
}

/// Value of the Lagrangian on one batch and its parameter gradients.
#[derive(Debug, Clone)]
pub struct LagrangianEval {
    pub value: f64,
    pub err_hat: f64,
    pub rgv: Vec<f64>,
    pub irv: Vec<f64>,
    pub allocation_grad: NetworkGradients,
    pub payment_grad: NetworkGradients,
}

/// Best-response misreport slots, `[instance][owner] -> M + 1 values`.
pub fn find_misreports(
    model: &MbrModel,
    batch: &[MarketInstance],
    rounds: usize,
    step: f64,
    exec: Execution,
) -> Result<Vec<Vec<Vec<f64>>>> {
    exec.map(batch, |inst| -> Result<Vec<Vec<f64>>> {
        let input = inst.input(model.m())?;
        (0..model.n())
            .map(|i| best_response(model, &input, i, &inst.profile.bids()[i], rounds, step).map(|b| b.slots))
            .collect()
    })
    .into_iter()
    .collect()
}

struct ProfileValues {
    utilities: Vec<f64>,
    gains: Vec<f64>,
    err: f64,
}

const GRAD_CHUNK: usize = 16;

/// Evaluates the Lagrangian with the given misreports held fixed.
pub fn lagrangian_and_gradient(
    model: &MbrModel,
    batch: &[MarketInstance],
    misreports: &[Vec<Vec<f64>>],
    state: &TrainState,
    clip: ClipBound,
    exec: Execution,
) -> Result<LagrangianEval> {
    if batch.is_empty() {
        return Err(Error::EmptyData("training batch"));
    }
    if misreports.len() != batch.len() {
        return Err(Error::DimensionMismatch {
            context: "misreports",
            expected: batch.len(),
            actual: misreports.len(),
        });
    }
    let n = model.n();
    let m = model.m();
    let k = batch.len() as f64;

    let pairs: Vec<(&MarketInstance, &Vec<Vec<f64>>)> = batch.iter().zip(misreports).collect();

    let values = exec.map(&pairs, |(inst, mis)| -> Result<ProfileValues> {
        let input = inst.input(m)?;
        let out = model.forward(&input)?;
        let utilities = owner_utilities(&out, &input, &inst.profile);
        let eps = out.epsilons(&input);
        let (err, _) = varopt_err_with_grad(&eps, clip);
        let mut gains = Vec::with_capacity(n);
        for (i, slots) in mis.iter().enumerate() {
            let mut x = input.clone();
            x.set_owner_slots(i, slots);
            let o = model.forward(&x)?;
            let e = expected_privacy(o.row(i), x.privacy_budget(i));
            let u = o.payments[i] - inst.profile.bids()[i].valuation.eval_unchecked(e);
            gains.push(u - utilities[i]);
        }
        Ok(ProfileValues { utilities, gains, err })
    });
    let values = values.into_iter().collect::<Result<Vec<_>>>()?;

    let mut rgv = vec![0.0; n];
    let mut irv = vec![0.0; n];
    let mut err_hat = 0.0;
    for v in &values {
        err_hat += v.err;
        for i in 0..n {
            rgv[i] += v.gains[i].max(0.0);
            irv[i] += (-v.utilities[i]).max(0.0);
        }
    }
    err_hat /= k;
    rgv.iter_mut().chain(irv.iter_mut()).for_each(|x| *x /= k);

    let rgv_total: f64 = rgv.iter().sum();
    let irv_total: f64 = irv.iter().sum();
    let value = err_hat
        + state.phi_rgv.iter().zip(&rgv).map(|(p, r)| p * r).sum::<f64>()
        + 0.5 * state.rho_rgv * rgv_total * rgv_total
        + state.phi_irv.iter().zip(&irv).map(|(p, r)| p * r).sum::<f64>()
        + 0.5 * state.rho_irv * irv_total * irv_total;

    // dC / d rgv_i and dC / d irv_i
    let c_rgv: Vec<f64> = state.phi_rgv.iter().map(|p| p + state.rho_rgv * rgv_total).collect();
    let c_irv: Vec<f64> = state.phi_irv.iter().map(|p| p + state.rho_irv * irv_total).collect();

    let indexed: Vec<usize> = (0..batch.len()).collect();
    let partials = exec.map_chunks(&indexed, GRAD_CHUNK, |chunk| -> Result<(NetworkGradients, NetworkGradients)> {
        let mut ga = model.allocation().zero_gradients();
        let mut gp = model.payment().zero_gradients();
        for &j in chunk {
            let inst = &batch[j];
            let vals = &values[j];
            let input = inst.input(m)?;
            let fwd = model.forward_taped(&input)?;

            // Error bound through eps_i = sum_m z_im budget_i / m.
            let eps: Vec<f64> = (0..n)
                .map(|i| expected_privacy(&fwd.alloc_out[i * (m + 1) + 1..(i + 1) * (m + 1)], input.privacy_budget(i)))
                .collect();
            let (_, d_eps) = varopt_err_with_grad(&eps, clip);
            let mut up_alloc = vec![0.0; fwd.alloc_out.len()];
            for i in 0..n {
                for s in 1..=m {
                    up_alloc[i * (m + 1) + s] = d_eps[i] * input.privacy_budget(i) / s as f64;
                }
            }
            let mut up_pay = vec![0.0; fwd.pay_out.len()];

            // Truthful utilities enter regret with a minus sign and IR
            // violations as -u.
            for i in 0..n {
                let mut coeff = 0.0;
                if vals.gains[i] > 0.0 {
                    coeff -= c_rgv[i];
                }
                if vals.utilities[i] < 0.0 {
                    coeff -= c_irv[i];
                }
                if coeff != 0.0 {
                    let truth = &inst.profile.bids()[i];
                    let (_, ua, up, _) = model.utility_upstream(&input, &fwd.alloc_out, &fwd.pay_out, i, truth);
                    up_alloc.iter_mut().zip(&ua).for_each(|(a, b)| *a += coeff * b);
                    up_pay.iter_mut().zip(&up).for_each(|(a, b)| *a += coeff * b);
                }
            }
            model.allocation().backward_into(fwd.alloc_tape, &up_alloc, &mut ga)?;
            model.payment().backward_into(fwd.pay_tape, &up_pay, &mut gp)?;

            for i in 0..n {
                if vals.gains[i] <= 0.0 {
                    continue;
                }
                let mut x = input.clone();
                x.set_owner_slots(i, &misreports[j][i]);
                let fwd = model.forward_taped(&x)?;
                let truth = &inst.profile.bids()[i];
                let (_, mut ua, mut up, _) = model.utility_upstream(&x, &fwd.alloc_out, &fwd.pay_out, i, truth);
                ua.iter_mut().chain(up.iter_mut()).for_each(|v| *v *= c_rgv[i]);
                model.allocation().backward_into(fwd.alloc_tape, &ua, &mut ga)?;
                model.payment().backward_into(fwd.pay_tape, &up, &mut gp)?;
            }
        }
        Ok((ga, gp))
    });

    let mut allocation_grad = model.allocation().zero_gradients();
    let mut payment_grad = model.payment().zero_gradients();
    for part in partials {
        let (ga, gp) = part?;
        allocation_grad.add_assign(&ga);
        payment_grad.add_assign(&gp);
    }
    allocation_grad.scale(1.0 / k);
    payment_grad.scale(1.0 / k);

    Ok(LagrangianEval {
        value,
        err_hat,
        rgv,
        irv,
        allocation_grad,
        payment_grad,
    })
}

pub const LOG_HEADER: &str = "epoch,lagrangian,err_hat,regret_mean,regret_max,ir_mean,ir_max";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lagrangian: f64,
    pub err_hat: f64,
    pub regret_mean: f64,
    pub regret_max: f64,
    pub ir_mean: f64,
    pub ir_max: f64,
}

impl EpochLog {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.epoch, self.lagrangian, self.err_hat, self.regret_mean, self.regret_max, self.ir_mean, self.ir_max
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: MbrModel,
    pub state: TrainState,
    pub log: Vec<EpochLog>,
}

pub fn train_mbr(cfg: &TrainConfig, sample: &[MarketInstance]) -> Result<TrainOutcome> {
    train_mbr_with(cfg, sample, |_| {})
}

/// Trains from a seeded initialization, reporting each finished epoch to
/// `on_epoch` before moving on.
pub fn train_mbr_with<F: FnMut(&EpochLog)>(
    cfg: &TrainConfig,
    sample: &[MarketInstance],
    mut on_epoch: F,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let needed = cfg.sample_size();
    if sample.len() < needed {
        return Err(Error::Config(format!(
            "training sample has {} profiles, T x K needs {needed}",
            sample.len()
        )));
    }
    let clip = ClipBound::new(cfg.clip)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MbrModel::new(cfg.model.clone(), &mut rng)?;
    let mut state = TrainState::new(cfg);
    let mut log = Vec::with_capacity(cfg.epochs);
    let n = cfg.model.n;

    for epoch in 0..cfg.epochs {
        state.epoch = epoch;
        let mut lagr = 0.0;
        let mut err = 0.0;
        let mut rgv_acc = vec![0.0; n];
        let mut irv_acc = vec![0.0; n];
        for t in 0..cfg.batches {
            let batch = &sample[t * cfg.batch_size..(t + 1) * cfg.batch_size];
            let mis = find_misreports(&model, batch, cfg.misreport_rounds, cfg.misreport_step, cfg.execution)?;
            let eval = lagrangian_and_gradient(&model, batch, &mis, &state, clip, cfg.execution)?;
            if !eval.value.is_finite() || !eval.allocation_grad.is_finite() || !eval.payment_grad.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    iteration: state.iteration,
                    value: eval.value,
                });
            }
            let (alloc, pay) = model.networks_mut();
            alloc.sgd_step(&eval.allocation_grad, cfg.learning_rate)?;
            pay.sgd_step(&eval.payment_grad, cfg.learning_rate)?;
            state.iteration += 1;
            if state.iteration.is_multiple_of(cfg.multiplier_interval) {
                state.update_multipliers(&eval.rgv, &eval.irv);
            }
            lagr += eval.value;
            err += eval.err_hat;
            rgv_acc.iter_mut().zip(&eval.rgv).for_each(|(a, v)| *a += v);
            irv_acc.iter_mut().zip(&eval.irv).for_each(|(a, v)| *a += v);
        }
        let t = cfg.batches as f64;
        rgv_acc.iter_mut().chain(irv_acc.iter_mut()).for_each(|v| *v /= t);
        let summary = super::ViolationSummary::from_per_owner(&rgv_acc, &irv_acc);
        let entry = EpochLog {
            epoch,
            lagrangian: lagr / t,
            err_hat: err / t,
            regret_mean: summary.regret_mean,
            regret_max: summary.regret_max,
            ir_mean: summary.ir_mean,
            ir_max: summary.ir_max,
        };
        on_epoch(&entry);
        log.push(entry);
        if (epoch + 1) % cfg.rho_increment_every == 0 {
            state.rho_rgv += cfg.rho_rgv_increment;
            state.rho_irv += cfg.rho_irv_increment;
        }
    }
    Ok(TrainOutcome { model, state, log })
}
