//! Multi-round federated training of a logistic model where every round's
//! gradients are bought through an auction.
//!
//! One round: run the auction on the owners' bids, let every winner clip
//! and perturb its local gradient at the allocated epsilon, combine the
//! noisy gradients with the chosen aggregation rule and take a gradient
//! step. Rounds without winners leave the model untouched.

mod dataset;
mod logistic;

pub use dataset::{
    load_csv_dataset, load_csv_dataset_with_holdout, separable_dataset, synthetic_blobs, Dataset, Partition,
    HOLDOUT_FRACTION,
};
pub use logistic::{accuracy, logistic_gradient, logistic_loss, raw_logistic_gradient};

use std::fmt;
use std::path::PathBuf;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aggregation::{aggregate, err_bound, AggregationWeights, Aggregator, BoundValue};
use crate::allin::all_in;
use crate::error::{Error, Result};
use crate::ldp::{laplace_perturb, ClipBound, GradientVector};
use crate::market::{generate_bid_profile, AuctionOutcome, BidProfile, MarketConfig};
use crate::murba::{murba_auction, MbrMechanism};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mechanism {
    AllIn,
    Murba,
}

impl Mechanism {
    pub fn name(self) -> &'static str {
        match self {
            Mechanism::AllIn => "allin",
            Mechanism::Murba => "murba",
        }
    }
}

impl fmt::Display for Mechanism {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A ready-to-run auction. All-in sees every bid through its single-minded
/// conversion.
#[derive(Clone, Copy)]
pub enum Auctioneer<'a> {
    AllIn,
    Murba(&'a dyn MbrMechanism),
}

impl Auctioneer<'_> {
    pub fn mechanism(&self) -> Mechanism {
        match self {
            Auctioneer::AllIn => Mechanism::AllIn,
            Auctioneer::Murba(_) => Mechanism::Murba,
        }
    }

    pub fn run(&self, profile: &BidProfile, budget: f64) -> Result<AuctionOutcome> {
        match self {
            Auctioneer::AllIn => all_in(&profile.to_single_minded(), budget),
            Auctioneer::Murba(model) => murba_auction(*model, profile, budget),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub rounds: usize,
    pub learning_rate: f64,
    pub clip: f64,
    pub mechanism: Mechanism,
    pub aggregator: Aggregator,
    pub market: MarketConfig,
    /// Seed for the Laplace noise. Bids come from `market.seed`.
    pub seed: u64,
    /// Skip the market: every owner contributes its clipped gradient without
    /// noise and the buyer averages them uniformly.
    pub noiseless: bool,
    pub mbr_checkpoint: Option<PathBuf>,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            learning_rate: 0.01,
            clip: 1.0,
            mechanism: Mechanism::AllIn,
            aggregator: Aggregator::VarOpt,
            market: MarketConfig::default(),
            seed: 0,
            noiseless: false,
            mbr_checkpoint: None,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Domain {
                what: "learning rate",
                constraint: "0 <= eta < inf",
                value: self.learning_rate,
            });
        }
        ClipBound::new(self.clip)?;
        self.market.validate()
    }
}

#[derive(Debug, Clone)]
pub struct TradingRound {
    pub gradient: GradientVector,
    pub outcome: AuctionOutcome,
    pub weights: AggregationWeights,
    pub err_bound: BoundValue,
}

/// One auction plus aggregation at the current weights `w`.
#[allow(clippy::too_many_arguments)]
pub fn run_trading_round<R: Rng + ?Sized>(
    w: &[f64],
    data: &Dataset,
    profile: &BidProfile,
    budget: f64,
    auctioneer: Auctioneer<'_>,
    aggregator: Aggregator,
    clip: ClipBound,
    rng: &mut R,
) -> Result<TradingRound> {
    if profile.len() != data.n_owners() {
        return Err(Error::DimensionMismatch {
            context: "owners in profile vs dataset",
            expected: data.n_owners(),
            actual: profile.len(),
        });
    }
    let outcome = auctioneer.run(profile, budget)?;
    if !outcome.has_winner() {
        return Err(Error::NoWinners);
    }
    let noisy = data
        .partitions()
        .iter()
        .zip(&outcome.epsilons)
        .map(|(part, &eps)| {
            if eps > 0.0 {
                laplace_perturb(&logistic_gradient(w, part, clip)?, eps, clip, rng)
            } else {
                Ok(GradientVector::zeros(w.len()))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let weights = aggregator.weights(&outcome.epsilons)?;
    let gradient = aggregate(&weights, &noisy)?;
    let err_bound = err_bound(&weights, &outcome.epsilons, clip);
    Ok(TradingRound {
        gradient,
        outcome,
        weights,
        err_bound,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RoundMetrics {
    /// 1-based.
    pub round: usize,
    pub accuracy: f64,
    pub err_bound: BoundValue,
    pub total_payment: f64,
    pub winners: usize,
    pub skipped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlReport {
    pub initial_accuracy: f64,
    pub rounds: Vec<RoundMetrics>,
    pub weights: Vec<f64>,
}

impl FlReport {
    pub fn final_accuracy(&self) -> f64 {
        self.rounds.last().map_or(self.initial_accuracy, |r| r.accuracy)
    }
}

fn evaluation_split(data: &Dataset) -> Partition {
    if data.test().is_empty() {
        data.pooled_training()
    } else {
        data.test().clone()
    }
}

/// Runs `cfg.rounds` rounds from `w = 0`. `model` is required for MURBA.
pub fn run_fl(cfg: &SimConfig, data: &Dataset, model: Option<&dyn MbrMechanism>) -> Result<FlReport> {
    cfg.validate()?;
    if cfg.market.n != data.n_owners() {
        return Err(Error::Config(format!(
            "market has {} owners, dataset has {}",
            cfg.market.n,
            data.n_owners()
        )));
    }
    let auctioneer = match (cfg.mechanism, model) {
        (Mechanism::AllIn, _) => Auctioneer::AllIn,
        (Mechanism::Murba, Some(m)) => Auctioneer::Murba(m),
        (Mechanism::Murba, None) => return Err(Error::Config("MURBA needs a trained MBR model".into())),
    };
    let clip = ClipBound::new(cfg.clip)?;
    let profile = generate_bid_profile(&cfg.market, &mut cfg.market.rng())?;
    let mut noise = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval = evaluation_split(data);

    let mut w = vec![0.0; data.dim()];
    let initial_accuracy = accuracy(&w, &eval)?;
    let mut rounds = Vec::with_capacity(cfg.rounds);
    for round in 1..=cfg.rounds {
        let (step, bound, paid, winners) = if cfg.noiseless {
            let grads = data
                .partitions()
                .iter()
                .map(|p| logistic_gradient(&w, p, clip))
                .collect::<Result<Vec<_>>>()?;
            let g = aggregate(&AggregationWeights::uniform(grads.len()), &grads)?;
            (Some(g), BoundValue::Finite(0.0), 0.0, data.n_owners())
        } else {
            match run_trading_round(&w, data, &profile, cfg.market.budget, auctioneer, cfg.aggregator, clip, &mut noise) {
                Ok(t) => {
                    let winners = t.outcome.winners().count();
                    (Some(t.gradient), t.err_bound, t.outcome.total_payment(), winners)
                }
                Err(Error::NoWinners) => (None, BoundValue::Infinite, 0.0, 0),
                Err(e) => return Err(e),
            }
        };
        let skipped = step.is_none();
        if let Some(g) = step {
            w.iter_mut().zip(g.iter()).for_each(|(wi, gi)| *wi -= cfg.learning_rate * gi);
        }
        rounds.push(RoundMetrics {
            round,
            accuracy: accuracy(&w, &eval)?,
            err_bound: bound,
            total_payment: paid,
            winners,
            skipped,
        });
    }
    Ok(FlReport {
        initial_accuracy,
        rounds,
        weights: w,
    })
}

/// Reference learner: full-batch gradient descent on the pooled training
/// rows with the unclipped gradient. Returns the final weights.
pub fn gradient_descent_oracle(data: &Dataset, rounds: usize, learning_rate: f64) -> Result<Vec<f64>> {
    let pooled = data.pooled_training();
    let mut w = vec![0.0; data.dim()];
    for _ in 0..rounds {
        let g = raw_logistic_gradient(&w, &pooled)?;
        w.iter_mut().zip(g.iter()).for_each(|(wi, gi)| *wi -= learning_rate * gi);
    }
    Ok(w)
}

/// Held-out accuracy of `w` (the pooled training rows when nothing was held
/// out).
pub fn evaluate_accuracy(w: &[f64], data: &Dataset) -> Result<f64> {
    accuracy(w, &evaluation_split(data))
}
