//! Trading locally differentially private gradients for federated learning.
//!
//! Data owners sell noisy gradients to a budget-limited model buyer. The
//! crate covers the whole pipeline: bid generation, L1 clipping and Laplace
//! perturbation, the BiasOpt/VarOpt aggregation rules and their error
//! bounds, two auctions (All-in for single-minded owners and the learned
//! MURBA for general valuations), the networks behind MURBA, and a small
//! federated simulator on top.

pub mod aggregation;
pub mod allin;
pub mod error;
pub mod exec;
pub mod experiments;
pub mod ldp;
pub mod market;
pub mod murba;
pub mod nn;
pub mod sim;

pub use aggregation::{aggregate, err_bound, mechanism_err_bound, Aggregator, AggregationWeights, BoundValue};
pub use allin::all_in;
pub use error::{Error, Result};
pub use exec::Execution;
pub use ldp::{clip_gradient, laplace_perturb, ClipBound, GradientVector};
pub use market::{
    generate_bid_profile, AuctionOutcome, Bid, BidProfile, MarketConfig, Scenario, Utility, ValuationFamily,
    ValuationFunction,
};
pub use murba::{murba_auction, MbrConfig, MbrModel};
pub use sim::{run_fl, Dataset, Mechanism, SimConfig};
