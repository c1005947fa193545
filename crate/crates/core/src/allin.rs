//! All-in: truthful, budget-feasible auction for single-minded owners.
//!
//! Owners are scanned in ascending unit valuation `V_i / budget_i`. The
//! winner set is the longest prefix whose last member's unit valuation is
//! still covered by `B / sum of budgets in the prefix`; along the scan the
//! unit valuation only grows and the covering price only shrinks, so the
//! test fails at most once. Winners sell their whole budget.
//!
//! Each winner is paid its threshold: the largest unit valuation it could
//! have reported and still won, times its budget. Paying the uniform price
//! `B / sum_{j in W} budget_j` instead would spend the whole budget but lets
//! a loser shade its value, jump ahead of a large owner that blocks the
//! prefix, and collect more than its value. Threshold payments are never
//! below the winner's own unit valuation and never sum past `B`.

use crate::error::{Error, Result};
use crate::market::{AuctionOutcome, BidProfile, ValuationFamily};

pub fn all_in(profile: &BidProfile, budget: f64) -> Result<AuctionOutcome> {
    if !(budget > 0.0 && budget.is_finite()) {
        return Err(Error::Domain {
            what: "financial budget",
            constraint: "0 < B < inf",
            value: budget,
        });
    }
    let bids = profile.bids();
    for (i, b) in bids.iter().enumerate() {
        if b.valuation.family() != ValuationFamily::Step {
            return Err(Error::InvalidBid {
                index: i,
                reason: "All-in requires single-minded (step) valuations".into(),
            });
        }
        if !(b.privacy_budget > 0.0) {
            return Err(Error::InvalidBid {
                index: i,
                reason: "privacy budget must be positive".into(),
            });
        }
        if !(b.valuation.scale() > 0.0) {
            return Err(Error::InvalidBid {
                index: i,
                reason: "step value must be positive".into(),
            });
        }
    }

    let unit: Vec<f64> = bids
        .iter()
        .map(|b| b.valuation.scale() / b.privacy_budget)
        .collect();
    let mut order: Vec<usize> = (0..bids.len()).collect();
    // Stable sort keeps the lowest index first among equal unit valuations.
    order.sort_by(|&a, &b| unit[a].total_cmp(&unit[b]));

    let mut sold = 0.0;
    let mut winners = 0;
    for &i in &order {
        let candidate = sold + bids[i].privacy_budget;
        if unit[i] <= budget / candidate {
            sold = candidate;
            winners += 1;
        } else {
            break;
        }
    }

    let mut outcome = AuctionOutcome::empty(bids.len());
    if winners == 0 {
        return Ok(outcome);
    }
    let mut prefix = Vec::with_capacity(order.len() + 1);
    prefix.push(0.0);
    for &i in &order {
        prefix.push(prefix.last().copied().unwrap_or(0.0) + bids[i].privacy_budget);
    }
    for (pos, &i) in order[..winners].iter().enumerate() {
        let eps = bids[i].privacy_budget;
        let theta = threshold_unit(&order, &unit, &prefix, pos, eps, budget).max(unit[i]);
        outcome.epsilons[i] = eps;
        outcome.payments[i] = theta * eps;
    }
    Ok(outcome)
}

/// Largest unit valuation at which the owner sitting at `pos` of `order`
/// still wins, with everyone else fixed.
///
/// Reinserting the owner after the first `k` others gives the interval
/// `[w_k, min(w_{k+1}, B / (T_k + eps))]`, where `w` are the others' sorted
/// unit valuations and `T_k` their prefix sums. The upper end rises with `k`
/// while `w_{k+1}` stays below the budget share and falls after, so the
/// maximum sits at the first `k` where `w_{k+1}` reaches the share.
fn threshold_unit(order: &[usize], unit: &[f64], prefix: &[f64], pos: usize, eps: f64, budget: f64) -> f64 {
    let others = order.len() - 1;
    let other = |k: usize| if k < pos { order[k] } else { order[k + 1] };
    let sum_before = |k: usize| if k <= pos { prefix[k] } else { prefix[k + 1] - eps };
    let next = |k: usize| if k < others { unit[other(k)] } else { f64::INFINITY };
    let share = |k: usize| budget / (sum_before(k) + eps);

    let (mut lo, mut hi) = (0, others);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if next(mid) >= share(mid) {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    let kc = lo;
    let mut best = 0.0_f64;
    let floor = if kc == 0 { 0.0 } else { unit[other(kc - 1)] };
    if floor <= share(kc) {
        best = share(kc);
    }
    if kc > 0 {
        best = best.max(unit[other(kc - 1)]);
    }
    best
}
