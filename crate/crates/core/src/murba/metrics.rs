use serde::{Deserialize, Serialize};

use super::{MarketInstance, MbrInput, MbrMechanism, MbrOutput};
use crate::aggregation::{err_bound, err_cap, var_opt, ERR_EPS_FLOOR};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::ldp::ClipBound;
use crate::market::{Bid, BidProfile, FEASIBILITY_TOL};

/// Projects an owner's misreport onto the feasible report space: the `M`
/// valuations become non-negative and non-increasing in `m`, and the
/// reported budget is clamped to `[0, true_budget]`.
pub fn project_misreport(slots: &mut [f64], true_budget: f64) {
    let m = slots.len() - 1;
    // Pool-adjacent-violators for a non-increasing fit, then clip at zero.
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(m);
    for &v in &slots[..m] {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let (last, lw) = blocks[blocks.len() - 1];
            let (prev, pw) = blocks[blocks.len() - 2];
            if prev >= last {
                break;
            }
            blocks.pop();
            let w = pw + lw;
            *blocks.last_mut().unwrap() = ((prev * pw as f64 + last * lw as f64) / w as f64, w);
        }
    }
    let mut k = 0;
    for (value, width) in blocks {
        for s in &mut slots[k..k + width] {
            *s = value.max(0.0);
        }
        k += width;
    }
    slots[m] = slots[m].clamp(0.0, true_budget);
}

#[derive(Debug, Clone, PartialEq)]
pub struct BestResponse {
    pub slots: Vec<f64>,
    pub utility: f64,
    pub truthful_utility: f64,
}

impl BestResponse {
    pub fn regret(&self) -> f64 {
        (self.utility - self.truthful_utility).max(0.0)
    }
}

/// `rounds` steps of projected gradient ascent on the owner's utility,
/// starting from the truthful report. The best iterate seen is returned, so
/// the result is never worse than truth-telling.
pub fn best_response<M: MbrMechanism + ?Sized>(
    mech: &M,
    truthful: &MbrInput,
    owner: usize,
    truth: &Bid,
    rounds: usize,
    step: f64,
) -> Result<BestResponse> {
    let mut input = truthful.clone();
    let (u0, mut grad) = mech.owner_utility_with_grad(&input, owner, truth)?;
    let mut slots = input.owner_slots(owner);
    let mut best = BestResponse {
        slots: slots.clone(),
        utility: u0,
        truthful_utility: u0,
    };
    for _ in 0..rounds {
        if grad.iter().any(|g| !g.is_finite()) {
            break;
        }
        for (s, g) in slots.iter_mut().zip(&grad) {
            *s += step * g;
        }
        project_misreport(&mut slots, truth.privacy_budget);
        input.set_owner_slots(owner, &slots);
        let (u, g) = mech.owner_utility_with_grad(&input, owner, truth)?;
        if u > best.utility {
            best.utility = u;
            best.slots.copy_from_slice(&slots);
        }
        grad = g;
    }
    Ok(best)
}

/// Truthful utilities `p_i - v_i(eps_i)` of every owner.
pub fn owner_utilities(output: &MbrOutput, input: &MbrInput, profile: &BidProfile) -> Vec<f64> {
    output
        .epsilons(input)
        .iter()
        .zip(&output.payments)
        .zip(profile.bids())
        .map(|((&e, &p), b)| p - b.valuation.eval_unchecked(e))
        .collect()
}

fn check_batch<M: MbrMechanism + ?Sized>(mech: &M, batch: &[MarketInstance]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::EmptyData("profile batch"));
    }
    if let Some(bad) = batch.iter().find(|b| b.profile.len() != mech.n_owners()) {
        return Err(Error::DimensionMismatch {
            context: "batch profile owners",
            expected: mech.n_owners(),
            actual: bad.profile.len(),
        });
    }
    Ok(())
}

fn column_means(rows: &[Vec<f64>], n: usize) -> Vec<f64> {
    let mut acc = vec![0.0; n];
    for r in rows {
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    acc.iter_mut().for_each(|a| *a /= rows.len() as f64);
    acc
}

/// Per-owner mean of `max(0, u(best response) - u(truth))`.
pub fn empirical_regret<M: MbrMechanism + ?Sized>(
    mech: &M,
    batch: &[MarketInstance],
    rounds: usize,
    step: f64,
    exec: Execution,
) -> Result<Vec<f64>> {
    check_batch(mech, batch)?;
    let rows = exec.map(batch, |inst| -> Result<Vec<f64>> {
        let input = inst.input(mech.sub_bids())?;
        (0..mech.n_owners())
            .map(|i| best_response(mech, &input, i, &inst.profile.bids()[i], rounds, step).map(|b| b.regret()))
            .collect()
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(column_means(&rows, mech.n_owners()))
}

/// Per-owner mean of `max(0, -u(truth))`.
pub fn empirical_ir<M: MbrMechanism + ?Sized>(mech: &M, batch: &[MarketInstance], exec: Execution) -> Result<Vec<f64>> {
    check_batch(mech, batch)?;
    let rows = exec.map(batch, |inst| -> Result<Vec<f64>> {
        let input = inst.input(mech.sub_bids())?;
        let out = mech.run(&input)?;
        Ok(owner_utilities(&out, &input, &inst.profile)
            .into_iter()
            .map(|u| (-u).max(0.0))
            .collect())
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(column_means(&rows, mech.n_owners()))
}

fn allocation_err(epsilons: &[f64], clip: ClipBound) -> f64 {
    if epsilons.iter().all(|&e| e < ERR_EPS_FLOOR) {
        return err_cap(clip);
    }
    let w = var_opt(epsilons).expect("some epsilon is positive");
    err_bound(&w, epsilons, clip).finite().unwrap_or(err_cap(clip))
}

/// Mean VarOpt error bound of the fractional allocations.
pub fn empirical_err<M: MbrMechanism + ?Sized>(
    mech: &M,
    batch: &[MarketInstance],
    clip: ClipBound,
    exec: Execution,
) -> Result<f64> {
    check_batch(mech, batch)?;
    let errs = exec.map(batch, |inst| -> Result<f64> {
        let input = inst.input(mech.sub_bids())?;
        let out = mech.run(&input)?;
        Ok(allocation_err(&out.epsilons(&input), clip))
    });
    let errs = errs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ViolationSummary {
    pub regret_mean: f64,
    pub regret_max: f64,
    pub ir_mean: f64,
    pub ir_max: f64,
}

impl ViolationSummary {
    pub fn from_per_owner(regret: &[f64], ir: &[f64]) -> Self {
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
        let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
        Self {
            regret_mean: mean(regret),
            regret_max: max(regret),
            ir_mean: mean(ir),
            ir_max: max(ir),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub regret: Vec<f64>,
    pub ir: Vec<f64>,
    pub err_hat: f64,
    pub summary: ViolationSummary,
    /// Profiles where payments did not sum to `B`.
    pub budget_violations: usize,
    /// Owner allocations exceeding the reported budget.
    pub privacy_violations: usize,
}

/// Regret, IR, error bound and structural checks on a held-out batch, in a
/// single pass over the profiles.
pub fn evaluate<M: MbrMechanism + ?Sized>(
    mech: &M,
    batch: &[MarketInstance],
    rounds: usize,
    step: f64,
    clip: ClipBound,
    exec: Execution,
) -> Result<EvalReport> {
    check_batch(mech, batch)?;
    let n = mech.n_owners();
    struct Row {
        regret: Vec<f64>,
        ir: Vec<f64>,
        err: f64,
        budget_bad: bool,
        privacy_bad: usize,
    }
    let rows = exec.map(batch, |inst| -> Result<Row> {
        let input = inst.input(mech.sub_bids())?;
        let out = mech.run(&input)?;
        let eps = out.epsilons(&input);
        let total: f64 = out.payments.iter().sum();
        let budget_bad = (total - inst.budget).abs() > 1e-9 * inst.budget.max(1.0)
            || out.payments.iter().any(|&p| p < 0.0);
        let privacy_bad = eps
            .iter()
            .zip(inst.profile.bids())
            .filter(|(&e, b)| e > b.privacy_budget + FEASIBILITY_TOL)
            .count();
        let ir = owner_utilities(&out, &input, &inst.profile)
            .into_iter()
            .map(|u| (-u).max(0.0))
            .collect();
        let regret = (0..n)
            .map(|i| best_response(mech, &input, i, &inst.profile.bids()[i], rounds, step).map(|b| b.regret()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Row {
            regret,
            ir,
            err: allocation_err(&eps, clip),
            budget_bad,
            privacy_bad,
        })
    });
    let rows = rows.into_iter().collect::<Result<Vec<_>>>()?;
    let regret = column_means(&rows.iter().map(|r| r.regret.clone()).collect::<Vec<_>>(), n);
    let ir = column_means(&rows.iter().map(|r| r.ir.clone()).collect::<Vec<_>>(), n);
    Ok(EvalReport {
        summary: ViolationSummary::from_per_owner(&regret, &ir),
        err_hat: rows.iter().map(|r| r.err).sum::<f64>() / rows.len() as f64,
        budget_violations: rows.iter().filter(|r| r.budget_bad).count(),
        privacy_violations: rows.iter().map(|r| r.privacy_bad).sum(),
        regret,
        ir,
    })
}

/// Wraps a mechanism and adds a constant to every payment.
pub struct PaymentShift<'a, M: ?Sized> {
    pub inner: &'a M,
    pub shift: f64,
}

impl<M: MbrMechanism + ?Sized> MbrMechanism for PaymentShift<'_, M> {
    fn n_owners(&self) -> usize {
        self.inner.n_owners()
    }

    fn sub_bids(&self) -> usize {
        self.inner.sub_bids()
    }

    fn run(&self, input: &MbrInput) -> Result<MbrOutput> {
        let mut out = self.inner.run(input)?;
        out.payments.iter_mut().for_each(|p| *p += self.shift);
        Ok(out)
    }

    fn owner_utility_with_grad(&self, input: &MbrInput, owner: usize, truth: &Bid) -> Result<(f64, Vec<f64>)> {
        let (u, g) = self.inner.owner_utility_with_grad(input, owner, truth)?;
        Ok((u + self.shift, g))
    }
}
