//! Aggregation weights for perturbed gradients and their worst-case error
//! bounds.
//!
//! With clipped gradients and Laplace noise, the bias bound of a weighted
//! aggregate is `sum_i |lambda_i - 1/n| L` and the variance bound is
//! `sum_i 8 (lambda_i L / eps_i)^2`. BiasOpt minimizes the first subject to
//! zero weight on owners that sold nothing, VarOpt the second. The error
//! bound is the variance bound plus the squared bias bound.

use std::fmt;
use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ldp::{per_coordinate_variance, ClipBound, GradientVector};

const SIMPLEX_TOL: f64 = 1e-9;

/// A non-negative real that may be `+inf`. Infinity is only ever compared.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub enum BoundValue {
    Finite(f64),
    Infinite,
}

impl BoundValue {
    pub fn finite(self) -> Option<f64> {
        match self {
            BoundValue::Finite(v) => Some(v),
            BoundValue::Infinite => None,
        }
    }

    pub fn is_infinite(self) -> bool {
        matches!(self, BoundValue::Infinite)
    }

    /// IEEE view for reporting (CSV, summary statistics).
    pub fn to_f64(self) -> f64 {
        match self {
            BoundValue::Finite(v) => v,
            BoundValue::Infinite => f64::INFINITY,
        }
    }
}

impl fmt::Display for BoundValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BoundValue::Finite(v) => write!(f, "{v}"),
            BoundValue::Infinite => write!(f, "inf"),
        }
    }
}

/// Weights on the probability simplex.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregationWeights(Vec<f64>);

impl AggregationWeights {
    pub fn new(lambdas: Vec<f64>) -> Result<Self> {
        if lambdas.is_empty() {
            return Err(Error::EmptyData("aggregation weights"));
        }
        if let Some(&l) = lambdas
            .iter()
            .find(|&&l| !(-SIMPLEX_TOL..=1.0 + SIMPLEX_TOL).contains(&l))
        {
            return Err(Error::Domain {
                what: "aggregation weight",
                constraint: "0 <= lambda <= 1",
                value: l,
            });
        }
        let total: f64 = lambdas.iter().sum();
        if (total - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::Domain {
                what: "sum of aggregation weights",
                constraint: "sum = 1",
                value: total,
            });
        }
        Ok(Self(lambdas))
    }

    pub fn uniform(n: usize) -> Self {
        Self(vec![1.0 / n as f64; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for AggregationWeights {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregator {
    BiasOpt,
    VarOpt,
}

impl Aggregator {
    pub fn weights(self, epsilons: &[f64]) -> Result<AggregationWeights> {
        match self {
            Aggregator::BiasOpt => bias_opt(epsilons),
            Aggregator::VarOpt => var_opt(epsilons),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Aggregator::BiasOpt => "biasopt",
            Aggregator::VarOpt => "varopt",
        }
    }
}

impl fmt::Display for Aggregator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// `1/n` to every owner with positive epsilon; the weight left over by the
/// zero-epsilon owners goes to the largest-epsilon owner (lowest index on
/// ties).
pub fn bias_opt(epsilons: &[f64]) -> Result<AggregationWeights> {
    let n = epsilons.len();
    let winners = epsilons.iter().filter(|&&e| e > 0.0).count();
    if winners == 0 {
        return Err(Error::EmptyWinnerSet);
    }
    let share = 1.0 / n as f64;
    let mut lambdas: Vec<f64> = epsilons
        .iter()
        .map(|&e| if e > 0.0 { share } else { 0.0 })
        .collect();
    let top = epsilons
        .iter()
        .enumerate()
        .fold(0, |best, (i, &e)| if e > epsilons[best] { i } else { best });
    lambdas[top] = 1.0 - (winners - 1) as f64 / n as f64;
    Ok(AggregationWeights(lambdas))
}

/// Inverse-variance weights `(1/v_i) / sum_j (1/v_j)`.
pub fn inverse_variance_weights(variances: &[f64]) -> Result<AggregationWeights> {
    if variances.is_empty() {
        return Err(Error::EmptyData("variances"));
    }
    if let Some(&v) = variances.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::Domain {
            what: "variance",
            constraint: "0 < v < inf",
            value: v,
        });
    }
    let precision: f64 = variances.iter().map(|v| 1.0 / v).sum();
    Ok(AggregationWeights(
        variances.iter().map(|v| (1.0 / v) / precision).collect(),
    ))
}

/// Inverse-variance weighting over owners with positive epsilon, which
/// makes `lambda_i` proportional to `eps_i^2`.
pub fn var_opt(epsilons: &[f64]) -> Result<AggregationWeights> {
    let winners: Vec<usize> = (0..epsilons.len()).filter(|&i| epsilons[i] > 0.0).collect();
    if winners.is_empty() {
        return Err(Error::EmptyWinnerSet);
    }
    // The clip bound cancels out of the normalized weights.
    let unit = ClipBound::default();
    let variances = winners
        .iter()
        .map(|&i| per_coordinate_variance(epsilons[i], unit))
        .collect::<Result<Vec<_>>>()?;
    let w = inverse_variance_weights(&variances)?;
    let mut lambdas = vec![0.0; epsilons.len()];
    for (&i, &l) in winners.iter().zip(w.iter()) {
        lambdas[i] = l;
    }
    Ok(AggregationWeights(lambdas))
}

pub fn bias_bound(lambdas: &AggregationWeights, clip: ClipBound) -> f64 {
    let uniform = 1.0 / lambdas.len() as f64;
    lambdas.iter().map(|l| (l - uniform).abs()).sum::<f64>() * clip.get()
}

pub fn var_bound(lambdas: &AggregationWeights, epsilons: &[f64], clip: ClipBound) -> BoundValue {
    let l = clip.get();
    let mut total = 0.0;
    for (&lambda, &eps) in lambdas.iter().zip(epsilons) {
        if lambda > 0.0 {
            if eps <= 0.0 {
                return BoundValue::Infinite;
            }
            total += 8.0 * (lambda * l / eps).powi(2);
        }
    }
    BoundValue::Finite(total)
}

pub fn err_bound(lambdas: &AggregationWeights, epsilons: &[f64], clip: ClipBound) -> BoundValue {
    match var_bound(lambdas, epsilons, clip) {
        BoundValue::Finite(v) => BoundValue::Finite(v + bias_bound(lambdas, clip).powi(2)),
        BoundValue::Infinite => BoundValue::Infinite,
    }
}

/// Error bound of the realized allocation under the given aggregator;
/// infinite when no owner sold any privacy.
pub fn mechanism_err_bound(aggregator: Aggregator, epsilons: &[f64], clip: ClipBound) -> BoundValue {
    match aggregator.weights(epsilons) {
        Ok(w) => err_bound(&w, epsilons, clip),
        Err(_) => BoundValue::Infinite,
    }
}

/// `sum_i lambda_i g_i`.
pub fn aggregate(lambdas: &AggregationWeights, noisy: &[GradientVector]) -> Result<GradientVector> {
    if noisy.len() != lambdas.len() {
        return Err(Error::DimensionMismatch {
            context: "aggregate (owners)",
            expected: lambdas.len(),
            actual: noisy.len(),
        });
    }
    let dim = noisy[0].dim();
    let mut out = vec![0.0; dim];
    for (g, &l) in noisy.iter().zip(lambdas.iter()) {
        if g.dim() != dim {
            return Err(Error::DimensionMismatch {
                context: "aggregate (gradient dimension)",
                expected: dim,
                actual: g.dim(),
            });
        }
        for (o, v) in out.iter_mut().zip(g.iter()) {
            *o += l * v;
        }
    }
    Ok(GradientVector::from_vec_unchecked(out))
}

/// Finite stand-in for the error bound when every allocation is below
/// [`ERR_EPS_FLOOR`].
pub const ERR_EPS_FLOOR: f64 = 1e-6;

pub fn err_cap(clip: ClipBound) -> f64 {
    8.0 * clip.get().powi(2) / (ERR_EPS_FLOOR * ERR_EPS_FLOOR)
}

/// Error bound of VarOpt weights as a smooth function of the allocation,
/// together with its gradient in `eps`.
///
/// With `S = sum eps^2` and `q_i = eps_i^2 / S` the value is
/// `8 L^2 / S + (L sum_i |q_i - 1/n|)^2`. Allocations entirely below
/// [`ERR_EPS_FLOOR`] return [`err_cap`] with a zero gradient.
pub fn varopt_err_with_grad(eps: &[f64], clip: ClipBound) -> (f64, Vec<f64>) {
    let n = eps.len();
    let l = clip.get();
    if eps.iter().all(|&e| e < ERR_EPS_FLOOR) {
        return (err_cap(clip), vec![0.0; n]);
    }
    let s: f64 = eps.iter().map(|e| e * e).sum();
    let uniform = 1.0 / n as f64;
    let q: Vec<f64> = eps.iter().map(|e| e * e / s).collect();
    let signs: Vec<f64> = q.iter().map(|qi| (qi - uniform).signum()).collect();
    let bias = l * q.iter().map(|qi| (qi - uniform).abs()).sum::<f64>();
    let value = 8.0 * l * l / s + bias * bias;

    // d q_i / d eps_j = 2 eps_i delta_ij / S - 2 eps_i^2 eps_j / S^2
    let weighted: f64 = signs.iter().zip(&q).map(|(sg, qi)| sg * qi).sum();
    let grad = eps
        .iter()
        .zip(&signs)
        .map(|(&e, &sg)| {
            let d_var = -16.0 * l * l * e / (s * s);
            let d_bias = l * (2.0 * e / s) * (sg - weighted);
            d_var + 2.0 * bias * d_bias
        })
        .collect();
    (value, grad)
}

/// Grid points of the simplex with spacing `1/steps`.
pub fn simplex_grid(n: usize, steps: usize) -> impl Iterator<Item = Vec<f64>> {
    let mut counts = vec![0usize; n];
    if n > 0 {
        counts[n - 1] = steps;
    }
    let mut done = n == 0;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        let point = counts.iter().map(|&c| c as f64 / steps as f64).collect();
        // Advance: move one unit from the tail into the last non-final slot
        // that can still grow, then reset everything after it.
        let mut advanced = false;
        for k in (0..n.saturating_sub(1)).rev() {
            let used: usize = counts[..=k].iter().sum();
            if used < steps {
                counts[k] += 1;
                for c in counts.iter_mut().take(n - 1).skip(k + 1) {
                    *c = 0;
                }
                counts[n - 1] = steps - counts[..n - 1].iter().sum::<usize>();
                advanced = true;
                break;
            }
        }
        if !advanced {
            done = true;
        }
        Some(point)
    })
}

const ORACLE_MAX_OWNERS: usize = 4;

fn grid_steps(grid_step: f64) -> Result<usize> {
    if !(grid_step > 0.0 && grid_step <= 1.0) {
        return Err(Error::Domain {
            what: "grid step",
            constraint: "0 < step <= 1",
            value: grid_step,
        });
    }
    let steps = (1.0 / grid_step).round();
    if (steps * grid_step - 1.0).abs() > 1e-9 {
        return Err(Error::Domain {
            what: "grid step",
            constraint: "1 / step integral",
            value: grid_step,
        });
    }
    Ok(steps as usize)
}

/// Exhaustive search over the simplex grid for the smallest variance bound.
pub fn brute_force_min_variance(
    epsilons: &[f64],
    clip: ClipBound,
    grid_step: f64,
) -> Result<(AggregationWeights, BoundValue)> {
    let n = epsilons.len();
    if n > ORACLE_MAX_OWNERS {
        return Err(Error::OracleTooLarge {
            n,
            max: ORACLE_MAX_OWNERS,
        });
    }
    if n == 0 {
        return Err(Error::EmptyData("epsilons"));
    }
    let steps = grid_steps(grid_step)?;
    let mut best: Option<(Vec<f64>, BoundValue)> = None;
    for point in simplex_grid(n, steps) {
        let value = var_bound(&AggregationWeights(point.clone()), epsilons, clip);
        if best.as_ref().is_none_or(|(_, b)| value < *b) {
            best = Some((point, value));
        }
    }
    let (w, v) = best.expect("simplex grid is never empty");
    Ok((AggregationWeights(w), v))
}

/// Exhaustive search for the smallest bias bound among grid weights that
/// put zero weight on zero-epsilon owners.
pub fn brute_force_min_bias(
    epsilons: &[f64],
    clip: ClipBound,
    grid_step: f64,
) -> Result<(AggregationWeights, f64)> {
    let n = epsilons.len();
    if n > ORACLE_MAX_OWNERS {
        return Err(Error::OracleTooLarge {
            n,
            max: ORACLE_MAX_OWNERS,
        });
    }
    if epsilons.iter().all(|&e| e <= 0.0) {
        return Err(Error::EmptyWinnerSet);
    }
    let steps = grid_steps(grid_step)?;
    simplex_grid(n, steps)
        .filter(|p| p.iter().zip(epsilons).all(|(&l, &e)| e > 0.0 || l == 0.0))
        .map(|p| {
            let b = bias_bound(&AggregationWeights(p.clone()), clip);
            (p, b)
        })
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(p, b)| (AggregationWeights(p), b))
        .ok_or(Error::EmptyWinnerSet)
}
