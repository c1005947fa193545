//! Logistic regression pieces the owners and the buyer need.

use super::dataset::Partition;
use crate::error::{Error, Result};
use crate::ldp::{clip_gradient, ClipBound, GradientVector};

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check(w: &[f64], data: &Partition) -> Result<()> {
    if data.is_empty() {
        return Err(Error::EmptyData("partition"));
    }
    if w.len() != data.dim() {
        return Err(Error::DimensionMismatch {
            context: "logistic weights",
            expected: data.dim(),
            actual: w.len(),
        });
    }
    Ok(())
}

/// Mean log-loss.
pub fn logistic_loss(w: &[f64], data: &Partition) -> Result<f64> {
    check(w, data)?;
    let total: f64 = data
        .rows()
        .map(|(x, y)| {
            let z = dot(w, x);
            // log(1 + e^z) - y z, stable for large |z|
            z.max(0.0) + (-z.abs()).exp().ln_1p() - y * z
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Mean log-loss gradient, before clipping.
pub fn raw_logistic_gradient(w: &[f64], data: &Partition) -> Result<GradientVector> {
    check(w, data)?;
    let mut g = vec![0.0; w.len()];
    for (x, y) in data.rows() {
        let r = sigmoid(dot(w, x)) - y;
        for (gi, xi) in g.iter_mut().zip(x) {
            *gi += r * xi;
        }
    }
    let k = data.len() as f64;
    g.iter_mut().for_each(|v| *v /= k);
    GradientVector::new(g)
}

/// What an owner contributes: the mean gradient clipped to L1 norm `L`.
pub fn logistic_gradient(w: &[f64], data: &Partition, clip: ClipBound) -> Result<GradientVector> {
    Ok(clip_gradient(&raw_logistic_gradient(w, data)?, clip))
}

/// Fraction of rows where `sigmoid(w.x) >= 0.5` agrees with the label.
pub fn accuracy(w: &[f64], data: &Partition) -> Result<f64> {
    check(w, data)?;
    let correct = data
        .rows()
        .filter(|(x, y)| {
            let predicted = if dot(w, x) >= 0.0 { 1.0 } else { 0.0 };
            predicted == *y
        })
        .count();
    Ok(correct as f64 / data.len() as f64)
}
