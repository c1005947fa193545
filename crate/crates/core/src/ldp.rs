//! Gradient clipping and the Laplace mechanism for epsilon-LDP gradients.

use std::ops::{Deref, Index};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ensure_positive, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientVector(Vec<f64>);

impl GradientVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyData("gradient"));
        }
        if let Some(&v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Domain {
                what: "gradient entry",
                constraint: "finite",
                value: v,
            });
        }
        Ok(Self(values))
    }

    pub fn zeros(dim: usize) -> Self {
        Self(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn l1_norm(&self) -> f64 {
        self.0.iter().map(|v| v.abs()).sum()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub(crate) fn from_vec_unchecked(values: Vec<f64>) -> Self {
        Self(values)
    }
}

impl Deref for GradientVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl Index<usize> for GradientVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

/// L1-norm cap applied before perturbation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClipBound(f64);

impl ClipBound {
    pub fn new(l: f64) -> Result<Self> {
        ensure_positive("clip bound", l)?;
        Ok(Self(l))
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for ClipBound {
    fn default() -> Self {
        Self(1.0)
    }
}

/// `g * min(1, L / |g|_1)`.
pub fn clip_gradient(g: &GradientVector, clip: ClipBound) -> GradientVector {
    let norm = g.l1_norm();
    if norm <= clip.0 {
        return g.clone();
    }
    let s = clip.0 / norm;
    GradientVector(g.iter().map(|v| v * s).collect())
}

/// One draw from Laplace(0, scale) by inverting the CDF.
pub fn sample_laplace<R: Rng + ?Sized>(rng: &mut R, scale: f64) -> f64 {
    loop {
        let u = rng.random::<f64>() - 0.5;
        let tail = 1.0 - 2.0 * u.abs();
        if tail > 0.0 {
            return -scale * u.signum() * tail.ln();
        }
    }
}

/// Laplace scale `2L / eps` for an L1-clipped gradient.
pub fn laplace_scale(eps: f64, clip: ClipBound) -> Result<f64> {
    ensure_positive("privacy parameter", eps)?;
    Ok(2.0 * clip.0 / eps)
}

/// Adds independent Laplace(2L/eps) noise to every coordinate. The caller
/// clips first; owners with `eps = 0` must never reach this function.
pub fn laplace_perturb<R: Rng + ?Sized>(
    g: &GradientVector,
    eps: f64,
    clip: ClipBound,
    rng: &mut R,
) -> Result<GradientVector> {
    let scale = laplace_scale(eps, clip)?;
    Ok(GradientVector(
        g.iter().map(|v| v + sample_laplace(rng, scale)).collect(),
    ))
}

/// Noise variance per coordinate, `2 (2L/eps)^2`.
pub fn per_coordinate_variance(eps: f64, clip: ClipBound) -> Result<f64> {
    let b = laplace_scale(eps, clip)?;
    Ok(2.0 * b * b)
}
