//! Truncated-polynomial spline bases and knot placement.
//!
//! A basis of degree `p` with knots κ_1 < … < κ_K evaluates to
//! `(1, u, …, u^p, (u - κ_1)_+^p, …, (u - κ_K)_+^p)` where `u = t / scale`
//! and knots are rescaled the same way. With `scale = 1` the basis is
//! evaluated directly on the input time unit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BasisSpec {
    degree: usize,
    knots: Vec<f64>,
    scale: f64,
}

impl BasisSpec {
    pub fn new(degree: usize, knots: Vec<f64>) -> Result<Self> {
        Self::with_scale(degree, knots, 1.0)
    }

    /// Basis evaluated on `t / scale`; knots stay in the unscaled unit.
    pub fn with_scale(degree: usize, knots: Vec<f64>, scale: f64) -> Result<Self> {
        if degree < 1 {
            return Err(Error::InvalidConfig("spline degree must be >= 1".into()));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "basis scale must be positive, got {scale}"
            )));
        }
        if knots.iter().any(|k| !k.is_finite()) || knots.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidConfig(
                "knots must be finite and strictly increasing".into(),
            ));
        }
        Ok(Self { degree, knots, scale })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    /// 1 + p + K.
    pub fn dimension(&self) -> usize {
        1 + self.degree + self.knots.len()
    }

    /// Writes the basis row at `t` into `out` (length [`Self::dimension`]).
    pub fn eval_into(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dimension());
        let p = self.degree;
        let u = t / self.scale;
        let mut power = 1.0;
        for slot in out.iter_mut().take(p + 1) {
            *slot = power;
            power *= u;
        }
        for (slot, &knot) in out[p + 1..].iter_mut().zip(&self.knots) {
            let d = (t - knot) / self.scale;
            *slot = if d > 0.0 { d.powi(p as i32) } else { 0.0 };
        }
    }

    /// Writes d/dt of the basis row at `t` into `out`.
    pub fn derivative_into(&self, t: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.dimension());
        let p = self.degree;
        let u = t / self.scale;
        out[0] = 0.0;
        let mut power = 1.0; // u^(s-1)
        for (s, slot) in out.iter_mut().enumerate().take(p + 1).skip(1) {
            *slot = s as f64 * power / self.scale;
            power *= u;
        }
        for (slot, &knot) in out[p + 1..].iter_mut().zip(&self.knots) {
            let d = (t - knot) / self.scale;
            *slot = if d > 0.0 {
                p as f64 * d.powi(p as i32 - 1) / self.scale
            } else {
                0.0
            };
        }
    }
}

/// Basis row at `t`.
pub fn eval_basis(spec: &BasisSpec, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; spec.dimension()];
    spec.eval_into(t, &mut out);
    out
}

/// Derivative of the basis row with respect to `t`.
pub fn eval_derivative(spec: &BasisSpec, t: f64) -> Vec<f64> {
    let mut out = vec![0.0; spec.dimension()];
    spec.derivative_into(t, &mut out);
    out
}

/// Type-1 sample quantile: the order statistic at position ⌈q·n⌉ (1-based).
pub fn quantile_type1(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let n = sorted.len();
    let pos = (q * n as f64).ceil() as usize;
    sorted[pos.clamp(1, n) - 1]
}

/// Knots at the `n_knots` equally spaced type-1 quantiles k / (n_knots + 1),
/// plus a knot at zero when `include_zero`. Duplicates are collapsed.
pub fn place_knots(times: &[f64], n_knots: usize, include_zero: bool) -> Result<Vec<f64>> {
    if times.is_empty() {
        return Err(Error::InvalidConfig("knot placement needs at least one time".into()));
    }
    if n_knots == 0 {
        return Err(Error::InvalidConfig("knot count must be >= 1".into()));
    }
    let mut sorted: Vec<f64> = times.to_vec();
    if sorted.iter().any(|t| !t.is_finite()) {
        return Err(Error::InvalidConfig("knot placement times must be finite".into()));
    }
    sorted.sort_by(f64::total_cmp);
    // integer positions ⌈k·n/(K+1)⌉; the float level k/(K+1) can round across an order statistic
    let n = sorted.len();
    let mut knots: Vec<f64> = (1..=n_knots)
        .map(|k| sorted[(k * n).div_ceil(n_knots + 1).max(1) - 1])
        .collect();
    if include_zero {
        knots.push(0.0);
    }
    knots.sort_by(f64::total_cmp);
    knots.dedup();
    let requested = n_knots + usize::from(include_zero);
    if knots.len() < requested {
        log::warn!(
            "knot placement collapsed {requested} requested knots to {} distinct values",
            knots.len()
        );
    }
    Ok(knots)
}
