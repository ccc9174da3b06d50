//! Pólya-urn data augmentation of the origin time H and the duration W, and
//! the base-measure updates that follow each sweep.
//!
//! Under a Dirichlet-process prior the full conditional of h_i is a mixture
//! of a fresh draw from the truncated base measure (weight r₀) and point
//! masses at the other subjects' values that fall in the truncation
//! interval and share the group label. The W step has the same structure
//! with every weight multiplied by the outcome likelihood evaluated at the
//! candidate duration.

use std::collections::HashSet;

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{
    jeffreys_normal_update, log_interval_mass, log_sum_exp, open_unit, sample_truncated_normal, GaussLegendre,
    NormalParams,
};
use crate::outcome::{DesignCache, ModelContext, ThetaState};
use crate::types::{BaseMeasureParams, Cohort, LatentState};

/// Normalized urn weights: a fresh-draw weight plus donor weights.
#[derive(Debug, Clone, PartialEq)]
pub struct UrnWeights {
    pub new_draw: f64,
    pub donors: Vec<(usize, f64)>,
    /// Truncation interval (lo, hi] the draw must land in.
    pub bounds: (f64, f64),
}

impl UrnWeights {
    /// Builds normalized weights from log weights.
    fn from_log(subject: usize, log_new: f64, log_donors: Vec<(usize, f64)>, bounds: (f64, f64)) -> Result<Self> {
        let mut all: Vec<f64> = log_donors.iter().map(|&(_, lw)| lw).collect();
        all.push(log_new);
        let total = log_sum_exp(&all);
        if !total.is_finite() {
            return Err(Error::EmptyUrn { subject });
        }
        Ok(Self {
            new_draw: (log_new - total).exp(),
            donors: log_donors.into_iter().map(|(j, lw)| (j, (lw - total).exp())).collect(),
            bounds,
        })
    }

    pub fn total(&self) -> f64 {
        self.new_draw + self.donors.iter().map(|&(_, w)| w).sum::<f64>()
    }

    /// Picks `None` for a fresh draw or `Some(j)` for donor j.
    pub fn choose<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<usize> {
        let u: f64 = rng.random::<f64>() * self.total();
        let mut acc = self.new_draw;
        if u < acc {
            return None;
        }
        for &(j, w) in &self.donors {
            acc += w;
            if u < acc {
                return Some(j);
            }
        }
        // rounding left u past the last bucket
        self.donors.iter().rev().find(|&&(_, w)| w > 0.0).map(|&(j, _)| j)
    }
}

/// Truncation interval (l_h, min(r_h, v_i)] of h_i. The bound at v_i is
/// excluded so that w_i = v_i − h_i stays positive.
pub fn h_bounds(cohort: &Cohort, latent: &LatentState, i: usize) -> (f64, f64) {
    let s = cohort.subject(i);
    (s.l_h, s.r_h.min(latent.v(i)))
}

fn h_in_bounds(cohort: &Cohort, latent: &LatentState, i: usize, h: f64) -> bool {
    let s = cohort.subject(i);
    let v = latent.v(i);
    h > s.l_h && h <= s.r_h && h < v
}

/// Urn weights of the full conditional of h_i.
pub fn h_urn_weights(
    i: usize,
    latent: &LatentState,
    cohort: &Cohort,
    lambda: &BaseMeasureParams,
    alpha_h: f64,
) -> Result<UrnWeights> {
    let s = cohort.subject(i);
    let (lo, hi) = h_bounds(cohort, latent, i);
    if !(lo < hi) {
        return Err(Error::EmptyInterval { subject: i, lo, hi });
    }
    let base = lambda.h[s.group()];
    let log_new = alpha_h.ln() + log_interval_mass(base.mean, base.var, lo, hi);
    let donors = cohort
        .subjects()
        .iter()
        .enumerate()
        .filter(|&(j, sj)| j != i && sj.z == s.z && h_in_bounds(cohort, latent, i, latent.h[j]))
        .map(|(j, _)| (j, 0.0))
        .collect();
    UrnWeights::from_log(i, log_new, donors, (lo, hi))
}

/// Truncated-normal draw that falls back to a uniform (finite interval) or an
/// exponential tail approximation (unbounded interval) when the base measure
/// puts no representable mass on the interval.
fn draw_from_base<R: Rng + ?Sized>(base: NormalParams, lo: f64, hi: f64, rng: &mut R) -> f64 {
    match sample_truncated_normal(base.mean, base.var, lo, hi, rng) {
        Ok(x) => x,
        Err(err) => {
            log::warn!("{err}; using a fallback draw");
            if hi.is_finite() {
                hi - (hi - lo) * rng.random::<f64>()
            } else {
                let rate = ((lo - base.mean) / base.var).max(1.0 / base.sd());
                lo - open_unit(rng).ln() / rate
            }
        }
    }
}

/// Draws a new h_i from its urn and keeps w_i, so v_i moves with h_i.
/// Returns `true` when the held w_i left its own truncation interval.
pub fn sample_h<R: Rng + ?Sized>(
    i: usize,
    latent: &mut LatentState,
    cohort: &Cohort,
    lambda: &BaseMeasureParams,
    weights: &UrnWeights,
    rng: &mut R,
) -> bool {
    let (lo, hi) = weights.bounds;
    let h = match weights.choose(rng) {
        Some(j) => latent.h[j],
        None => {
            let base = lambda.h[cohort.subject(i).group()];
            let x = draw_from_base(base, lo, hi, rng);
            if x < hi || hi < latent.v(i) {
                x
            } else {
                (lo + hi) * 0.5
            }
        }
    };
    latent.h[i] = h;
    let (w_lo, w_hi) = cohort.subject(i).w_bounds(h);
    let w = latent.w[i];
    !(w > w_lo && w <= w_hi)
}

/// Log outcome likelihood as a function of the candidate duration, or `None`
/// when it does not depend on w (nonresponders, marginal model).
pub type WLikelihood<'a> = Option<&'a dyn Fn(f64) -> f64>;

/// Urn weights of the full conditional of w_i given an arbitrary likelihood.
pub fn w_urn_weights_with(
    i: usize,
    latent: &LatentState,
    cohort: &Cohort,
    lambda: &BaseMeasureParams,
    alpha_w: f64,
    loglik: WLikelihood<'_>,
) -> Result<UrnWeights> {
    let s = cohort.subject(i);
    let (lo, hi) = s.w_bounds(latent.h[i]);
    if !(lo < hi) {
        return Err(Error::EmptyInterval { subject: i, lo, hi });
    }
    let base = lambda.w[s.group()];
    let log_mass = match loglik {
        None => log_interval_mass(base.mean, base.var, lo, hi),
        Some(ll) if hi.is_finite() => GaussLegendre::twenty().log_integrate(|w| ll(w) + base.log_density(w), lo, hi)?,
        Some(ll) => {
            let bound = tail_bound(cohort, latent, base, lo);
            let body = GaussLegendre::twenty().log_integrate(|w| ll(w) + base.log_density(w), lo, bound)?;
            // beyond the bound the likelihood is taken at its value on the bound
            let tail = ll(bound) + log_interval_mass(base.mean, base.var, bound, f64::INFINITY);
            log_sum_exp(&[body, tail])
        }
    };
    let log_new = alpha_w.ln() + log_mass;
    let mut donors = Vec::new();
    for (j, sj) in cohort.subjects().iter().enumerate() {
        let wj = latent.w[j];
        if j == i || sj.z != s.z || !(wj > lo && wj <= hi) {
            continue;
        }
        donors.push((j, loglik.map_or(0.0, |ll| ll(wj))));
    }
    UrnWeights::from_log(i, log_new, donors, (lo, hi))
}

/// Upper quadrature bound for unbounded W intervals: the larger of the
/// largest finite imputed w and the base mean + 6 sd, and above `lo`.
pub fn tail_bound(cohort: &Cohort, latent: &LatentState, base: NormalParams, lo: f64) -> f64 {
    let observed = cohort
        .subjects()
        .iter()
        .enumerate()
        .filter(|(_, s)| s.r_v.is_finite())
        .map(|(j, _)| latent.w[j])
        .fold(f64::NEG_INFINITY, f64::max);
    let bound = observed.max(base.mean + 6.0 * base.sd());
    if bound > lo {
        bound
    } else {
        lo + 6.0 * base.sd()
    }
}

/// Urn weights for w_i under the outcome model.
pub fn w_urn_weights(
    i: usize,
    latent: &LatentState,
    ctx: &ModelContext,
    theta: Option<&ThetaState>,
    lambda: &BaseMeasureParams,
    alpha_w: f64,
) -> Result<UrnWeights> {
    match w_likelihood_theta(ctx, i, theta) {
        Some(theta) => {
            let h = latent.h[i];
            let ll = |w: f64| ctx.loglik_subject(i, h, w, theta);
            w_urn_weights_with(i, latent, &ctx.cohort, lambda, alpha_w, Some(&ll))
        }
        None => w_urn_weights_with(i, latent, &ctx.cohort, lambda, alpha_w, None),
    }
}

/// θ when subject i's outcome likelihood depends on w, i.e. in the joint
/// model for responders.
fn w_likelihood_theta<'a>(ctx: &ModelContext, i: usize, theta: Option<&'a ThetaState>) -> Option<&'a ThetaState> {
    theta.filter(|_| ctx.cohort.is_responder(i))
}

/// Outcome of a W draw.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WDraw {
    pub value: f64,
    pub donor: Option<usize>,
    /// Accepted Metropolis proposals (0 for donor or exact draws).
    pub accepted: usize,
}

/// Draws w_i from its urn given an arbitrary likelihood. The fresh-draw
/// branch runs an independence Metropolis chain whose proposal is the
/// truncated base measure, started from the current w_i when it lies in the
/// interval. With no likelihood the proposal is the target and is returned
/// directly.
pub fn sample_w_with<R: Rng + ?Sized>(
    i: usize,
    latent: &mut LatentState,
    cohort: &Cohort,
    lambda: &BaseMeasureParams,
    weights: &UrnWeights,
    loglik: WLikelihood<'_>,
    metropolis_steps: usize,
    rng: &mut R,
) -> WDraw {
    let (lo, hi) = weights.bounds;
    let base = lambda.w[cohort.subject(i).group()];
    let draw = match weights.choose(rng) {
        Some(j) => WDraw {
            value: latent.w[j],
            donor: Some(j),
            accepted: 0,
        },
        None => match loglik {
            None => WDraw {
                value: draw_from_base(base, lo, hi, rng),
                donor: None,
                accepted: 0,
            },
            Some(ll) => {
                let current = latent.w[i];
                let mut state = if current > lo && current <= hi {
                    current
                } else {
                    draw_from_base(base, lo, hi, rng)
                };
                let mut state_ll = ll(state);
                let mut accepted = 0;
                for _ in 0..metropolis_steps {
                    let proposal = draw_from_base(base, lo, hi, rng);
                    let proposal_ll = ll(proposal);
                    if open_unit(rng).ln() < proposal_ll - state_ll {
                        state = proposal;
                        state_ll = proposal_ll;
                        accepted += 1;
                    }
                }
                WDraw {
                    value: state,
                    donor: None,
                    accepted,
                }
            }
        },
    };
    latent.w[i] = draw.value;
    draw
}

/// Draws w_i under the outcome model and refreshes subject i's design rows.
#[allow(clippy::too_many_arguments)]
pub fn sample_w<R: Rng + ?Sized>(
    i: usize,
    latent: &mut LatentState,
    ctx: &ModelContext,
    theta: Option<&ThetaState>,
    cache: Option<&mut DesignCache>,
    lambda: &BaseMeasureParams,
    weights: &UrnWeights,
    metropolis_steps: usize,
    rng: &mut R,
) -> WDraw {
    let draw = match w_likelihood_theta(ctx, i, theta) {
        Some(theta) => {
            let h = latent.h[i];
            let ll = |w: f64| ctx.loglik_subject(i, h, w, theta);
            sample_w_with(
                i,
                latent,
                &ctx.cohort,
                lambda,
                weights,
                Some(&ll),
                metropolis_steps,
                rng,
            )
        }
        None => sample_w_with(i, latent, &ctx.cohort, lambda, weights, None, metropolis_steps, rng),
    };
    if let Some(cache) = cache {
        cache.refresh(ctx, i, latent.v(i));
    }
    draw
}

/// Distinct values (bitwise) of `values` restricted to group `z`.
pub fn distinct_values(cohort: &Cohort, values: &[f64], z: u8) -> Vec<f64> {
    let mut seen = HashSet::new();
    cohort
        .subjects()
        .iter()
        .zip(values)
        .filter(|(s, _)| s.z == z)
        .filter_map(|(_, &x)| seen.insert(x.to_bits()).then_some(x))
        .collect()
}

/// Redraws every base-measure cell (H/W × group) from its closed-form
/// posterior given the distinct imputed values. Cells with fewer than two
/// distinct values keep their previous parameters.
pub fn update_base_measures<R: Rng + ?Sized>(
    latent: &LatentState,
    cohort: &Cohort,
    previous: &BaseMeasureParams,
    rng: &mut R,
) -> BaseMeasureParams {
    let mut next = *previous;
    for z in 0..2u8 {
        for (values, slot, label) in [
            (&latent.h, &mut next.h[usize::from(z)], "H"),
            (&latent.w, &mut next.w[usize::from(z)], "W"),
        ] {
            let distinct = distinct_values(cohort, values, z);
            match jeffreys_normal_update(&distinct, rng) {
                Ok(params) => *slot = params,
                Err(err) => log::debug!("base measure {label}, z = {z} kept: {err}"),
            }
        }
    }
    next
}
