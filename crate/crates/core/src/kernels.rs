//! Sampling and integration primitives consumed by every Gibbs block.
//!
//! Everything here is a pure function of its arguments plus an explicitly
//! passed [`ChainRng`]; no state is shared between chains.

use std::f64::consts::{PI, SQRT_2};
use std::sync::OnceLock;

use libm::{erf, erfc};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Exp, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc_inv;

use crate::error::{Error, Result};

/// Deterministic, seedable stream used by every sampler.
pub type ChainRng = rand_chacha::ChaCha8Rng;

/// Standardized distance into a tail beyond which the rejection sampler
/// replaces inverse-CDF sampling.
const TAIL_SWITCH: f64 = 5.0;
/// Smallest interval mass the truncated-normal sampler accepts.
const MIN_LOG_MASS: f64 = -690.775_527_898_213_7; // ln(1e-300)
const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;

/// Builds the stream `stream` of the generator keyed by `seed`.
///
/// Distinct streams of one seed are statistically independent, which gives
/// each chain (and each block within a chain) its own substream.
pub fn seeded_rng(seed: u64, stream: u64) -> ChainRng {
    let mut rng = ChainRng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Uniform draw on the open interval (0, 1).
pub fn open_unit<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    loop {
        let u: f64 = rng.random();
        if u > 0.0 {
            return u;
        }
    }
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Mean and variance of a normal law. `var` is a variance, never a precision.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormalParams {
    pub mean: f64,
    pub var: f64,
}

impl NormalParams {
    pub fn new(mean: f64, var: f64) -> Self {
        Self { mean, var }
    }

    pub fn sd(&self) -> f64 {
        self.var.sqrt()
    }

    pub fn log_density(&self, x: f64) -> f64 {
        let d = x - self.mean;
        -0.5 * d * d / self.var - 0.5 * self.var.ln() - LN_SQRT_2PI
    }

    pub fn cdf(&self, x: f64) -> f64 {
        normal_cdf(x, self.mean, self.var)
    }
}

/// Standard normal CDF.
pub fn std_normal_cdf(z: f64) -> f64 {
    if z == f64::INFINITY {
        1.0
    } else if z == f64::NEG_INFINITY {
        0.0
    } else {
        0.5 * erfc(-z / SQRT_2)
    }
}

/// CDF of N(mean, var) at `x`.
pub fn normal_cdf(x: f64, mean: f64, var: f64) -> f64 {
    debug_assert!(var > 0.0);
    std_normal_cdf((x - mean) / var.sqrt())
}

/// ln P(Z > z) for a standard normal Z, accurate far into the upper tail.
pub fn log_upper_tail(z: f64) -> f64 {
    if z == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    if z < 30.0 {
        return (0.5 * erfc(z / SQRT_2)).ln();
    }
    // asymptotic expansion of the Mills ratio
    let z2 = z * z;
    let series = 1.0 - 1.0 / z2 + 3.0 / (z2 * z2) - 15.0 / (z2 * z2 * z2) + 105.0 / (z2 * z2 * z2 * z2);
    -0.5 * z2 - z.ln() - LN_SQRT_2PI + series.ln()
}

/// ln(1 - e^x) for x <= 0.
fn ln_one_minus_exp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

fn log_std_interval_mass(a: f64, b: f64) -> f64 {
    if a >= b {
        return f64::NEG_INFINITY;
    }
    if a >= 0.0 {
        let la = log_upper_tail(a);
        let lb = log_upper_tail(b);
        la + ln_one_minus_exp(lb - la)
    } else if b <= 0.0 {
        log_std_interval_mass(-b, -a)
    } else {
        // both halves computed with erf to avoid cancellation near zero
        let upper = if b == f64::INFINITY { 0.5 } else { 0.5 * erf(b / SQRT_2) };
        let lower = if a == f64::NEG_INFINITY {
            0.5
        } else {
            0.5 * erf(-a / SQRT_2)
        };
        (upper + lower).ln()
    }
}

/// ln P(lo < X <= hi) for X ~ N(mean, var). Either bound may be infinite.
pub fn log_interval_mass(mean: f64, var: f64, lo: f64, hi: f64) -> f64 {
    let sd = var.sqrt();
    log_std_interval_mass((lo - mean) / sd, (hi - mean) / sd)
}

/// Quantile of the upper tail: the z with P(Z > z) = q.
fn upper_tail_quantile(q: f64) -> f64 {
    let z = SQRT_2 * erfc_inv(2.0 * q);
    if !z.is_finite() {
        return z;
    }
    // one Newton step against the accurate erfc
    let density = (-0.5 * z * z - LN_SQRT_2PI).exp();
    if density > 0.0 {
        z + (0.5 * erfc(z / SQRT_2) - q) / density
    } else {
        z
    }
}

/// One-sided tail sampler on (a, b] with a >= TAIL_SWITCH.
fn sample_std_upper_tail<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if (b - a) * a < 1.0 {
        // narrow interval: uniform proposal, acceptance at least exp(-1.5)
        loop {
            let x = a + (b - a) * open_unit(rng);
            if open_unit(rng).ln() <= 0.5 * (a * a - x * x) {
                return x;
            }
        }
    }
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    let exp = Exp::new(rate).expect("positive rate");
    loop {
        let x = a + exp.sample(rng);
        if x > b {
            continue;
        }
        let d = x - rate;
        if open_unit(rng).ln() <= -0.5 * d * d {
            return x;
        }
    }
}

fn sample_std_truncated<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    if a >= TAIL_SWITCH {
        sample_std_upper_tail(a, b, rng)
    } else if b <= -TAIL_SWITCH {
        -sample_std_upper_tail(-b, -a, rng)
    } else if a >= 0.0 {
        let qa = 0.5 * erfc(a / SQRT_2);
        let qb = if b == f64::INFINITY {
            0.0
        } else {
            0.5 * erfc(b / SQRT_2)
        };
        upper_tail_quantile(qb + (qa - qb) * open_unit(rng))
    } else if b <= 0.0 {
        -sample_std_truncated(-b, -a, rng)
    } else {
        let pa = std_normal_cdf(a);
        let pb = std_normal_cdf(b);
        -upper_tail_quantile(pa + (pb - pa) * open_unit(rng))
    }
}

/// Draws from N(mean, var) truncated to (lo, hi]; `hi` may be +inf and `lo` -inf.
///
/// Inverse-CDF sampling in the body of the law, exponential-tilting rejection
/// when the interval sits five or more standard deviations into a tail.
pub fn sample_truncated_normal<R: Rng + ?Sized>(mean: f64, var: f64, lo: f64, hi: f64, rng: &mut R) -> Result<f64> {
    debug_assert!(var > 0.0 && lo < hi);
    if !(lo < hi) || log_interval_mass(mean, var, lo, hi) < MIN_LOG_MASS {
        return Err(Error::DegenerateTruncation { mean, var, lo, hi });
    }
    let sd = var.sqrt();
    let (a, b) = ((lo - mean) / sd, (hi - mean) / sd);
    for _ in 0..64 {
        let x = mean + sd * sample_std_truncated(a, b, rng);
        if x > lo && x <= hi {
            return Ok(x);
        }
    }
    // rounding kept pushing the draw onto a bound; the interval is a few ulps wide
    Ok(hi.min(next_up(lo)))
}

fn next_up(x: f64) -> f64 {
    if x.is_nan() || x == f64::INFINITY {
        return x;
    }
    if x == 0.0 {
        return f64::from_bits(1);
    }
    let bits = x.to_bits();
    f64::from_bits(if x > 0.0 { bits + 1 } else { bits - 1 })
}

/// Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    nodes: Vec<f64>,
    weights: Vec<f64>,
}

impl GaussLegendre {
    /// Computes the `n`-node rule by Newton iteration on P_n.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "at least one node");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        let nf = n as f64;
        for i in 0..n.div_ceil(2) {
            let mut z = (PI * (i as f64 + 0.75) / (nf + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, z);
                dp = d;
                let step = p / d;
                z -= step;
                if step.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, z);
            if d.is_finite() {
                dp = d;
            }
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// Cached 20-node rule.
    pub fn twenty() -> &'static GaussLegendre {
        static RULE: OnceLock<GaussLegendre> = OnceLock::new();
        RULE.get_or_init(|| GaussLegendre::new(20))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn nodes(&self) -> &[f64] {
        &self.nodes
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Nodes and weights mapped affinely onto [lo, hi].
    pub fn mapped(&self, lo: f64, hi: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (hi - lo);
        let mid = 0.5 * (hi + lo);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, w * half))
    }

    /// ∫_lo^hi f.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, mut f: F, lo: f64, hi: f64) -> Result<f64> {
        check_bounds(lo, hi)?;
        let mut total = 0.0;
        for (x, w) in self.mapped(lo, hi) {
            let value = f(x);
            if !value.is_finite() {
                return Err(Error::NonFiniteIntegrand { node: x, value });
            }
            total += w * value;
        }
        Ok(total)
    }

    /// ln ∫_lo^hi exp(log_f), evaluated with log-sum-exp. `log_f` may return -inf.
    pub fn log_integrate<F: FnMut(f64) -> f64>(&self, mut log_f: F, lo: f64, hi: f64) -> Result<f64> {
        check_bounds(lo, hi)?;
        let mut terms = Vec::with_capacity(self.len());
        for (x, w) in self.mapped(lo, hi) {
            let value = log_f(x);
            if value.is_nan() || value == f64::INFINITY {
                return Err(Error::NonFiniteIntegrand { node: x, value });
            }
            terms.push(w.ln() + value);
        }
        Ok(log_sum_exp(&terms))
    }
}

fn check_bounds(lo: f64, hi: f64) -> Result<()> {
    if lo.is_finite() && hi.is_finite() && lo < hi {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "quadrature bounds must be finite with lo < hi, got ({lo}, {hi})"
        )))
    }
}

/// P_n(x) and P_n'(x) by the three-term recurrence.
fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let nf = n as f64;
    (p1, nf * (x * p1 - p0) / (x * x - 1.0))
}

/// Numerically stable ln Σ exp(x_k). Returns -inf for an empty slice.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Gamma(shape, rate) draw.
pub fn sample_gamma<R: Rng + ?Sized>(shape: f64, rate: f64, rng: &mut R) -> f64 {
    assert!(shape > 0.0 && rate > 0.0, "gamma requires shape > 0 and rate > 0");
    Gamma::new(shape, 1.0 / rate)
        .expect("valid gamma parameters")
        .sample(rng)
}

/// Inverse-gamma(shape, scale) draw, i.e. 1 / Gamma(shape, rate = scale).
///
/// Tiny shapes can underflow the gamma draw to zero; the precision is then
/// floored at `f64::MIN_POSITIVE` so the returned variance stays finite.
pub fn sample_inverse_gamma<R: Rng + ?Sized>(shape: f64, scale: f64, rng: &mut R) -> f64 {
    let precision = sample_gamma(shape, scale, rng).max(f64::MIN_POSITIVE);
    (1.0 / precision).min(f64::MAX)
}

/// Closed-form posterior of a normal (mean, variance) pair under the prior
/// p(mean, var) ∝ 1 / var.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JeffreysPosterior {
    pub n: usize,
    pub sample_mean: f64,
    pub sum_squares: f64,
}

impl JeffreysPosterior {
    pub fn from_values(values: &[f64]) -> Result<Self> {
        let n = values.len();
        if n < 2 {
            return Err(Error::InsufficientDistinctValues { found: n });
        }
        let sample_mean = values.iter().sum::<f64>() / n as f64;
        let sum_squares: f64 = values.iter().map(|x| (x - sample_mean).powi(2)).sum();
        if !(sum_squares > 0.0) || !sum_squares.is_finite() {
            return Err(Error::InsufficientDistinctValues { found: 1 });
        }
        Ok(Self {
            n,
            sample_mean,
            sum_squares,
        })
    }

    /// Shape of the inverse-gamma marginal of the variance.
    pub fn var_shape(&self) -> f64 {
        0.5 * (self.n as f64 - 1.0)
    }

    /// Scale of the inverse-gamma marginal of the variance.
    pub fn var_scale(&self) -> f64 {
        0.5 * self.sum_squares
    }

    /// var ~ IG((n-1)/2, S/2), then mean | var ~ N(x̄, var / n).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> NormalParams {
        let var = sample_inverse_gamma(self.var_shape(), self.var_scale(), rng);
        let mean = self.sample_mean + (var / self.n as f64).sqrt() * standard_normal(rng);
        NormalParams { mean, var }
    }

    /// Marginal posterior density of the variance (inverse gamma).
    pub fn var_density(&self, var: f64) -> f64 {
        if var <= 0.0 {
            return 0.0;
        }
        let a = self.var_shape();
        let b = self.var_scale();
        (a * b.ln() - statrs::function::gamma::ln_gamma(a) - (a + 1.0) * var.ln() - b / var).exp()
    }

    /// Marginal posterior density of the mean: Student-t with n - 1 degrees of
    /// freedom, location x̄ and squared scale S / (n (n - 1)).
    pub fn mean_density(&self, mean: f64) -> f64 {
        let nu = self.n as f64 - 1.0;
        let scale = (self.sum_squares / (self.n as f64 * nu)).sqrt();
        let t = (mean - self.sample_mean) / scale;
        let ln_norm = statrs::function::gamma::ln_gamma(0.5 * (nu + 1.0))
            - statrs::function::gamma::ln_gamma(0.5 * nu)
            - 0.5 * (nu * PI).ln()
            - scale.ln();
        (ln_norm - 0.5 * (nu + 1.0) * (t * t / nu).ln_1p()).exp()
    }
}

/// One posterior draw of a normal base measure from its distinct values.
pub fn jeffreys_normal_update<R: Rng + ?Sized>(values: &[f64], rng: &mut R) -> Result<NormalParams> {
    Ok(JeffreysPosterior::from_values(values)?.sample(rng))
}
