//! Penalized-spline mixed model for the longitudinal outcome and its Gibbs
//! updates.
//!
//! Responders (bounded V interval) are modelled on the realigned clock
//! `t - v`:
//!
//! ```text
//! y_ij = B(t_ij - v_i)'β_z + φ(t_ij - v_i)'b_i + x*_i'β* + e_ij
//! ```
//!
//! and nonresponders on calendar time with bases A and ψ. Index `z` of every
//! per-group array is the group label, so `beta[1]` is β₁ and `beta[0]` is β₂.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{sample_inverse_gamma, standard_normal};
use crate::spline::{place_knots, BasisSpec};
use crate::types::{Cohort, Hyperparams, LatentState};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// The four truncated-polynomial bases plus the data ranges their knots
/// were placed on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBases {
    /// B: responder population curves on the realigned clock.
    pub responder_population: BasisSpec,
    /// A: nonresponder population curves on calendar time.
    pub nonresponder_population: BasisSpec,
    /// φ: responder individual deviations, one knot at suppression.
    pub responder_individual: BasisSpec,
    /// ψ: nonresponder individual deviations, one knot mid-span.
    pub nonresponder_individual: BasisSpec,
    pub responder_time_range: (f64, f64),
    pub nonresponder_time_range: (f64, f64),
}

impl ModelBases {
    /// Places knots from the data: responder knots at zero plus quantiles of
    /// times realigned by the V-interval midpoints, nonresponder knots at
    /// quantiles of calendar times. Knots are frozen afterwards.
    pub fn from_cohort(cohort: &Cohort, hp: &Hyperparams) -> Result<Self> {
        let p = hp.degree;
        let scale = hp.time_scale;
        let mut realigned = Vec::new();
        let mut calendar = Vec::new();
        for (i, s) in cohort.subjects().iter().enumerate() {
            if cohort.is_responder(i) {
                let mid = 0.5 * (s.l_v + s.r_v);
                realigned.extend(s.obs.iter().map(|o| o.t - mid));
            } else {
                calendar.extend(s.obs.iter().map(|o| o.t));
            }
        }
        let range = |v: &[f64], fallback: (f64, f64)| {
            if v.is_empty() {
                fallback
            } else {
                let lo = v.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (lo, hi)
            }
        };
        let responder_knots = if realigned.is_empty() {
            vec![0.0]
        } else {
            place_knots(&realigned, hp.responder_quantile_knots, true)?
        };
        let nonresponder_range = range(&calendar, (0.0, hp.max_followup));
        let nonresponder_knots = if calendar.is_empty() {
            vec![0.5 * hp.max_followup]
        } else {
            place_knots(&calendar, hp.nonresponder_quantile_knots, false)?
        };
        let mid_span = 0.5 * (nonresponder_range.0 + nonresponder_range.1);
        Ok(Self {
            responder_population: BasisSpec::with_scale(p, responder_knots, scale)?,
            nonresponder_population: BasisSpec::with_scale(p, nonresponder_knots, scale)?,
            responder_individual: BasisSpec::with_scale(p, vec![0.0], scale)?,
            nonresponder_individual: BasisSpec::with_scale(p, vec![mid_span], scale)?,
            responder_time_range: range(&realigned, (-hp.max_followup, hp.max_followup)),
            nonresponder_time_range: nonresponder_range,
        })
    }
}

/// Everything a sampler needs that stays fixed for a whole run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelContext {
    pub cohort: Cohort,
    pub hyper: Hyperparams,
    pub bases: ModelBases,
}

impl ModelContext {
    pub fn new(cohort: Cohort, hyper: Hyperparams) -> Result<Self> {
        hyper.validate()?;
        let bases = ModelBases::from_cohort(&cohort, &hyper)?;
        Ok(Self { cohort, hyper, bases })
    }

    pub fn with_bases(cohort: Cohort, hyper: Hyperparams, bases: ModelBases) -> Result<Self> {
        hyper.validate()?;
        Ok(Self { cohort, hyper, bases })
    }

    pub fn population_basis(&self, i: usize) -> &BasisSpec {
        if self.cohort.is_responder(i) {
            &self.bases.responder_population
        } else {
            &self.bases.nonresponder_population
        }
    }

    pub fn individual_basis(&self, i: usize) -> &BasisSpec {
        if self.cohort.is_responder(i) {
            &self.bases.responder_individual
        } else {
            &self.bases.nonresponder_individual
        }
    }

    /// Time argument of the bases: realigned for responders, calendar otherwise.
    pub fn basis_time(&self, i: usize, t: f64, v: f64) -> f64 {
        if self.cohort.is_responder(i) {
            t - v
        } else {
            t
        }
    }

    /// Whether the (responder, group) cell has at least one subject.
    pub fn cell_active(&self, responder: bool, z: usize) -> bool {
        self.cohort
            .subjects()
            .iter()
            .enumerate()
            .any(|(i, s)| self.cohort.is_responder(i) == responder && s.group() == z)
    }

    /// Number of distinct calendar observation times in a cell.
    pub fn cell_distinct_times(&self, responder: bool, z: usize) -> usize {
        let mut times: Vec<f64> = self
            .cohort
            .subjects()
            .iter()
            .enumerate()
            .filter(|&(i, s)| self.cohort.is_responder(i) == responder && s.group() == z)
            .flat_map(|(_, s)| s.obs.iter().map(|o| o.t))
            .collect();
        times.sort_by(f64::total_cmp);
        times.dedup();
        times.len()
    }

    /// Active cells whose flat polynomial terms absorb every distinct time,
    /// leaving no data on the knot terms. Their smoothing variance then
    /// follows its vague prior, which reaches magnitudes the fixed-effect
    /// solve cannot represent.
    pub fn sparse_cells(&self) -> Vec<(bool, usize, usize)> {
        [true, false]
            .into_iter()
            .flat_map(|r| [0, 1].map(|z| (r, z)))
            .filter(|&(r, z)| self.cell_active(r, z))
            .map(|(r, z)| (r, z, self.cell_distinct_times(r, z)))
            .filter(|&(_, _, n)| n <= self.hyper.degree + 1)
            .collect()
    }

    pub fn layout(&self) -> ThetaLayout {
        ThetaLayout {
            n_covariates: self.cohort.n_covariates(),
            degree: self.hyper.degree,
            population_responder_dim: self.bases.responder_population.dimension(),
            population_nonresponder_dim: self.bases.nonresponder_population.dimension(),
            individual_responder_dim: self.bases.responder_individual.dimension(),
            individual_nonresponder_dim: self.bases.nonresponder_individual.dimension(),
            responder: self.cohort.responder_flags().to_vec(),
        }
    }

    /// Mean outcome of subject `i` at time `t` when its suppression time is `v`.
    pub fn subject_mean(&self, i: usize, t: f64, v: f64, theta: &ThetaState) -> f64 {
        let s = self.cohort.subject(i);
        let x = self.basis_time(i, t, v);
        let (population, individual) = theta.subject_coefficients(i, s.group(), self.cohort.is_responder(i));
        dot_basis(self.population_basis(i), x, population)
            + dot_basis(self.individual_basis(i), x, individual)
            + dot(&s.x_star, &theta.beta_star)
    }

    /// log p(y_i | v = h + w, θ), conditioning on the current random coefficients.
    pub fn loglik_subject(&self, i: usize, h: f64, w: f64, theta: &ThetaState) -> f64 {
        let v = h + w;
        let s = self.cohort.subject(i);
        let mut ss = 0.0;
        for o in &s.obs {
            let r = o.y - self.subject_mean(i, o.t, v, theta);
            ss += r * r;
        }
        -0.5 * s.obs.len() as f64 * (LN_2PI + theta.sigma2.ln()) - 0.5 * ss / theta.sigma2
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Σ_k basis_k(t) · coef_k without materializing the row.
fn dot_basis(spec: &BasisSpec, t: f64, coef: &[f64]) -> f64 {
    let p = spec.degree();
    let u = t / spec.scale();
    let mut total = 0.0;
    let mut power = 1.0;
    for c in &coef[..=p] {
        total += c * power;
        power *= u;
    }
    for (c, &knot) in coef[p + 1..].iter().zip(spec.knots()) {
        let d = (t - knot) / spec.scale();
        if d > 0.0 {
            total += c * d.powi(p as i32);
        }
    }
    total
}

/// All outcome-model parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaState {
    pub beta_star: Vec<f64>,
    /// Responder population coefficients by group (β₂ at 0, β₁ at 1).
    pub beta: [Vec<f64>; 2],
    /// Nonresponder population coefficients by group (α₂ at 0, α₁ at 1).
    pub alpha: [Vec<f64>; 2],
    /// Responder random coefficients b_i; empty for nonresponders.
    pub b: Vec<Vec<f64>>,
    /// Nonresponder random coefficients a_i; empty for responders.
    pub a: Vec<Vec<f64>>,
    pub sigma2: f64,
    /// Smoothing variances of the responder population splines by group.
    pub smooth_beta: [f64; 2],
    /// Smoothing variances of the nonresponder population splines by group.
    pub smooth_alpha: [f64; 2],
    pub sigma2_b: f64,
    pub sigma2_a: f64,
    /// Variances of the polynomial random coefficients b_{i,s}, s = 0..p.
    pub sigma2_b_poly: Vec<f64>,
    /// Variances of the polynomial random coefficients a_{i,s}, s = 0..p.
    pub sigma2_a_poly: Vec<f64>,
}

impl ThetaState {
    /// Zero coefficients, unit variances and σ² at the pooled outcome variance.
    pub fn initial(ctx: &ModelContext) -> Self {
        let layout = ctx.layout();
        let ys: Vec<f64> = ctx
            .cohort
            .subjects()
            .iter()
            .flat_map(|s| s.obs.iter().map(|o| o.y))
            .collect();
        let n = ys.len() as f64;
        let mean = ys.iter().sum::<f64>() / n;
        let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / n.max(2.0);
        let p = layout.degree;
        Self {
            beta_star: vec![0.0; layout.n_covariates],
            beta: [
                vec![0.0; layout.population_responder_dim],
                vec![0.0; layout.population_responder_dim],
            ],
            alpha: [
                vec![0.0; layout.population_nonresponder_dim],
                vec![0.0; layout.population_nonresponder_dim],
            ],
            b: layout
                .responder
                .iter()
                .map(|&r| {
                    if r {
                        vec![0.0; layout.individual_responder_dim]
                    } else {
                        vec![]
                    }
                })
                .collect(),
            a: layout
                .responder
                .iter()
                .map(|&r| {
                    if r {
                        vec![]
                    } else {
                        vec![0.0; layout.individual_nonresponder_dim]
                    }
                })
                .collect(),
            sigma2: if var > 0.0 { var } else { 1.0 },
            smooth_beta: [1.0; 2],
            smooth_alpha: [1.0; 2],
            sigma2_b: 1.0,
            sigma2_a: 1.0,
            sigma2_b_poly: vec![1.0; p + 1],
            sigma2_a_poly: vec![1.0; p + 1],
        }
    }

    /// (population coefficients, individual coefficients) governing subject `i`.
    pub fn subject_coefficients(&self, i: usize, z: usize, responder: bool) -> (&[f64], &[f64]) {
        if responder {
            (&self.beta[z], &self.b[i])
        } else {
            (&self.alpha[z], &self.a[i])
        }
    }

    pub fn variances(&self) -> impl Iterator<Item = f64> + '_ {
        [
            self.sigma2,
            self.smooth_beta[0],
            self.smooth_beta[1],
            self.smooth_alpha[0],
            self.smooth_alpha[1],
            self.sigma2_b,
            self.sigma2_a,
        ]
        .into_iter()
        .chain(self.sigma2_b_poly.iter().copied())
        .chain(self.sigma2_a_poly.iter().copied())
    }
}

/// Flattening order and names of [`ThetaState`] for storage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThetaLayout {
    pub n_covariates: usize,
    pub degree: usize,
    pub population_responder_dim: usize,
    pub population_nonresponder_dim: usize,
    pub individual_responder_dim: usize,
    pub individual_nonresponder_dim: usize,
    pub responder: Vec<bool>,
}

impl ThetaLayout {
    pub fn names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.len());
        let idx = |prefix: &str, n: usize, names: &mut Vec<String>| {
            names.extend((0..n).map(|k| format!("{prefix}[{k}]")));
        };
        idx("beta_star", self.n_covariates, &mut names);
        idx("beta1", self.population_responder_dim, &mut names);
        idx("beta2", self.population_responder_dim, &mut names);
        idx("alpha1", self.population_nonresponder_dim, &mut names);
        idx("alpha2", self.population_nonresponder_dim, &mut names);
        names.extend(
            [
                "sigma2",
                "sigma2_beta1",
                "sigma2_beta2",
                "sigma2_alpha1",
                "sigma2_alpha2",
                "sigma2_b",
                "sigma2_a",
            ]
            .map(String::from),
        );
        idx("sigma2_b_s", self.degree + 1, &mut names);
        idx("sigma2_a_s", self.degree + 1, &mut names);
        for (i, &r) in self.responder.iter().enumerate() {
            if r {
                idx(&format!("b[{i}]"), self.individual_responder_dim, &mut names);
            } else {
                idx(&format!("a[{i}]"), self.individual_nonresponder_dim, &mut names);
            }
        }
        names
    }

    pub fn len(&self) -> usize {
        let n_resp = self.responder.iter().filter(|&&r| r).count();
        let n_non = self.responder.len() - n_resp;
        self.n_covariates
            + 2 * self.population_responder_dim
            + 2 * self.population_nonresponder_dim
            + 7
            + 2 * (self.degree + 1)
            + n_resp * self.individual_responder_dim
            + n_non * self.individual_nonresponder_dim
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn flatten(&self, theta: &ThetaState) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        out.extend_from_slice(&theta.beta_star);
        out.extend_from_slice(&theta.beta[1]);
        out.extend_from_slice(&theta.beta[0]);
        out.extend_from_slice(&theta.alpha[1]);
        out.extend_from_slice(&theta.alpha[0]);
        out.extend_from_slice(&[
            theta.sigma2,
            theta.smooth_beta[1],
            theta.smooth_beta[0],
            theta.smooth_alpha[1],
            theta.smooth_alpha[0],
            theta.sigma2_b,
            theta.sigma2_a,
        ]);
        out.extend_from_slice(&theta.sigma2_b_poly);
        out.extend_from_slice(&theta.sigma2_a_poly);
        for (i, &r) in self.responder.iter().enumerate() {
            out.extend_from_slice(if r { &theta.b[i] } else { &theta.a[i] });
        }
        out
    }

    pub fn unflatten(&self, flat: &[f64]) -> ThetaState {
        let mut pos = 0;
        let mut take = |n: usize| {
            let slice = flat[pos..pos + n].to_vec();
            pos += n;
            slice
        };
        let beta_star = take(self.n_covariates);
        let beta1 = take(self.population_responder_dim);
        let beta2 = take(self.population_responder_dim);
        let alpha1 = take(self.population_nonresponder_dim);
        let alpha2 = take(self.population_nonresponder_dim);
        let v = take(7);
        let sigma2_b_poly = take(self.degree + 1);
        let sigma2_a_poly = take(self.degree + 1);
        let mut b = Vec::with_capacity(self.responder.len());
        let mut a = Vec::with_capacity(self.responder.len());
        for &r in &self.responder {
            if r {
                b.push(take(self.individual_responder_dim));
                a.push(Vec::new());
            } else {
                b.push(Vec::new());
                a.push(take(self.individual_nonresponder_dim));
            }
        }
        ThetaState {
            beta_star,
            beta: [beta2, beta1],
            alpha: [alpha2, alpha1],
            b,
            a,
            sigma2: v[0],
            smooth_beta: [v[2], v[1]],
            smooth_alpha: [v[4], v[3]],
            sigma2_b: v[5],
            sigma2_a: v[6],
            sigma2_b_poly,
            sigma2_a_poly,
        }
    }
}

/// Basis rows of one subject at the suppression time they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct SubjectRows {
    /// n_i × dim(B or A), row-major.
    pub population: Vec<f64>,
    /// n_i × dim(φ or ψ), row-major.
    pub individual: Vec<f64>,
    /// Suppression time used for realignment; `None` for nonresponders.
    pub v: Option<f64>,
}

/// Cached design rows. Responder rows follow the current v_i; nonresponder
/// rows never change.
#[derive(Debug, Clone, PartialEq)]
pub struct DesignCache {
    rows: Vec<SubjectRows>,
}

impl DesignCache {
    pub fn build(ctx: &ModelContext, latent: &LatentState) -> Self {
        let rows = (0..ctx.cohort.len())
            .map(|i| subject_rows(ctx, i, latent.v(i)))
            .collect();
        Self { rows }
    }

    pub fn rows(&self, i: usize) -> &SubjectRows {
        &self.rows[i]
    }

    /// Rebuilds subject `i` when its suppression time moved.
    pub fn refresh(&mut self, ctx: &ModelContext, i: usize, v: f64) {
        if ctx.cohort.is_responder(i) && self.rows[i].v.map(f64::to_bits) != Some(v.to_bits()) {
            self.rows[i] = subject_rows(ctx, i, v);
        }
    }

    pub fn sync(&mut self, ctx: &ModelContext, latent: &LatentState) {
        for i in 0..ctx.cohort.len() {
            self.refresh(ctx, i, latent.v(i));
        }
    }
}

fn subject_rows(ctx: &ModelContext, i: usize, v: f64) -> SubjectRows {
    let s = ctx.cohort.subject(i);
    let pop = ctx.population_basis(i);
    let ind = ctx.individual_basis(i);
    let (dp, di) = (pop.dimension(), ind.dimension());
    let mut population = vec![0.0; s.obs.len() * dp];
    let mut individual = vec![0.0; s.obs.len() * di];
    for (j, o) in s.obs.iter().enumerate() {
        let x = ctx.basis_time(i, o.t, v);
        pop.eval_into(x, &mut population[j * dp..(j + 1) * dp]);
        ind.eval_into(x, &mut individual[j * di..(j + 1) * di]);
    }
    SubjectRows {
        population,
        individual,
        v: ctx.cohort.is_responder(i).then_some(v),
    }
}

/// Residuals y_ij − mean_ij of subject `i` from cached rows.
fn subject_residuals(ctx: &ModelContext, cache: &DesignCache, theta: &ThetaState, i: usize) -> Vec<f64> {
    let s = ctx.cohort.subject(i);
    let rows = cache.rows(i);
    let (pop, ind) = theta.subject_coefficients(i, s.group(), ctx.cohort.is_responder(i));
    let xb = dot(&s.x_star, &theta.beta_star);
    s.obs
        .iter()
        .enumerate()
        .map(|(j, o)| {
            let fixed = dot(&rows.population[j * pop.len()..(j + 1) * pop.len()], pop);
            let random = dot(&rows.individual[j * ind.len()..(j + 1) * ind.len()], ind);
            o.y - fixed - random - xb
        })
        .collect()
}

/// Σ (y − mean)² over the whole cohort.
pub fn residual_sum_of_squares(ctx: &ModelContext, cache: &DesignCache, theta: &ThetaState) -> f64 {
    (0..ctx.cohort.len())
        .map(|i| {
            subject_residuals(ctx, cache, theta, i)
                .iter()
                .map(|r| r * r)
                .sum::<f64>()
        })
        .sum()
}

/// A Gaussian full conditional in information form: precision Q and
/// linear term `q`, so the mean is Q⁻¹q.
#[derive(Debug, Clone)]
pub struct GaussianConditional {
    pub precision: DMatrix<f64>,
    pub linear: DVector<f64>,
}

impl GaussianConditional {
    pub fn mean(&self) -> Option<DVector<f64>> {
        self.precision.clone().cholesky().map(|c| c.solve(&self.linear))
    }

    pub fn covariance(&self) -> Option<DMatrix<f64>> {
        self.precision.clone().cholesky().map(|c| c.inverse())
    }

    /// Draws mean + L⁻ᵀz where LLᵀ = Q. Returns None when Q is not positive definite.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<DVector<f64>> {
        let chol = self.precision.clone().cholesky()?;
        let mean = chol.solve(&self.linear);
        let z = DVector::from_fn(self.linear.len(), |_, _| standard_normal(rng));
        let offset = chol.l().transpose().solve_upper_triangular(&z)?;
        Some(mean + offset)
    }
}

/// Coefficient blocks of the joint fixed-effect draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FixedBlock {
    BetaStar,
    Responder(usize),
    Nonresponder(usize),
}

impl FixedBlock {
    fn name(self) -> &'static str {
        match self {
            Self::BetaStar => "beta_star",
            Self::Responder(1) => "beta1",
            Self::Responder(_) => "beta2",
            Self::Nonresponder(1) => "alpha1",
            Self::Nonresponder(_) => "alpha2",
        }
    }
}

struct FixedLayout {
    blocks: Vec<(FixedBlock, usize, usize)>, // block, offset, length
    total: usize,
}

fn fixed_layout(ctx: &ModelContext) -> FixedLayout {
    let mut blocks = Vec::new();
    let mut offset = 0;
    let q = ctx.cohort.n_covariates();
    if q > 0 {
        blocks.push((FixedBlock::BetaStar, 0, q));
        offset = q;
    }
    for z in [1usize, 0] {
        if ctx.cell_active(true, z) {
            let d = ctx.bases.responder_population.dimension();
            blocks.push((FixedBlock::Responder(z), offset, d));
            offset += d;
        }
    }
    for z in [1usize, 0] {
        if ctx.cell_active(false, z) {
            let d = ctx.bases.nonresponder_population.dimension();
            blocks.push((FixedBlock::Nonresponder(z), offset, d));
            offset += d;
        }
    }
    FixedLayout { blocks, total: offset }
}

/// Full conditional of the stacked fixed coefficients (β*, β₁, β₂, α₁, α₂)
/// over the active cells: flat prior on β* and the polynomial terms,
/// N(0, smoothing variance) on the truncated terms.
pub fn fixed_effects_conditional(ctx: &ModelContext, cache: &DesignCache, theta: &ThetaState) -> GaussianConditional {
    let layout = fixed_layout(ctx);
    let n = layout.total;
    let q = ctx.cohort.n_covariates();
    let p = ctx.hyper.degree;
    let mut xtx = DMatrix::<f64>::zeros(n, n);
    let mut xty = DVector::<f64>::zeros(n);
    let mut row = vec![0.0; n];
    let mut active: Vec<usize> = Vec::with_capacity(n);
    for (i, s) in ctx.cohort.subjects().iter().enumerate() {
        let responder = ctx.cohort.is_responder(i);
        let z = s.group();
        let block = if responder {
            FixedBlock::Responder(z)
        } else {
            FixedBlock::Nonresponder(z)
        };
        let &(_, offset, dim) = layout
            .blocks
            .iter()
            .find(|(b, _, _)| *b == block)
            .expect("subject's cell is active");
        let rows = cache.rows(i);
        let ind = if responder { &theta.b[i] } else { &theta.a[i] };
        for (j, o) in s.obs.iter().enumerate() {
            active.clear();
            for k in 0..q {
                row[k] = s.x_star[k];
                active.push(k);
            }
            for k in 0..dim {
                row[offset + k] = rows.population[j * dim + k];
                active.push(offset + k);
            }
            let target = o.y - dot(&rows.individual[j * ind.len()..(j + 1) * ind.len()], ind);
            for &a in &active {
                xty[a] += row[a] * target;
                for &b in &active {
                    xtx[(a, b)] += row[a] * row[b];
                }
            }
        }
    }
    let inv_sigma2 = 1.0 / theta.sigma2;
    let mut precision = xtx * inv_sigma2;
    let linear = xty * inv_sigma2;
    for &(block, offset, dim) in &layout.blocks {
        let smoothing = match block {
            FixedBlock::BetaStar => continue,
            FixedBlock::Responder(z) => theta.smooth_beta[z],
            FixedBlock::Nonresponder(z) => theta.smooth_alpha[z],
        };
        for k in p + 1..dim {
            precision[(offset + k, offset + k)] += 1.0 / smoothing;
        }
    }
    GaussianConditional { precision, linear }
}

/// Joint normal draw of all fixed coefficients. Coefficients of cells with
/// no subjects stay at zero.
pub fn update_fixed_effects<R: Rng + ?Sized>(
    ctx: &ModelContext,
    cache: &DesignCache,
    theta: &mut ThetaState,
    rng: &mut R,
) -> Result<()> {
    let layout = fixed_layout(ctx);
    if layout.total == 0 {
        return Ok(());
    }
    let cond = fixed_effects_conditional(ctx, cache, theta);
    let Some(draw) = cond.sample(rng) else {
        return Err(rank_deficient_block(&layout, &cond.precision));
    };
    for &(block, offset, dim) in &layout.blocks {
        let target = match block {
            FixedBlock::BetaStar => &mut theta.beta_star,
            FixedBlock::Responder(z) => &mut theta.beta[z],
            FixedBlock::Nonresponder(z) => &mut theta.alpha[z],
        };
        target.copy_from_slice(&draw.as_slice()[offset..offset + dim]);
    }
    Ok(())
}

fn rank_deficient_block(layout: &FixedLayout, precision: &DMatrix<f64>) -> Error {
    for &(block, offset, dim) in &layout.blocks {
        let sub = precision.view((offset, offset), (dim, dim)).into_owned();
        if sub.cholesky().is_none() {
            return Error::RankDeficient {
                block: block.name().to_string(),
            };
        }
    }
    Error::RankDeficient {
        block: "joint fixed effects".to_string(),
    }
}

/// Full conditional of subject `i`'s random coefficients.
pub fn random_effects_conditional(
    ctx: &ModelContext,
    cache: &DesignCache,
    theta: &ThetaState,
    i: usize,
) -> GaussianConditional {
    let s = ctx.cohort.subject(i);
    let responder = ctx.cohort.is_responder(i);
    let rows = cache.rows(i);
    let (pop, _) = theta.subject_coefficients(i, s.group(), responder);
    let d = ctx.individual_basis(i).dimension();
    let p = ctx.hyper.degree;
    let xb = dot(&s.x_star, &theta.beta_star);
    let mut precision = DMatrix::<f64>::zeros(d, d);
    let mut linear = DVector::<f64>::zeros(d);
    let inv_sigma2 = 1.0 / theta.sigma2;
    for (j, o) in s.obs.iter().enumerate() {
        let phi = &rows.individual[j * d..(j + 1) * d];
        let target = o.y - xb - dot(&rows.population[j * pop.len()..(j + 1) * pop.len()], pop);
        for a in 0..d {
            linear[a] += phi[a] * target * inv_sigma2;
            for b in 0..d {
                precision[(a, b)] += phi[a] * phi[b] * inv_sigma2;
            }
        }
    }
    let (poly, knot) = if responder {
        (&theta.sigma2_b_poly, theta.sigma2_b)
    } else {
        (&theta.sigma2_a_poly, theta.sigma2_a)
    };
    for k in 0..d {
        let var = if k <= p { poly[k] } else { knot };
        precision[(k, k)] += 1.0 / var;
    }
    GaussianConditional { precision, linear }
}

/// Normal full-conditional draw of b_i (responder) or a_i (nonresponder).
pub fn update_random_effects<R: Rng + ?Sized>(
    ctx: &ModelContext,
    cache: &DesignCache,
    theta: &mut ThetaState,
    i: usize,
    rng: &mut R,
) -> Result<()> {
    let cond = random_effects_conditional(ctx, cache, theta, i);
    let draw = cond.sample(rng).ok_or_else(|| Error::RankDeficient {
        block: format!("random effects of subject index {i}"),
    })?;
    let target = if ctx.cohort.is_responder(i) {
        &mut theta.b[i]
    } else {
        &mut theta.a[i]
    };
    target.copy_from_slice(draw.as_slice());
    Ok(())
}

/// (count, sum of squares) governed by each variance parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceStatistics {
    pub residual: (usize, f64),
    pub smooth_beta: [(usize, f64); 2],
    pub smooth_alpha: [(usize, f64); 2],
    pub knot_b: (usize, f64),
    pub knot_a: (usize, f64),
    pub poly_b: Vec<(usize, f64)>,
    pub poly_a: Vec<(usize, f64)>,
}

pub fn variance_statistics(ctx: &ModelContext, cache: &DesignCache, theta: &ThetaState) -> VarianceStatistics {
    let p = ctx.hyper.degree;
    let knot_stats = |coef: &[f64]| (coef.len() - (p + 1), coef[p + 1..].iter().map(|c| c * c).sum::<f64>());
    let mut smooth_beta = [(0, 0.0); 2];
    let mut smooth_alpha = [(0, 0.0); 2];
    for z in 0..2 {
        if ctx.cell_active(true, z) {
            smooth_beta[z] = knot_stats(&theta.beta[z]);
        }
        if ctx.cell_active(false, z) {
            smooth_alpha[z] = knot_stats(&theta.alpha[z]);
        }
    }
    let mut knot_b = (0, 0.0);
    let mut knot_a = (0, 0.0);
    let mut poly_b = vec![(0, 0.0); p + 1];
    let mut poly_a = vec![(0, 0.0); p + 1];
    for i in 0..ctx.cohort.len() {
        let (coef, knot, poly) = if ctx.cohort.is_responder(i) {
            (&theta.b[i], &mut knot_b, &mut poly_b)
        } else {
            (&theta.a[i], &mut knot_a, &mut poly_a)
        };
        let (m, ss) = knot_stats(coef);
        knot.0 += m;
        knot.1 += ss;
        for s in 0..=p {
            poly[s].0 += 1;
            poly[s].1 += coef[s] * coef[s];
        }
    }
    VarianceStatistics {
        residual: (ctx.cohort.n_observations(), residual_sum_of_squares(ctx, cache, theta)),
        smooth_beta,
        smooth_alpha,
        knot_b,
        knot_a,
        poly_b,
        poly_a,
    }
}

/// Draws every variance from IG(a₀ + m/2, b₀ + SS/2), the full conditional
/// implied by a Gamma(a₀, b₀) prior on the corresponding precision.
pub fn update_variances<R: Rng + ?Sized>(
    ctx: &ModelContext,
    cache: &DesignCache,
    theta: &mut ThetaState,
    rng: &mut R,
) -> VarianceStatistics {
    let stats = variance_statistics(ctx, cache, theta);
    let (a0, b0) = (ctx.hyper.gamma_shape, ctx.hyper.gamma_rate);
    let mut draw = |(m, ss): (usize, f64)| sample_inverse_gamma(a0 + 0.5 * m as f64, b0 + 0.5 * ss, rng);
    theta.sigma2 = draw(stats.residual);
    for z in 0..2 {
        theta.smooth_beta[z] = draw(stats.smooth_beta[z]);
        theta.smooth_alpha[z] = draw(stats.smooth_alpha[z]);
    }
    theta.sigma2_b = draw(stats.knot_b);
    theta.sigma2_a = draw(stats.knot_a);
    for (slot, &st) in theta.sigma2_b_poly.iter_mut().zip(&stats.poly_b) {
        *slot = draw(st);
    }
    for (slot, &st) in theta.sigma2_a_poly.iter_mut().zip(&stats.poly_a) {
        *slot = draw(st);
    }
    stats
}
