//! Posterior summaries computed from stored draws: duration percentiles,
//! responder proportions, discrete hazards, population mean curves with
//! pointwise bands, and subject-level predictive curves.
//!
//! Every interval and percentile uses the midpoint (type-5) empirical
//! quantile rule.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::PosteriorDraws;
use crate::error::{Error, Result};
use crate::kernels::{seeded_rng, standard_normal};
use crate::outcome::{ModelContext, ThetaState};
use crate::pipeline::write_json;
use crate::spline::BasisSpec;
use crate::types::Cohort;

/// Empirical quantile by linear interpolation between order statistics at
/// plotting positions (k − 0.5)/n. `sorted` must be ascending and nonempty.
pub fn quantile_type5(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let h = n as f64 * q + 0.5;
    if h <= 1.0 {
        return sorted[0];
    }
    if h >= n as f64 {
        return sorted[n - 1];
    }
    let k = h.floor();
    let lo = sorted[k as usize - 1];
    let hi = sorted[k as usize];
    lo + (h - k) * (hi - lo)
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Posterior mean with a central 95% interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

impl Interval {
    pub fn from_draws(values: Vec<f64>) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let m = mean(&values);
        let s = sorted(values);
        Some(Self {
            mean: m,
            lower: quantile_type5(&s, 0.025),
            upper: quantile_type5(&s, 0.975),
        })
    }
}

fn responders_in(cohort: &Cohort, group: u8) -> Vec<usize> {
    (0..cohort.len())
        .filter(|&i| cohort.is_responder(i) && cohort.subject(i).z == group)
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PercentileRow {
    pub group: u8,
    pub level: f64,
    /// `None` when the group has no responders.
    pub estimate: Option<f64>,
}

/// Percentiles of the duration W among responders of `group`.
///
/// By default each retained iteration contributes the empirical quantile of
/// its imputed durations and the estimate is their posterior mean. With
/// `pooled` the quantile is taken once over all imputations of all
/// iterations.
pub fn event_percentiles(
    draws: &PosteriorDraws,
    cohort: &Cohort,
    levels: &[f64],
    group: u8,
    pooled: bool,
) -> Result<Vec<PercentileRow>> {
    if draws.n_draws() == 0 {
        return Err(Error::NoDraws);
    }
    let members = responders_in(cohort, group);
    if members.is_empty() {
        log::warn!("group {group} has no responders; percentile cells are missing");
        return Ok(levels
            .iter()
            .map(|&level| PercentileRow {
                group,
                level,
                estimate: None,
            })
            .collect());
    }
    let estimates: Vec<f64> = if pooled {
        let all = sorted(
            draws
                .rows()
                .flat_map(|r| members.iter().map(move |&i| draws.w(r)[i]))
                .collect(),
        );
        levels.iter().map(|&q| quantile_type5(&all, q)).collect()
    } else {
        let mut sums = vec![0.0; levels.len()];
        for r in draws.rows() {
            let w = sorted(members.iter().map(|&i| draws.w(r)[i]).collect());
            for (s, &q) in sums.iter_mut().zip(levels) {
                *s += quantile_type5(&w, q);
            }
        }
        sums.iter().map(|s| s / draws.n_draws() as f64).collect()
    };
    Ok(levels
        .iter()
        .zip(estimates)
        .map(|(&level, e)| PercentileRow {
            group,
            level,
            estimate: Some(e),
        })
        .collect())
}

/// One row of the proportion table: per-group estimates and the group
/// difference (group 1 minus group 0), each with a 95% interval.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProportionRow {
    /// `p(V<=T)` or `p(W<=c|V<=T)`.
    pub quantity: String,
    pub threshold: Option<f64>,
    pub group: [Option<Interval>; 2],
    pub difference: Option<Interval>,
}

/// p(V ≤ T) and p(W ≤ c | V ≤ T) for every threshold, by group.
pub fn responder_proportions(
    draws: &PosteriorDraws,
    cohort: &Cohort,
    thresholds: &[f64],
    max_followup: f64,
) -> Result<Vec<ProportionRow>> {
    if draws.n_draws() == 0 {
        return Err(Error::NoDraws);
    }
    let groups: [Vec<usize>; 2] = [0u8, 1].map(|z| (0..cohort.len()).filter(|&i| cohort.subject(i).z == z).collect());
    // per quantity, per group: per-iteration values (None when undefined)
    let n_q = 1 + thresholds.len();
    let mut per_iter: Vec<[Vec<Option<f64>>; 2]> = (0..n_q).map(|_| [Vec::new(), Vec::new()]).collect();
    for r in draws.rows() {
        let (h, w) = (draws.h(r), draws.w(r));
        for (z, members) in groups.iter().enumerate() {
            let suppressed: Vec<usize> = members
                .iter()
                .copied()
                .filter(|&i| h[i] + w[i] <= max_followup)
                .collect();
            let p_v = (!members.is_empty()).then(|| suppressed.len() as f64 / members.len() as f64);
            per_iter[0][z].push(p_v);
            for (k, &c) in thresholds.iter().enumerate() {
                let p = (!suppressed.is_empty())
                    .then(|| suppressed.iter().filter(|&&i| w[i] <= c).count() as f64 / suppressed.len() as f64);
                per_iter[k + 1][z].push(p);
            }
        }
    }
    let label = |k: usize| {
        if k == 0 {
            ("p(V<=T)".to_string(), None)
        } else {
            (format!("p(W<={}|V<=T)", thresholds[k - 1]), Some(thresholds[k - 1]))
        }
    };
    Ok(per_iter
        .into_iter()
        .enumerate()
        .map(|(k, [g0, g1])| {
            let (quantity, threshold) = label(k);
            let diffs: Vec<f64> = g0.iter().zip(&g1).filter_map(|(a, b)| Some((*b)? - (*a)?)).collect();
            ProportionRow {
                quantity,
                threshold,
                group: [
                    Interval::from_draws(g0.into_iter().flatten().collect()),
                    Interval::from_draws(g1.into_iter().flatten().collect()),
                ],
                difference: Interval::from_draws(diffs),
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HazardCell {
    pub start: f64,
    pub end: f64,
    /// Posterior mean over iterations with a nonempty risk set.
    pub hazard: Option<f64>,
    pub mean_risk_set: f64,
}

/// Discrete hazard p(W < t₂ | W ≥ t₁) of responders in `group` on cells of
/// width `step` from 0 to the largest imputed duration.
pub fn hazard_curve(draws: &PosteriorDraws, cohort: &Cohort, group: u8, step: f64) -> Result<Vec<HazardCell>> {
    if !(step > 0.0) {
        return Err(Error::InvalidConfig("hazard grid step must be positive".into()));
    }
    if draws.n_draws() == 0 {
        return Err(Error::NoDraws);
    }
    let members = responders_in(cohort, group);
    let w_max = draws
        .rows()
        .flat_map(|r| members.iter().map(move |&i| draws.w(r)[i]))
        .fold(0.0, f64::max);
    let n_cells = ((w_max / step).floor() as usize + 1).max(1);
    let mut sums = vec![0.0; n_cells];
    let mut defined = vec![0usize; n_cells];
    let mut risk = vec![0.0; n_cells];
    for r in draws.rows() {
        let w = draws.w(r);
        let mut counts = vec![0usize; n_cells];
        for &i in &members {
            counts[((w[i] / step).floor() as usize).min(n_cells - 1)] += 1;
        }
        let mut at_risk = members.len();
        for k in 0..n_cells {
            risk[k] += at_risk as f64;
            if at_risk > 0 {
                sums[k] += counts[k] as f64 / at_risk as f64;
                defined[k] += 1;
            }
            at_risk -= counts[k];
        }
    }
    let n = draws.n_draws() as f64;
    Ok((0..n_cells)
        .map(|k| HazardCell {
            start: k as f64 * step,
            end: (k + 1) as f64 * step,
            hazard: (defined[k] > 0).then(|| sums[k] / defined[k] as f64),
            mean_risk_set: risk[k] / n,
        })
        .collect())
}

/// Pointwise posterior mean and 95% band of a curve on a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Band {
    pub mean: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl Band {
    /// `values[d][g]` is draw d at grid point g.
    pub fn from_draws(values: &[Vec<f64>]) -> Self {
        let n_grid = values.first().map_or(0, Vec::len);
        let mut band = Self {
            mean: Vec::with_capacity(n_grid),
            lower: Vec::with_capacity(n_grid),
            upper: Vec::with_capacity(n_grid),
        };
        for g in 0..n_grid {
            let column: Vec<f64> = values.iter().map(|v| v[g]).collect();
            band.mean.push(mean(&column));
            let s = sorted(column);
            band.lower.push(quantile_type5(&s, 0.025));
            band.upper.push(quantile_type5(&s, 0.975));
        }
        band
    }
}

/// A population curve on the analysis scale, its time derivative, and the
/// curve squared back to the original scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSummary {
    pub grid: Vec<f64>,
    pub value: Band,
    pub derivative: Band,
    pub original: Band,
}

/// Which population curve: responder (realigned clock) or nonresponder
/// (calendar time), and the group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurveKey {
    pub responder: bool,
    pub group: u8,
}

fn curve_basis(ctx: &ModelContext, responder: bool) -> &BasisSpec {
    if responder {
        &ctx.bases.responder_population
    } else {
        &ctx.bases.nonresponder_population
    }
}

fn curve_coefficients(theta: &ThetaState, key: CurveKey) -> &[f64] {
    let z = usize::from(key.group);
    if key.responder {
        &theta.beta[z]
    } else {
        &theta.alpha[z]
    }
}

/// Knot-supported range of a population curve.
pub fn default_grid(ctx: &ModelContext, responder: bool, points: usize) -> Vec<f64> {
    let (lo, hi) = if responder {
        ctx.bases.responder_time_range
    } else {
        ctx.bases.nonresponder_time_range
    };
    linspace(lo, hi, points)
}

pub fn linspace(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    match points {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..points)
            .map(|k| {
                if k + 1 == points {
                    hi
                } else {
                    lo + (hi - lo) * k as f64 / (points - 1) as f64
                }
            })
            .collect(),
    }
}

struct CurveDraws {
    value: Vec<Vec<f64>>,
    derivative: Vec<Vec<f64>>,
}

fn curve_draws(
    draws: &PosteriorDraws,
    ctx: &ModelContext,
    key: CurveKey,
    reference: &[f64],
    grid: &[f64],
) -> Result<CurveDraws> {
    if draws.layout.theta.is_none() {
        return Err(Error::InvalidConfig(
            "fit has no outcome-model draws (marginal variant)".into(),
        ));
    }
    if draws.n_draws() == 0 {
        return Err(Error::NoDraws);
    }
    let basis = curve_basis(ctx, key.responder);
    let range = if key.responder {
        ctx.bases.responder_time_range
    } else {
        ctx.bases.nonresponder_time_range
    };
    if grid.iter().any(|&t| t < range.0 || t > range.1) {
        log::warn!(
            "curve grid extends beyond the data range [{}, {}]; values are extrapolated",
            range.0,
            range.1
        );
    }
    let d = basis.dimension();
    let rows: Vec<(Vec<f64>, Vec<f64>)> = grid
        .iter()
        .map(|&t| {
            let mut b = vec![0.0; d];
            let mut db = vec![0.0; d];
            basis.eval_into(t, &mut b);
            basis.derivative_into(t, &mut db);
            (b, db)
        })
        .collect();
    let mut out = CurveDraws {
        value: Vec::with_capacity(draws.n_draws()),
        derivative: Vec::with_capacity(draws.n_draws()),
    };
    for r in draws.rows() {
        let theta = draws.theta(r).expect("joint layout");
        let coef = curve_coefficients(&theta, key);
        let offset: f64 = reference.iter().zip(&theta.beta_star).map(|(x, b)| x * b).sum();
        out.value
            .push(rows.iter().map(|(b, _)| dot(b, coef) + offset).collect());
        out.derivative.push(rows.iter().map(|(_, db)| dot(db, coef)).collect());
    }
    Ok(out)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn summarize(grid: &[f64], c: &CurveDraws) -> CurveSummary {
    let original: Vec<Vec<f64>> = c.value.iter().map(|v| v.iter().map(|x| x * x).collect()).collect();
    CurveSummary {
        grid: grid.to_vec(),
        value: Band::from_draws(&c.value),
        derivative: Band::from_draws(&c.derivative),
        original: Band::from_draws(&original),
    }
}

/// Population mean curve of one (responder, group) cell at the reference
/// covariates, with its derivative and original-scale version.
pub fn population_curves(
    draws: &PosteriorDraws,
    ctx: &ModelContext,
    key: CurveKey,
    reference: &[f64],
    grid: &[f64],
) -> Result<CurveSummary> {
    Ok(summarize(grid, &curve_draws(draws, ctx, key, reference, grid)?))
}

/// Group 1 minus group 0, differenced within each draw before summarizing.
pub fn difference_curves(
    draws: &PosteriorDraws,
    ctx: &ModelContext,
    responder: bool,
    reference: &[f64],
    grid: &[f64],
) -> Result<CurveSummary> {
    let g0 = curve_draws(draws, ctx, CurveKey { responder, group: 0 }, reference, grid)?;
    let g1 = curve_draws(draws, ctx, CurveKey { responder, group: 1 }, reference, grid)?;
    let diff = |a: &[Vec<f64>], b: &[Vec<f64>]| -> Vec<Vec<f64>> {
        a.iter()
            .zip(b)
            .map(|(x, y)| x.iter().zip(y).map(|(p, q)| q - p).collect())
            .collect()
    };
    let sq = |a: &[Vec<f64>]| -> Vec<Vec<f64>> { a.iter().map(|v| v.iter().map(|x| x * x).collect()).collect() };
    Ok(CurveSummary {
        grid: grid.to_vec(),
        value: Band::from_draws(&diff(&g0.value, &g1.value)),
        derivative: Band::from_draws(&diff(&g0.derivative, &g1.derivative)),
        original: Band::from_draws(&diff(&sq(&g0.value), &sq(&g1.value))),
    })
}

/// Sampled mean and predictive curves of one subject.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectPredictive {
    pub subject: String,
    pub times: Vec<f64>,
    /// Pooled row index of each sampled draw.
    pub draw_index: Vec<usize>,
    pub mean_curves: Vec<Vec<f64>>,
    pub predictive_curves: Vec<Vec<f64>>,
    pub average_mean: Vec<f64>,
}

/// Draws `n_samples` evenly spaced retained iterations and evaluates the
/// subject's mean curve (population + individual spline + covariates at the
/// draw's suppression time) and a predictive curve with N(0, σ²) noise at
/// `times` (the observation times when `None`).
pub fn subject_predictive(
    draws: &PosteriorDraws,
    ctx: &ModelContext,
    i: usize,
    n_samples: usize,
    times: Option<&[f64]>,
    seed: u64,
) -> Result<SubjectPredictive> {
    if draws.layout.theta.is_none() {
        return Err(Error::InvalidConfig(
            "fit has no outcome-model draws (marginal variant)".into(),
        ));
    }
    if i >= ctx.cohort.len() {
        return Err(Error::InvalidConfig(format!("subject index {i} out of range")));
    }
    let total = draws.n_draws();
    if n_samples > total {
        return Err(Error::InsufficientDraws {
            requested: n_samples,
            available: total,
        });
    }
    let s = ctx.cohort.subject(i);
    let times: Vec<f64> = times.map_or_else(|| s.obs.iter().map(|o| o.t).collect(), <[f64]>::to_vec);
    let picks: Vec<usize> = (0..n_samples).map(|k| k * total / n_samples.max(1)).collect();
    let mut rng = seeded_rng(seed, 1 << 32 | i as u64);
    let mut mean_curves = Vec::with_capacity(n_samples);
    let mut predictive_curves = Vec::with_capacity(n_samples);
    let mut next = picks.iter().peekable();
    for (k, r) in draws.rows().enumerate() {
        if next.peek() != Some(&&k) {
            continue;
        }
        next.next();
        let theta = draws.theta(r).expect("joint layout");
        let v = draws.h(r)[i] + draws.w(r)[i];
        let m: Vec<f64> = times.iter().map(|&t| ctx.subject_mean(i, t, v, &theta)).collect();
        let sd = theta.sigma2.sqrt();
        let p: Vec<f64> = m.iter().map(|&x| x + sd * standard_normal(&mut rng)).collect();
        mean_curves.push(m);
        predictive_curves.push(p);
    }
    let average_mean = (0..times.len())
        .map(|g| mean(&mean_curves.iter().map(|c| c[g]).collect::<Vec<_>>()))
        .collect();
    Ok(SubjectPredictive {
        subject: s.id.clone(),
        times,
        draw_index: picks,
        mean_curves,
        predictive_curves,
        average_mean,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SummaryOptions {
    pub levels: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub hazard_step: f64,
    pub grid_points: usize,
    pub pooled_percentiles: bool,
    /// Covariate profile of the population curves; cohort means when `None`.
    pub reference_covariates: Option<Vec<f64>>,
}

impl Default for SummaryOptions {
    fn default() -> Self {
        Self {
            levels: vec![0.05, 0.25, 0.5, 0.75, 0.95],
            thresholds: vec![90.0, 180.0],
            hazard_step: 30.0,
            grid_points: 101,
            pooled_percentiles: false,
            reference_covariates: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelledCurve {
    pub key: CurveKey,
    pub curve: CurveSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DifferenceCurve {
    pub responder: bool,
    pub curve: CurveSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub n_draws: usize,
    pub options: SummaryOptions,
    pub percentiles: Vec<PercentileRow>,
    pub proportions: Vec<ProportionRow>,
    pub hazard: [Vec<HazardCell>; 2],
    /// Empty for marginal fits.
    pub curves: Vec<LabelledCurve>,
    pub differences: Vec<DifferenceCurve>,
}

/// Every summary of a fit. Curves are skipped for marginal fits and for
/// cells without subjects.
pub fn summarize_fit(draws: &PosteriorDraws, ctx: &ModelContext, options: &SummaryOptions) -> Result<SummaryReport> {
    if draws.n_draws() == 0 {
        return Err(Error::NoDraws);
    }
    let cohort = &ctx.cohort;
    let mut percentiles = Vec::new();
    for z in [0u8, 1] {
        percentiles.extend(event_percentiles(
            draws,
            cohort,
            &options.levels,
            z,
            options.pooled_percentiles,
        )?);
    }
    let proportions = responder_proportions(draws, cohort, &options.thresholds, ctx.hyper.max_followup)?;
    let hazard = [
        hazard_curve(draws, cohort, 0, options.hazard_step)?,
        hazard_curve(draws, cohort, 1, options.hazard_step)?,
    ];
    let reference = options
        .reference_covariates
        .clone()
        .unwrap_or_else(|| cohort.covariate_means());
    let mut curves = Vec::new();
    let mut differences = Vec::new();
    if draws.layout.theta.is_some() {
        for responder in [true, false] {
            let grid = default_grid(ctx, responder, options.grid_points);
            for group in [0u8, 1] {
                if ctx.cell_active(responder, usize::from(group)) {
                    let key = CurveKey { responder, group };
                    curves.push(LabelledCurve {
                        key,
                        curve: population_curves(draws, ctx, key, &reference, &grid)?,
                    });
                }
            }
            if ctx.cell_active(responder, 0) && ctx.cell_active(responder, 1) {
                differences.push(DifferenceCurve {
                    responder,
                    curve: difference_curves(draws, ctx, responder, &reference, &grid)?,
                });
            }
        }
    }
    Ok(SummaryReport {
        n_draws: draws.n_draws(),
        options: options.clone(),
        percentiles,
        proportions,
        hazard,
        curves,
        differences,
    })
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

/// Writes `report.json` and one CSV per table or figure; returns the paths.
pub fn write_report(dir: &Path, report: &SummaryReport) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    let json = dir.join("report.json");
    write_json(&json, report)?;
    paths.push(json);

    let path = dir.join("percentiles.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["group", "level", "estimate"])?;
    for row in &report.percentiles {
        w.write_record([row.group.to_string(), row.level.to_string(), opt(row.estimate)])?;
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    paths.push(path);

    let path = dir.join("proportions.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["quantity", "cell", "mean", "lower", "upper"])?;
    for row in &report.proportions {
        let cells = [
            ("group0", row.group[0]),
            ("group1", row.group[1]),
            ("difference", row.difference),
        ];
        for (name, iv) in cells {
            w.write_record([
                row.quantity.clone(),
                name.to_string(),
                opt(iv.map(|i| i.mean)),
                opt(iv.map(|i| i.lower)),
                opt(iv.map(|i| i.upper)),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    paths.push(path);

    let path = dir.join("hazard.csv");
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["group", "start", "end", "hazard", "mean_risk_set"])?;
    for (z, cells) in report.hazard.iter().enumerate() {
        for c in cells {
            w.write_record([
                z.to_string(),
                c.start.to_string(),
                c.end.to_string(),
                opt(c.hazard),
                c.mean_risk_set.to_string(),
            ])?;
        }
    }
    w.flush().map_err(|e| Error::io(&path, e))?;
    paths.push(path);

    let curve_header = [
        "responder",
        "group",
        "t",
        "mean",
        "lower",
        "upper",
        "d_mean",
        "d_lower",
        "d_upper",
        "orig_mean",
        "orig_lower",
        "orig_upper",
    ];
    let write_curve = |w: &mut csv::Writer<std::fs::File>, responder: bool, group: &str, c: &CurveSummary| {
        for g in 0..c.grid.len() {
            w.write_record([
                responder.to_string(),
                group.to_string(),
                c.grid[g].to_string(),
                c.value.mean[g].to_string(),
                c.value.lower[g].to_string(),
                c.value.upper[g].to_string(),
                c.derivative.mean[g].to_string(),
                c.derivative.lower[g].to_string(),
                c.derivative.upper[g].to_string(),
                c.original.mean[g].to_string(),
                c.original.lower[g].to_string(),
                c.original.upper[g].to_string(),
            ])?;
        }
        Ok::<_, Error>(())
    };
    if !report.curves.is_empty() {
        let path = dir.join("curves.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(curve_header)?;
        for c in &report.curves {
            write_curve(&mut w, c.key.responder, &c.key.group.to_string(), &c.curve)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    if !report.differences.is_empty() {
        let path = dir.join("difference_curves.csv");
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(curve_header)?;
        for d in &report.differences {
            write_curve(&mut w, d.responder, "1-0", &d.curve)?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        paths.push(path);
    }
    Ok(paths)
}
