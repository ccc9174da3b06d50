//! Helpers shared by the integration tests: empirical-CDF distances, grid
//! posteriors, small cohorts and hand-built draw sets.
#![allow(dead_code)]

use dicjm_core::engine::{ChainConfig, ChainDraws, ChainStats, DrawLayout, ModelVariant, PosteriorDraws};
use dicjm_core::outcome::{ModelContext, ThetaState};
use dicjm_core::types::{validate_cohort, Cohort, Hyperparams, Observation, Subject};
use statrs::distribution::{ContinuousCDF, Normal};

/// sup_x |F_n(x) − F(x)| for a continuous reference CDF.
pub fn ks_distance(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    ks_distance_with_atoms(samples, |x| {
        let f = cdf(x);
        (f, f)
    })
}

/// Sup distance between the ECDF of `samples` and a CDF that may have
/// atoms. `cdf(x)` returns (F(x−), F(x)).
pub fn ks_distance_with_atoms(samples: &[f64], cdf: impl Fn(f64) -> (f64, f64)) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len() as f64;
    let mut d: f64 = 0.0;
    let mut k = 0;
    while k < s.len() {
        let x = s[k];
        let mut end = k;
        while end < s.len() && s[end] == x {
            end += 1;
        }
        let (left, right) = cdf(x);
        d = d.max((k as f64 / n - left).abs()).max((end as f64 / n - right).abs());
        k = end;
    }
    d
}

/// Trapezoid CDF of an unnormalized log density tabulated on an ascending grid.
pub struct GridCdf {
    grid: Vec<f64>,
    cum: Vec<f64>,
}

impl GridCdf {
    pub fn from_log_density(grid: Vec<f64>, log_density: &[f64]) -> Self {
        let top = log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let dens: Vec<f64> = log_density.iter().map(|l| (l - top).exp()).collect();
        Self::from_density(grid, &dens)
    }

    pub fn from_density(grid: Vec<f64>, dens: &[f64]) -> Self {
        let mut cum = vec![0.0; grid.len()];
        for k in 1..grid.len() {
            cum[k] = cum[k - 1] + 0.5 * (dens[k] + dens[k - 1]) * (grid[k] - grid[k - 1]);
        }
        let total = cum[grid.len() - 1];
        for c in &mut cum {
            *c /= total;
        }
        Self { grid, cum }
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let g = &self.grid;
        if x <= g[0] {
            return 0.0;
        }
        if x >= g[g.len() - 1] {
            return 1.0;
        }
        let k = g.partition_point(|&t| t <= x);
        let (x0, x1) = (g[k - 1], g[k]);
        self.cum[k - 1] + (self.cum[k] - self.cum[k - 1]) * (x - x0) / (x1 - x0)
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect()
}

pub fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn sd(v: &[f64]) -> f64 {
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

/// log N(x | mean, var), written out without library help.
pub fn log_normal_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * (x - mean).powi(2) / var
}

pub fn subject(id: &str, z: u8, h: (f64, f64), v: (f64, f64), obs: &[(f64, f64)]) -> Subject {
    Subject {
        id: id.into(),
        z,
        x_star: vec![],
        l_h: h.0,
        r_h: h.1,
        l_v: v.0,
        r_v: v.1,
        obs: obs.iter().map(|&(t, y)| Observation { t, y }).collect(),
    }
}

pub fn cohort(subjects: Vec<Subject>) -> Cohort {
    validate_cohort(subjects, &Hyperparams::default()).expect("valid toy cohort")
}

/// Marginal-layout draws with one row per (h, w) pair, all in chain 0.
pub fn latent_draws(ctx: &ModelContext, rows: &[(Vec<f64>, Vec<f64>)]) -> PosteriorDraws {
    let layout = DrawLayout::new(ctx, ModelVariant::Marginal);
    let mut values = Vec::new();
    for (h, w) in rows {
        values.extend_from_slice(&[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        values.extend_from_slice(h);
        values.extend_from_slice(w);
    }
    one_chain(layout, rows.len(), values, ModelVariant::Marginal)
}

/// Joint-layout draws with one row per (θ, h, w) triple.
pub fn joint_draws(ctx: &ModelContext, rows: &[(ThetaState, Vec<f64>, Vec<f64>)]) -> PosteriorDraws {
    let layout = DrawLayout::new(ctx, ModelVariant::Joint);
    let theta_layout = layout.theta.clone().expect("joint layout");
    let mut values = Vec::new();
    for (theta, h, w) in rows {
        values.extend_from_slice(&[0.0, 0.0, 1.0, 1.0, 0.0, 0.0, 1.0, 1.0]);
        values.extend(theta_layout.flatten(theta));
        values.extend_from_slice(h);
        values.extend_from_slice(w);
        values.extend((0..ctx.cohort.len()).map(|i| ctx.loglik_subject(i, h[i], w[i], theta)));
    }
    one_chain(layout, rows.len(), values, ModelVariant::Joint)
}

fn one_chain(layout: DrawLayout, n: usize, values: Vec<f64>, variant: ModelVariant) -> PosteriorDraws {
    assert_eq!(values.len(), n * layout.width());
    PosteriorDraws {
        config: ChainConfig {
            n_iter: n + 1,
            burn_in: 1,
            n_chains: 1,
            variant,
            ..ChainConfig::default()
        },
        layout,
        chains: vec![ChainDraws {
            chain: 0,
            iterations: (1..=n as u64).collect(),
            values,
            stats: ChainStats::default(),
        }],
    }
}

/// Truncated CDF from statrs, using upper tails when the interval sits
/// above the mean so that differences keep their precision.
pub fn truncated_cdf(mean: f64, var: f64, lo: f64, hi: f64) -> impl Fn(f64) -> f64 {
    let n = Normal::new(mean, var.sqrt()).unwrap();
    move |x: f64| {
        let x = x.clamp(lo, hi);
        if lo >= mean {
            (n.sf(lo) - n.sf(x)) / (n.sf(lo) - n.sf(hi))
        } else {
            (n.cdf(x) - n.cdf(lo)) / (n.cdf(hi) - n.cdf(lo))
        }
    }
}

/// Marginal densities of (mean, var) under p ∝ 1/var by brute-force
/// integration of the joint posterior on a grid.
pub fn jeffreys_grid_marginals(x: &[f64], means: &[f64], vars: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let log_joint = |m: f64, v: f64| -v.ln() + x.iter().map(|&xi| log_normal_pdf(xi, m, v)).sum::<f64>();
    // var marginal: integrate the mean out on a wide per-var grid
    let n = x.len() as f64;
    let xbar = x.iter().sum::<f64>() / n;
    let var_marginal = |v: f64| {
        let half = 14.0 * (v / n).sqrt();
        let g = linspace(xbar - half, xbar + half, 2001);
        let step = g[1] - g[0];
        g.iter().map(|&m| log_joint(m, v).exp()).sum::<f64>() * step
    };
    // mean marginal: integrate the variance out on a log grid
    let s_grid = linspace(-12.0, 16.0, 6001);
    let ds = s_grid[1] - s_grid[0];
    let mean_marginal = |m: f64| s_grid.iter().map(|&s| (log_joint(m, s.exp()) + s).exp()).sum::<f64>() * ds;
    let total = s_grid.iter().map(|&s| var_marginal(s.exp()) * s.exp()).sum::<f64>() * ds;
    (
        means.iter().map(|&m| mean_marginal(m) / total).collect(),
        vars.iter().map(|&v| var_marginal(v) / total).collect(),
    )
}

/// Flat priors on β* and the polynomial terms need every covariate to vary
/// and every active cell to span more than degree + 1 distinct times, so at
/// least one knot direction sees data. With fewer, the cell's smoothing
/// variance follows its vague prior out of floating-point range.
pub fn identifiable(ctx: &ModelContext) -> bool {
    let mut cells: [[Vec<f64>; 2]; 2] = Default::default();
    for (i, s) in ctx.cohort.subjects().iter().enumerate() {
        let cell = &mut cells[usize::from(ctx.cohort.is_responder(i))][s.group()];
        cell.extend(s.obs.iter().map(|o| o.t));
    }
    let spans = cells.iter().flatten().all(|times| {
        let mut t = times.clone();
        t.sort_by(f64::total_cmp);
        t.dedup();
        times.is_empty() || t.len() > ctx.hyper.degree + 1
    });
    let subjects = ctx.cohort.subjects();
    let varies = (0..ctx.cohort.n_covariates()).all(|k| subjects.iter().any(|s| s.x_star[k] != subjects[0].x_star[k]));
    spans && varies
}
