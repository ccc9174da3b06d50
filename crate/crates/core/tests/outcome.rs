mod common;

use common::subject;
use dicjm_core::kernels::{seeded_rng, standard_normal};
use dicjm_core::outcome::{
    fixed_effects_conditional, random_effects_conditional, update_fixed_effects, update_random_effects,
    update_variances, variance_statistics, DesignCache, ModelContext, ThetaState,
};
use dicjm_core::spline::eval_basis;
use dicjm_core::types::{validate_cohort, Hyperparams, LatentState, Subject};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

const INF: f64 = f64::INFINITY;

fn hyper() -> Hyperparams {
    Hyperparams {
        responder_quantile_knots: 2,
        nonresponder_quantile_knots: 2,
        ..Hyperparams::default()
    }
}

fn context(subjects: Vec<Subject>, hp: Hyperparams) -> ModelContext {
    let cohort = validate_cohort(subjects, &hp).unwrap();
    ModelContext::new(cohort, hp).unwrap()
}

/// Same bases, new outcome values.
fn with_outcomes(ctx: &ModelContext, y: impl Fn(usize, f64) -> f64) -> ModelContext {
    let mut subjects = ctx.cohort.clone().into_subjects();
    for (i, s) in subjects.iter_mut().enumerate() {
        for o in &mut s.obs {
            o.y = y(i, o.t);
        }
    }
    let cohort = validate_cohort(subjects, &ctx.hyper).unwrap();
    ModelContext::with_bases(cohort, ctx.hyper.clone(), ctx.bases.clone()).unwrap()
}

fn visits(n: usize, step: f64) -> Vec<(f64, f64)> {
    (0..n).map(|k| (k as f64 * step, 0.0)).collect()
}

/// Four responders in group 1 (dense visits) and two nonresponders in group 0.
fn cohort_six() -> ModelContext {
    context(
        vec![
            subject("r1", 1, (0.0, 90.0), (180.0, 270.0), &visits(10, 90.0)),
            subject("r2", 1, (0.0, 90.0), (270.0, 360.0), &visits(10, 90.0)),
            subject("r3", 1, (90.0, 180.0), (270.0, 360.0), &visits(9, 100.0)),
            subject("r4", 1, (0.0, 90.0), (360.0, 450.0), &visits(11, 80.0)),
            subject("n1", 0, (0.0, 90.0), (810.0, INF), &visits(10, 90.0)),
            subject("n2", 0, (0.0, 90.0), (810.0, INF), &visits(10, 85.0)),
        ],
        hyper(),
    )
}

fn latent_six() -> LatentState {
    LatentState {
        h: vec![45.0, 30.0, 120.0, 60.0, 40.0, 50.0],
        w: vec![180.0, 280.0, 200.0, 340.0, 900.0, 950.0],
    }
}

#[test]
fn noiseless_subject_likelihood_peaks_at_generating_w() {
    let base = cohort_six();
    let latent = latent_six();
    let mut theta = ThetaState::initial(&base);
    theta.beta[1] = vec![14.0, -0.3, 0.1, 5.0, -6.0, 2.0];
    theta.beta[1].resize(base.bases.responder_population.dimension(), 0.0);
    theta.b[0] = vec![0.5, 0.2, 0.0, -0.3];
    let ctx = with_outcomes(&base, |i, t| base.subject_mean(i, t, latent.v(i), &theta));
    let s = ctx.cohort.subject(0);
    let h = latent.h[0];
    let (lo, hi) = s.w_bounds(h);
    let grid: Vec<f64> = (1..=(hi - lo) as usize).map(|k| lo + k as f64).collect();
    assert!(grid.contains(&latent.w[0]));
    let best = grid
        .iter()
        .copied()
        .max_by(|&a, &b| {
            ctx.loglik_subject(0, h, a, &theta)
                .total_cmp(&ctx.loglik_subject(0, h, b, &theta))
        })
        .unwrap();
    assert_eq!(best, latent.w[0]);
}

#[test]
fn likelihood_flattens_as_sigma2_grows() {
    let ctx = with_outcomes(&cohort_six(), |_, t| 10.0 + (t / 300.0).sin());
    let latent = latent_six();
    let mut theta = ThetaState::initial(&ctx);
    theta.beta[1][1] = 2.0;
    theta.beta[1][3] = -4.0;
    let (lo, hi) = ctx.cohort.subject(1).w_bounds(latent.h[1]);
    let mut previous = INF;
    for sigma2 in [1.0, 1e2, 1e4, 1e6] {
        theta.sigma2 = sigma2;
        let ll: Vec<f64> = (1..100)
            .map(|k| ctx.loglik_subject(1, latent.h[1], lo + (hi - lo) * k as f64 / 100.0, &theta))
            .collect();
        let spread = ll.iter().copied().fold(f64::NEG_INFINITY, f64::max) - ll.iter().copied().fold(INF, f64::min);
        assert!(spread < previous * 0.02 || previous == INF, "{sigma2}: {spread}");
        previous = spread;
    }
    assert!(previous < 1e-4);
}

#[test]
fn noiseless_fixed_effects_recover_generating_coefficients() {
    let base = cohort_six();
    let latent = latent_six();
    let mut truth = ThetaState::initial(&base);
    let dr = base.bases.responder_population.dimension();
    let dn = base.bases.nonresponder_population.dimension();
    truth.beta[1] = (0..dr).map(|k| [12.0, -0.5, 0.3, 2.0, -1.5, 1.0][k % 6]).collect();
    truth.alpha[0] = (0..dn).map(|k| [10.0, 0.7, -0.2, 1.5, -1.0][k % 5]).collect();
    let ctx = with_outcomes(&base, |i, t| base.subject_mean(i, t, latent.v(i), &truth));
    let cache = DesignCache::build(&ctx, &latent);
    let mut theta = truth.clone();
    theta.sigma2 = 1e-8;
    theta.smooth_beta = [1e8; 2];
    theta.smooth_alpha = [1e8; 2];
    let mean = fixed_effects_conditional(&ctx, &cache, &theta).mean().unwrap();
    let want: Vec<f64> = truth.beta[1].iter().chain(&truth.alpha[0]).copied().collect();
    for (k, (m, w)) in mean.iter().zip(&want).enumerate() {
        assert!((m - w).abs() < 1e-3, "coefficient {k}: {m} vs {w}");
    }
}

#[test]
fn vanishing_smoothing_variance_zeroes_knot_terms() {
    let ctx = with_outcomes(&cohort_six(), |i, t| 10.0 + i as f64 + (t / 200.0).cos());
    let latent = latent_six();
    let cache = DesignCache::build(&ctx, &latent);
    let mut theta = ThetaState::initial(&ctx);
    theta.sigma2 = 1.0;
    theta.smooth_beta = [1e-14; 2];
    theta.smooth_alpha = [1e-14; 2];
    let mut rng = seeded_rng(2, 0);
    let p = ctx.hyper.degree;
    for _ in 0..50 {
        update_fixed_effects(&ctx, &cache, &mut theta, &mut rng).unwrap();
        assert!(
            theta.beta[1][p + 1..].iter().all(|c| c.abs() < 1e-5),
            "{:?}",
            theta.beta[1]
        );
        assert!(theta.alpha[0][p + 1..].iter().all(|c| c.abs() < 1e-5));
    }
}

#[test]
fn random_effects_limits() {
    let ctx = with_outcomes(&cohort_six(), |i, t| {
        8.0 + 0.3 * i as f64 + 1.5 * (t / 250.0).sin() + 0.01 * t
    });
    let latent = latent_six();
    let cache = DesignCache::build(&ctx, &latent);
    let mut theta = ThetaState::initial(&ctx);
    theta.sigma2 = 0.25;
    let mut rng = seeded_rng(4, 0);
    update_fixed_effects(&ctx, &cache, &mut theta, &mut rng).unwrap();

    // diffuse prior: conditional mean is the per-subject least-squares fit of the residual
    theta.sigma2_b = 1e12;
    theta.sigma2_b_poly = vec![1e12; 3];
    theta.sigma2_a = 1e12;
    theta.sigma2_a_poly = vec![1e12; 3];
    for i in [0usize, 4] {
        let s = ctx.cohort.subject(i);
        let v = latent.v(i);
        let t_of = |t: f64| if ctx.cohort.is_responder(i) { t - v } else { t };
        let (pop, _) = theta.subject_coefficients(i, s.group(), ctx.cohort.is_responder(i));
        let d = ctx.individual_basis(i).dimension();
        let x = DMatrix::from_fn(s.obs.len(), d, |r, c| {
            eval_basis(ctx.individual_basis(i), t_of(s.obs[r].t))[c]
        });
        let target = DVector::from_fn(s.obs.len(), |r, _| {
            let row = eval_basis(ctx.population_basis(i), t_of(s.obs[r].t));
            s.obs[r].y - row.iter().zip(pop).map(|(a, b)| a * b).sum::<f64>()
        });
        let ols = (x.transpose() * &x).lu().solve(&(x.transpose() * target)).unwrap();
        let mean = random_effects_conditional(&ctx, &cache, &theta, i).mean().unwrap();
        for k in 0..d {
            assert!(
                (mean[k] - ols[k]).abs() < 1e-3 * ols[k].abs().max(1.0),
                "subject {i}, k {k}: {} vs {}",
                mean[k],
                ols[k]
            );
        }
    }

    // no residual signal and a tight prior: draws sit at zero
    let flat = with_outcomes(&ctx, |i, t| {
        ctx.subject_mean(
            i,
            t,
            latent.v(i),
            &ThetaState {
                b: theta.b.iter().map(|b| vec![0.0; b.len()]).collect(),
                a: theta.a.iter().map(|a| vec![0.0; a.len()]).collect(),
                ..theta.clone()
            },
        )
    });
    let cache = DesignCache::build(&flat, &latent);
    theta.sigma2_b = 1e-8;
    theta.sigma2_b_poly = vec![1e-8; 3];
    for _ in 0..20 {
        update_random_effects(&flat, &cache, &mut theta, 1, &mut rng).unwrap();
        assert!(theta.b[1].iter().all(|c| c.abs() < 1e-3), "{:?}", theta.b[1]);
    }
}

fn residual_context(n_subjects: usize, n_obs: usize, noise_var: f64, seed: u64) -> (ModelContext, LatentState) {
    let mut rng = seeded_rng(seed, 0);
    let subjects = (0..n_subjects)
        .map(|k| {
            let obs: Vec<(f64, f64)> = (0..n_obs)
                .map(|j| (j as f64 * 10.0, noise_var.sqrt() * standard_normal(&mut rng)))
                .collect();
            subject(
                &format!("n{k}"),
                (k % 2) as u8,
                (0.0, 5.0),
                (n_obs as f64 * 10.0, INF),
                &obs,
            )
        })
        .collect();
    let ctx = context(subjects, hyper());
    let latent = LatentState {
        h: vec![2.0; n_subjects],
        w: vec![n_obs as f64 * 20.0; n_subjects],
    };
    (ctx, latent)
}

#[test]
fn sigma2_draws_concentrate_when_residuals_vanish() {
    let (ctx, latent) = residual_context(20, 100, 0.0, 1);
    let cache = DesignCache::build(&ctx, &latent);
    let mut theta = ThetaState::initial(&ctx);
    let m = ctx.cohort.n_observations() as f64;
    let mut rng = seeded_rng(6, 0);
    let n = 4000;
    let draws: Vec<f64> = (0..n)
        .map(|_| {
            update_variances(&ctx, &cache, &mut theta, &mut rng);
            theta.sigma2
        })
        .collect();
    let mean = common::mean(&draws);
    let want = 2e-3 / m;
    assert!((mean / want - 1.0).abs() < 0.05, "{mean} vs {want}");
}

#[test]
fn sigma2_posterior_mean_recovers_noise_level() {
    let (ctx, latent) = residual_context(20, 100, 4.0, 2);
    let cache = DesignCache::build(&ctx, &latent);
    let mut theta = ThetaState::initial(&ctx);
    let mut rng = seeded_rng(8, 0);
    let draws: Vec<f64> = (0..2000)
        .map(|_| {
            update_variances(&ctx, &cache, &mut theta, &mut rng);
            theta.sigma2
        })
        .collect();
    let mean = common::mean(&draws);
    assert!((3.6..=4.4).contains(&mean), "{mean}");
}

#[test]
fn cached_residuals_match_direct_recomputation_after_updates() {
    let ctx = with_outcomes(&cohort_six(), |i, t| 9.0 + 0.5 * i as f64 + (t / 150.0).sin());
    let latent = latent_six();
    let cache = DesignCache::build(&ctx, &latent);
    let mut theta = ThetaState::initial(&ctx);
    let mut rng = seeded_rng(10, 0);
    for _ in 0..25 {
        update_fixed_effects(&ctx, &cache, &mut theta, &mut rng).unwrap();
        for i in 0..ctx.cohort.len() {
            update_random_effects(&ctx, &cache, &mut theta, i, &mut rng).unwrap();
        }
        let stats = update_variances(&ctx, &cache, &mut theta, &mut rng);
        let direct: f64 = (0..ctx.cohort.len())
            .flat_map(|i| {
                let (ctx, theta, v) = (&ctx, &theta, latent.v(i));
                ctx.cohort
                    .subject(i)
                    .obs
                    .iter()
                    .map(move |o| (o.y - ctx.subject_mean(i, o.t, v, theta)).powi(2))
            })
            .sum();
        let cached = stats.residual.1;
        assert!((cached - direct).abs() <= 1e-8 * direct.abs(), "{cached} vs {direct}");
        assert_eq!(
            variance_statistics(&ctx, &cache, &theta).residual.0,
            ctx.cohort.n_observations()
        );
    }
}

proptest! {
    #[test]
    fn incremental_cache_equals_rebuild(moves in proptest::collection::vec((0usize..6, -60.0..60.0f64), 1..30)) {
        let ctx = cohort_six();
        let mut latent = latent_six();
        let mut cache = DesignCache::build(&ctx, &latent);
        let nonresponder_rows = cache.rows(4).clone();
        for (i, dw) in moves {
            let (lo, hi) = ctx.cohort.subject(i).w_bounds(latent.h[i]);
            latent.w[i] = (latent.w[i] + dw).clamp(lo + 1.0, hi.min(lo + 5000.0));
            cache.refresh(&ctx, i, latent.v(i));
        }
        prop_assert_eq!(&cache, &DesignCache::build(&ctx, &latent));
        prop_assert_eq!(cache.rows(4), &nonresponder_rows);
    }
}

#[test]
fn sparse_cells_flag_groups_with_at_most_degree_plus_one_times() {
    assert!(cohort_six().sparse_cells().is_empty());
    let ctx = context(
        vec![
            subject("r1", 1, (0.0, 90.0), (180.0, 270.0), &visits(10, 90.0)),
            subject(
                "n1",
                0,
                (0.0, 90.0),
                (810.0, INF),
                &[(0.0, 0.0), (60.0, 0.0), (120.0, 0.0)],
            ),
            subject("n2", 0, (0.0, 90.0), (810.0, INF), &[(60.0, 0.0), (120.0, 0.0)]),
        ],
        hyper(),
    );
    assert_eq!(ctx.cell_distinct_times(false, 0), 3);
    assert_eq!(ctx.sparse_cells(), vec![(false, 0, 3)]);
}
