mod common;

use common::subject;
use dicjm_core::kernels::{GaussLegendre, NormalParams};
use dicjm_core::pipeline::{
    generate_cohort, load_cohort, load_truth, widen_intervals, write_cohort, write_generated, CohortMeta,
    GeneratorConfig, OutcomeTransform, OBSERVATIONS_FILE, SIDECAR_FILE, SUBJECTS_FILE,
};
use dicjm_core::spline::BasisSpec;
use dicjm_core::types::{validate_cohort, Hyperparams};
use proptest::prelude::*;
use statrs::distribution::{Continuous, ContinuousCDF, Normal};

fn small(seed: u64, n: usize) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        n_per_group: [n, n],
        ..GeneratorConfig::default()
    }
}

#[test]
fn widening_sets_common_left_endpoint() {
    let subjects = vec![
        subject("a", 0, (100.0, 200.0), (300.0, 400.0), &[(0.0, 1.0)]),
        subject("b", 1, (250.0, 260.0), (300.0, f64::INFINITY), &[(0.0, 1.0)]),
    ];
    let wide = widen_intervals(&subjects, 30.0).unwrap();
    assert!(wide.iter().all(|s| s.l_h == 30.0));
    assert_eq!(wide[1].r_v, f64::INFINITY);
    assert_eq!(widen_intervals(&wide, 30.0).unwrap(), wide);
    let err = widen_intervals(&subjects, 300.0).unwrap_err();
    assert!(err.to_string().contains('a'), "{err}");
}

#[test]
fn generated_cohort_round_trips_bitwise() {
    let (subjects, meta, truth) = generate_cohort(&small(3, 25)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let paths = write_generated(dir.path(), &subjects, &meta, &truth).unwrap();
    assert_eq!(paths.len(), 4);
    let (back, meta_back) = load_cohort(dir.path()).unwrap();
    assert_eq!(meta_back, meta);
    assert_eq!(back.len(), subjects.len());
    for (a, b) in subjects.iter().zip(&back) {
        assert_eq!(a.id, b.id);
        assert_eq!(a.z, b.z);
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.x_star), bits(&b.x_star));
        assert_eq!(bits(&[a.l_h, a.r_h, a.l_v, a.r_v]), bits(&[b.l_h, b.r_h, b.l_v, b.r_v]));
        let obs = |s: &dicjm_core::types::Subject| {
            s.obs
                .iter()
                .flat_map(|o| [o.t.to_bits(), o.y.to_bits()])
                .collect::<Vec<_>>()
        };
        assert_eq!(obs(a), obs(b));
    }
    assert_eq!(load_truth(dir.path()).unwrap(), truth);
    // writing what was read reproduces the files byte for byte
    let again = tempfile::tempdir().unwrap();
    write_cohort(again.path(), &back, &meta_back).unwrap();
    for f in [SUBJECTS_FILE, OBSERVATIONS_FILE, SIDECAR_FILE] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn noiseless_outcomes_lie_on_true_curves() {
    let config = GeneratorConfig {
        sigma2: 0.0,
        dropout: 0.0,
        visit_jitter: 0.0,
        responder_random_sd: vec![0.0; 4],
        nonresponder_random_sd: vec![0.0; 4],
        ..small(5, 30)
    };
    let (subjects, _, truth) = generate_cohort(&config).unwrap();
    let scheduled = (0..=config.n_visits)
        .filter(|&k| k as f64 * config.visit_interval <= config.max_followup)
        .count();
    for (i, s) in subjects.iter().enumerate() {
        assert_eq!(s.obs.len(), scheduled, "no dropout");
        let offset: f64 = s.x_star.iter().zip(&config.beta_star).map(|(a, b)| a * b).sum();
        for o in &s.obs {
            let g = usize::from(s.z);
            let curve = if s.r_v.is_finite() {
                config.responder_curves[g].eval(o.t - truth.v(i))
            } else {
                config.nonresponder_curves[g].eval(o.t)
            };
            assert!((o.y - (curve + offset).max(0.0)).abs() < 1e-12, "{} at {}", s.id, o.t);
        }
    }
}

#[test]
fn intervals_bracket_truth_between_consecutive_visits() {
    let (subjects, _, truth) = generate_cohort(&small(7, 200)).unwrap();
    for (i, s) in subjects.iter().enumerate() {
        let (h, v) = (truth.h[i], truth.v(i));
        assert!(s.l_h < h && h <= s.r_h, "{}", s.id);
        assert!(s.l_v < v && v <= s.r_v, "{}", s.id);
        let times: Vec<f64> = s.obs.iter().map(|o| o.t).collect();
        for (lo, hi) in [(s.l_h, s.r_h), (s.l_v, s.r_v)] {
            assert!(times.contains(&lo));
            assert!(hi.is_infinite() || times.contains(&hi));
            assert!(
                !times.iter().any(|&t| t > lo && t < hi),
                "{}: visit inside ({lo}, {hi})",
                s.id
            );
        }
        if s.r_v.is_infinite() {
            assert_eq!(s.l_v, *times.last().unwrap());
        }
    }
}

/// P(H + W > L | 0 < H ≤ L) for H, W normal truncated to (0, ∞).
fn censored_fraction(h: NormalParams, w: NormalParams, last: f64) -> f64 {
    let nh = Normal::new(h.mean, h.sd()).unwrap();
    let nw = Normal::new(w.mean, w.sd()).unwrap();
    let rule = GaussLegendre::new(20);
    let panels = 200;
    let step = last / panels as f64;
    let mut num = 0.0;
    for k in 0..panels {
        let (a, b) = (k as f64 * step, (k + 1) as f64 * step);
        num += rule.integrate(|x| nh.pdf(x) * nw.sf(last - x), a, b).unwrap();
    }
    num / ((nh.cdf(last) - nh.cdf(0.0)) * nw.sf(0.0))
}

#[test]
fn right_censored_fraction_matches_normal_tail() {
    let config = GeneratorConfig {
        n_per_group: [5000, 5000],
        n_visits: 4,
        visit_interval: 120.0,
        visit_jitter: 0.0,
        dropout: 0.0,
        h_base: [NormalParams::new(200.0, 120.0f64.powi(2)); 2],
        w_base: [
            NormalParams::new(150.0, 60.0f64.powi(2)),
            NormalParams::new(250.0, 80.0f64.powi(2)),
        ],
        ..small(9, 0)
    };
    let (subjects, _, _) = generate_cohort(&config).unwrap();
    let last = 480.0;
    for z in 0..2u8 {
        let group: Vec<_> = subjects.iter().filter(|s| s.z == z).collect();
        let observed = group.iter().filter(|s| s.r_v.is_infinite()).count() as f64 / group.len() as f64;
        let p = censored_fraction(config.h_base[usize::from(z)], config.w_base[usize::from(z)], last);
        let se = (p * (1.0 - p) / group.len() as f64).sqrt();
        assert!((observed - p).abs() < 4.0 * se, "group {z}: {observed} vs {p}");
    }
}

#[test]
fn loader_reports_row_numbers_and_dangling_ids() {
    let dir = tempfile::tempdir().unwrap();
    let (subjects, meta, _) = generate_cohort(&small(1, 2)).unwrap();
    write_cohort(dir.path(), &subjects, &meta).unwrap();
    let obs_path = dir.path().join(OBSERVATIONS_FILE);
    let mut text = std::fs::read_to_string(&obs_path).unwrap();
    text.push_str("S9999,10,3.0\n");
    std::fs::write(&obs_path, &text).unwrap();
    let err = load_cohort(dir.path()).unwrap_err().to_string();
    assert!(err.contains("S9999"), "{err}");
    let rows = text.lines().count();
    assert!(err.contains(&rows.to_string()), "{err}");
}

#[test]
fn calendar_dates_and_inf_sentinel() {
    let dir = tempfile::tempdir().unwrap();
    let meta = CohortMeta {
        covariates: vec![],
        outcome_transform: OutcomeTransform::Identity,
        max_followup: 1000.0,
        origin: chrono::NaiveDate::from_ymd_opt(2001, 3, 1),
    };
    std::fs::write(dir.path().join(SIDECAR_FILE), serde_json::to_string(&meta).unwrap()).unwrap();
    std::fs::write(
        dir.path().join(SUBJECTS_FILE),
        "id,z,l_h,r_h,l_v,r_v\nA,1,2001-03-01,2001-04-10,2001-06-09,Inf\n",
    )
    .unwrap();
    std::fs::write(
        dir.path().join(OBSERVATIONS_FILE),
        "id,t,y_raw\nA,2001-03-01,4.0\nA,2001-06-09,2.5\n",
    )
    .unwrap();
    let (subjects, _) = load_cohort(dir.path()).unwrap();
    let s = &subjects[0];
    assert_eq!((s.l_h, s.r_h, s.l_v, s.r_v), (0.0, 40.0, 100.0, f64::INFINITY));
    assert_eq!(s.obs.iter().map(|o| o.t).collect::<Vec<_>>(), vec![0.0, 100.0]);
}

#[test]
fn true_curve_rejects_mismatched_dimension() {
    let basis = BasisSpec::new(2, vec![0.0]).unwrap();
    assert!(dicjm_core::pipeline::TrueCurve::new(basis, vec![1.0, 2.0]).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn generated_cohorts_validate_and_contain_truth(seed in any::<u64>(), n in 1usize..30, jitter in 0.0..40.0f64, dropout in 0.0..0.3f64) {
        let config = GeneratorConfig { visit_jitter: jitter, dropout, ..small(seed, n) };
        let (subjects, _, truth) = generate_cohort(&config).unwrap();
        let cohort = validate_cohort(subjects.clone(), &Hyperparams::default()).unwrap();
        prop_assert_eq!(cohort.len(), 2 * n);
        for (i, s) in subjects.iter().enumerate() {
            prop_assert!(s.l_h < truth.h[i] && truth.h[i] <= s.r_h);
            prop_assert!(s.l_v < truth.v(i) && truth.v(i) <= s.r_v);
            prop_assert!(truth.w[i] > 0.0 && truth.h[i] > 0.0);
            prop_assert!(s.obs.iter().all(|o| o.y >= 0.0));
        }
        prop_assert_eq!(generate_cohort(&config).unwrap().0, subjects);
    }
}
