//! Domain data model: subjects, the latent event-time state, base-measure
//! parameters and model hyperparameters.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::NormalParams;

/// Serializes `f64::INFINITY` as the string `"inf"`; JSON has no infinity.
pub(crate) mod inf_serde {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, s: S) -> Result<S::Ok, S::Error> {
        if value.is_infinite() && *value > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_f64(*value)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Num(x) => Ok(x),
            Repr::Text(s) if s.eq_ignore_ascii_case("inf") => Ok(f64::INFINITY),
            Repr::Text(s) => Err(serde::de::Error::custom(format!("expected number or \"inf\", got {s}"))),
        }
    }
}

/// One longitudinal measurement: time in days since enrollment and the
/// outcome on the analysis (transformed) scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub t: f64,
    pub y: f64,
}

/// A cohort member with group label, adjustment covariates, the censoring
/// intervals of the origin event H and the terminating event V, and the
/// observed outcome trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub id: String,
    /// Binary group label (0 or 1).
    pub z: u8,
    pub x_star: Vec<f64>,
    pub l_h: f64,
    pub r_h: f64,
    pub l_v: f64,
    /// `f64::INFINITY` when V is right-censored.
    #[serde(with = "inf_serde")]
    pub r_v: f64,
    pub obs: Vec<Observation>,
}

impl Subject {
    pub fn group(&self) -> usize {
        usize::from(self.z)
    }

    pub fn is_right_censored(&self) -> bool {
        self.r_v.is_infinite()
    }

    /// Open/closed bounds (lo, hi] for W given an origin time `h`.
    pub fn w_bounds(&self, h: f64) -> (f64, f64) {
        ((self.l_v - h).max(0.0), self.r_v - h)
    }
}

/// A validated cohort. Responder status is fixed by the data: a subject is a
/// responder exactly when its V interval is bounded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    subjects: Vec<Subject>,
    responder: Vec<bool>,
    n_covariates: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    warnings: Vec<String>,
}

impl Cohort {
    pub fn subjects(&self) -> &[Subject] {
        &self.subjects
    }

    pub fn subject(&self, i: usize) -> &Subject {
        &self.subjects[i]
    }

    pub fn len(&self) -> usize {
        self.subjects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.subjects.is_empty()
    }

    pub fn is_responder(&self, i: usize) -> bool {
        self.responder[i]
    }

    pub fn responder_flags(&self) -> &[bool] {
        &self.responder
    }

    pub fn n_covariates(&self) -> usize {
        self.n_covariates
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn n_observations(&self) -> usize {
        self.subjects.iter().map(|s| s.obs.len()).sum()
    }

    /// Cohort means of the adjustment covariates.
    pub fn covariate_means(&self) -> Vec<f64> {
        let mut means = vec![0.0; self.n_covariates];
        for s in &self.subjects {
            for (m, x) in means.iter_mut().zip(&s.x_star) {
                *m += x;
            }
        }
        let n = self.len() as f64;
        means.iter_mut().for_each(|m| *m /= n);
        means
    }

    pub fn into_subjects(self) -> Vec<Subject> {
        self.subjects
    }
}

/// Model hyperparameters other than the Dirichlet-process precisions, which
/// live in the chain configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    /// Shape of the Gamma prior on every precision (inverse variance).
    pub gamma_shape: f64,
    /// Rate of the Gamma prior on every precision.
    pub gamma_rate: f64,
    /// Maximum follow-up time T in days.
    pub max_followup: f64,
    /// Spline degree p.
    pub degree: usize,
    /// Quantile knots of the responder population basis; a knot at zero is added.
    pub responder_quantile_knots: usize,
    /// Quantile knots of the nonresponder population basis.
    pub nonresponder_quantile_knots: usize,
    /// Days per spline time unit.
    pub time_scale: f64,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Self {
            gamma_shape: 1e-3,
            gamma_rate: 1e-3,
            max_followup: 2190.0,
            degree: 2,
            responder_quantile_knots: 19,
            nonresponder_quantile_knots: 20,
            time_scale: 365.25,
        }
    }
}

impl Hyperparams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.gamma_shape > 0.0 && self.gamma_rate > 0.0) {
            return bad("gamma prior shape and rate must be positive");
        }
        if !(self.max_followup > 0.0) {
            return bad("maximum follow-up time must be positive");
        }
        if self.degree < 1 {
            return bad("spline degree must be >= 1");
        }
        if self.responder_quantile_knots == 0 || self.nonresponder_quantile_knots == 0 {
            return bad("quantile knot counts must be >= 1");
        }
        if !(self.time_scale > 0.0 && self.time_scale.is_finite()) {
            return bad("time scale must be positive");
        }
        Ok(())
    }
}

/// Normal base measures of the Dirichlet processes for H and W, one per group.
/// Index 0/1 is the group label.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseMeasureParams {
    pub h: [NormalParams; 2],
    pub w: [NormalParams; 2],
}

impl BaseMeasureParams {
    pub fn flat(&self) -> [f64; 8] {
        [
            self.h[1].mean,
            self.h[0].mean,
            self.h[1].var,
            self.h[0].var,
            self.w[1].mean,
            self.w[0].mean,
            self.w[1].var,
            self.w[0].var,
        ]
    }

    pub fn from_flat(v: &[f64]) -> Self {
        Self {
            h: [NormalParams::new(v[1], v[3]), NormalParams::new(v[0], v[2])],
            w: [NormalParams::new(v[5], v[7]), NormalParams::new(v[4], v[6])],
        }
    }

    pub const NAMES: [&'static str; 8] = [
        "mu_h[1]", "mu_h[0]", "tau_h[1]", "tau_h[0]", "mu_w[1]", "mu_w[0]", "tau_w[1]", "tau_w[0]",
    ];
}

/// Current imputation of (h_i, w_i) for every subject; v_i = h_i + w_i.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentState {
    pub h: Vec<f64>,
    pub w: Vec<f64>,
}

impl LatentState {
    pub fn v(&self, i: usize) -> f64 {
        self.h[i] + self.w[i]
    }

    pub fn len(&self) -> usize {
        self.h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.h.is_empty()
    }

    /// Checks l_h < h <= r_h and max(0, l_v - h) < w <= r_v - h for every subject.
    pub fn check_support(&self, cohort: &Cohort) -> Result<()> {
        for (i, s) in cohort.subjects().iter().enumerate() {
            if let Some(message) = support_violation(s, self.h[i], self.w[i]) {
                return Err(Error::SupportViolation { subject: i, message });
            }
        }
        Ok(())
    }

    /// Number of subjects violating their truncation intervals.
    pub fn count_violations(&self, cohort: &Cohort) -> usize {
        cohort
            .subjects()
            .iter()
            .enumerate()
            .filter(|(i, s)| support_violation(s, self.h[*i], self.w[*i]).is_some())
            .count()
    }
}

fn support_violation(s: &Subject, h: f64, w: f64) -> Option<String> {
    if !(h > s.l_h && h <= s.r_h) {
        return Some(format!("h = {h} outside ({}, {}]", s.l_h, s.r_h));
    }
    let (lo, hi) = s.w_bounds(h);
    if !(w > lo && w <= hi) {
        return Some(format!("w = {w} outside ({lo}, {hi}] given h = {h}"));
    }
    None
}

/// Validates subjects against the data-model invariants and fixes responder
/// status. All violations are collected into one error.
pub fn validate_cohort(subjects: Vec<Subject>, hp: &Hyperparams) -> Result<Cohort> {
    if subjects.is_empty() {
        return Err(Error::EmptyCohort);
    }
    let n_covariates = subjects[0].x_star.len();
    let mut problems = Vec::new();
    let mut warnings = Vec::new();
    for s in &subjects {
        let mut fail = |message: String| {
            problems.push(Error::InvalidSubject {
                id: s.id.clone(),
                message,
            })
        };
        if s.z > 1 {
            fail(format!("z must be 0 or 1, got {}", s.z));
        }
        if s.x_star.len() != n_covariates {
            fail(format!("expected {n_covariates} covariates, got {}", s.x_star.len()));
        }
        if s.x_star.iter().any(|x| !x.is_finite()) {
            fail("covariates must be finite".into());
        }
        if !(s.l_h.is_finite() && s.r_h.is_finite() && s.l_v.is_finite()) {
            fail("l_h, r_h and l_v must be finite".into());
        } else {
            if !(s.l_h < s.r_h) {
                fail(format!("l_h < r_h violated (l_h = {}, r_h = {})", s.l_h, s.r_h));
            }
            if !(s.l_v < s.r_v) {
                fail(format!("l_v < r_v violated (l_v = {}, r_v = {})", s.l_v, s.r_v));
            }
            if s.l_h < 0.0 || s.l_v < 0.0 {
                fail("interval endpoints must be >= 0".into());
            }
            if !(s.r_v > s.l_h) {
                fail(format!(
                    "r_v must exceed l_h for V > H to be feasible (l_h = {}, r_v = {})",
                    s.l_h, s.r_v
                ));
            }
        }
        if s.r_v.is_nan() || s.r_v == f64::NEG_INFINITY {
            fail("r_v must be a number or +inf".into());
        }
        if s.obs.is_empty() {
            fail("no outcome observations".into());
        }
        if s.obs.iter().any(|o| !o.t.is_finite() || !o.y.is_finite()) {
            fail("observation times and outcomes must be finite".into());
        }
        if s.obs.iter().any(|o| o.t < 0.0) {
            fail("observation times must be >= 0".into());
        }
        if s.obs.windows(2).any(|w| w[0].t >= w[1].t) {
            fail("observation times must be strictly increasing".into());
        }
        if s.r_v.is_finite() && s.r_v > hp.max_followup {
            warnings.push(format!(
                "subject {}: bounded V interval ends after the maximum follow-up time",
                s.id
            ));
        }
    }
    if !problems.is_empty() {
        if problems.len() == 1 {
            return Err(problems.pop().expect("one problem"));
        }
        let joined = problems.iter().map(ToString::to_string).collect::<Vec<_>>().join("; ");
        return Err(Error::InvalidConfig(format!("cohort validation failed: {joined}")));
    }
    for z in 0..2u8 {
        if !subjects.iter().any(|s| s.z == z) {
            warnings.push(format!(
                "group z = {z} has no subjects; its base measures stay at their initial values"
            ));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    let responder = subjects.iter().map(|s| s.r_v.is_finite()).collect();
    Ok(Cohort {
        subjects,
        responder,
        n_covariates,
        warnings,
    })
}

/// Uniform draw on (lo, hi].
fn uniform_left_open<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    let u: f64 = rng.random();
    hi - (hi - lo) * u
}

/// Median gap between consecutive observation times across the cohort.
pub fn median_visit_gap(cohort: &Cohort) -> f64 {
    let mut gaps: Vec<f64> = cohort
        .subjects()
        .iter()
        .flat_map(|s| s.obs.windows(2).map(|w| w[1].t - w[0].t))
        .collect();
    if gaps.is_empty() {
        return 180.0;
    }
    gaps.sort_by(f64::total_cmp);
    let n = gaps.len();
    if n % 2 == 1 {
        gaps[n / 2]
    } else {
        0.5 * (gaps[n / 2 - 1] + gaps[n / 2])
    }
}

/// Draws an initial latent state: h uniform on (l_h, r_h] and v uniform on
/// (l_v, min(r_v, l_v + 2·median gap)], retried until v > h; a constructive
/// draw is used when retries run out.
pub fn init_latent<R: Rng + ?Sized>(cohort: &Cohort, rng: &mut R) -> Result<LatentState> {
    const RETRIES: usize = 100;
    let gap = median_visit_gap(cohort);
    let mut h = Vec::with_capacity(cohort.len());
    let mut w = Vec::with_capacity(cohort.len());
    for s in cohort.subjects() {
        let v_hi = s.r_v.min(s.l_v + 2.0 * gap);
        let mut found = None;
        for _ in 0..RETRIES {
            let hi = uniform_left_open(s.l_h, s.r_h, rng);
            let vi = uniform_left_open(s.l_v, v_hi, rng);
            let wi = vi - hi;
            if support_violation(s, hi, wi).is_none() {
                found = Some((hi, wi));
                break;
            }
        }
        if found.is_none() {
            let h_hi = s.r_h.min(s.r_v);
            if !(h_hi > s.l_h) {
                return Err(Error::InfeasibleIntervals { id: s.id.clone() });
            }
            for _ in 0..RETRIES {
                let hi = uniform_left_open(s.l_h, h_hi, rng);
                let (w_lo, w_hi) = s.w_bounds(hi);
                let w_hi = w_hi.min(w_lo + 2.0 * gap);
                if !(w_hi > w_lo) {
                    continue;
                }
                let wi = uniform_left_open(w_lo, w_hi, rng);
                if support_violation(s, hi, wi).is_none() {
                    found = Some((hi, wi));
                    break;
                }
            }
        }
        let (hi, wi) = found.ok_or_else(|| Error::InfeasibleIntervals { id: s.id.clone() })?;
        h.push(hi);
        w.push(wi);
    }
    Ok(LatentState { h, w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::seeded_rng;

    pub(crate) fn subject(id: &str, l_h: f64, r_h: f64, l_v: f64, r_v: f64) -> Subject {
        Subject {
            id: id.into(),
            z: 1,
            x_star: vec![],
            l_h,
            r_h,
            l_v,
            r_v,
            obs: vec![Observation { t: 0.0, y: 1.0 }, Observation { t: 180.0, y: 2.0 }],
        }
    }

    #[test]
    fn reversed_h_interval_is_rejected() {
        let err = validate_cohort(vec![subject("a", 100.0, 90.0, 200.0, 300.0)], &Hyperparams::default()).unwrap_err();
        assert!(err.to_string().contains("l_h < r_h violated"), "{err}");
    }

    #[test]
    fn right_censored_is_nonresponder() {
        let c = validate_cohort(
            vec![
                subject("a", 0.0, 10.0, 100.0, f64::INFINITY),
                subject("b", 0.0, 10.0, 5.0, 20.0),
            ],
            &Hyperparams::default(),
        )
        .unwrap();
        assert_eq!(c.len(), 2);
        assert!(!c.is_responder(0));
        assert!(c.is_responder(1));
    }

    #[test]
    fn rejects_structural_problems() {
        let hp = Hyperparams::default();
        assert!(matches!(validate_cohort(vec![], &hp), Err(Error::EmptyCohort)));
        let mut s = subject("a", 0.0, 10.0, 5.0, 20.0);
        s.obs.clear();
        assert!(validate_cohort(vec![s], &hp).is_err());
        let mut s = subject("a", 0.0, 10.0, 5.0, 20.0);
        s.obs.swap(0, 1);
        assert!(validate_cohort(vec![s], &hp)
            .unwrap_err()
            .to_string()
            .contains("increasing"));
    }

    #[test]
    fn missing_group_is_only_a_warning() {
        let c = validate_cohort(vec![subject("a", 0.0, 10.0, 5.0, 20.0)], &Hyperparams::default()).unwrap();
        assert_eq!(c.warnings().len(), 1);
    }

    #[test]
    fn validation_is_idempotent() {
        let hp = Hyperparams::default();
        let c = validate_cohort(
            vec![
                subject("a", 0.0, 10.0, 5.0, 20.0),
                subject("b", 3.0, 9.0, 50.0, f64::INFINITY),
            ],
            &hp,
        )
        .unwrap();
        let again = validate_cohort(c.subjects().to_vec(), &hp).unwrap();
        assert_eq!(c, again);
    }

    #[test]
    fn init_respects_intervals_and_seed() {
        let hp = Hyperparams::default();
        let c = validate_cohort(
            vec![
                subject("a", 0.0, 10.0, 5.0, 20.0),
                subject("b", 0.0, 10.0, 100.0, f64::INFINITY),
            ],
            &hp,
        )
        .unwrap();
        let s1 = init_latent(&c, &mut seeded_rng(3, 0)).unwrap();
        let s2 = init_latent(&c, &mut seeded_rng(3, 0)).unwrap();
        assert_eq!(s1, s2);
        s1.check_support(&c).unwrap();
        assert!(s1.h[0] > 0.0 && s1.h[0] <= 10.0);
        let v0 = s1.v(0);
        assert!(v0 > 5.0 && v0 <= 20.0 && s1.w[0] > 0.0);
        let v1 = s1.v(1);
        assert!(v1 > 100.0 && v1.is_finite());
    }

    #[test]
    fn init_handles_overlapping_intervals() {
        // V interval starts before H interval ends: only v > h pairs are valid
        let hp = Hyperparams::default();
        let c = validate_cohort(vec![subject("a", 0.0, 500.0, 10.0, 501.0)], &hp).unwrap();
        for seed in 0..50 {
            init_latent(&c, &mut seeded_rng(seed, 0))
                .unwrap()
                .check_support(&c)
                .unwrap();
        }
    }

    #[test]
    fn base_measure_flat_roundtrip() {
        let b = BaseMeasureParams {
            h: [NormalParams::new(1.0, 2.0), NormalParams::new(3.0, 4.0)],
            w: [NormalParams::new(5.0, 6.0), NormalParams::new(7.0, 8.0)],
        };
        assert_eq!(BaseMeasureParams::from_flat(&b.flat()), b);
    }
}
