//! Cohort files, the wide-interval transform and the synthetic cohort
//! generator.
//!
//! A cohort directory holds `subjects.csv` (id, z, covariates, l_h, r_h,
//! l_v, r_v), `observations.csv` (id, t, y_raw) and the sidecar
//! `cohort.json`. Times are days since enrollment or ISO-8601 dates when the
//! sidecar names an origin date. `r_v` is `inf` for right-censored
//! suppression.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::{seeded_rng, standard_normal, NormalParams};
use crate::spline::BasisSpec;
use crate::types::{Observation, Subject};

pub const SUBJECTS_FILE: &str = "subjects.csv";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const SIDECAR_FILE: &str = "cohort.json";
pub const TRUTH_FILE: &str = "truth.json";

/// Transform from the stored outcome to the analysis scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OutcomeTransform {
    #[default]
    Sqrt,
    Identity,
}

impl OutcomeTransform {
    pub fn forward(self, raw: f64) -> f64 {
        match self {
            Self::Sqrt => raw.sqrt(),
            Self::Identity => raw,
        }
    }

    /// Inverse of [`Self::forward`]; `forward(inverse(y)) == y` bitwise for y >= 0.
    pub fn inverse(self, y: f64) -> f64 {
        match self {
            Self::Sqrt => y * y,
            Self::Identity => y,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortMeta {
    pub covariates: Vec<String>,
    #[serde(default)]
    pub outcome_transform: OutcomeTransform,
    /// Maximum follow-up time T in days.
    pub max_followup: f64,
    /// Origin for date-valued time columns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<NaiveDate>,
}

fn parse_error(path: &Path, row: u64, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        row,
        message: message.into(),
    }
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Parses a time in days, or an ISO date converted to days since `origin`.
fn parse_time(field: &str, origin: Option<NaiveDate>) -> std::result::Result<f64, String> {
    let field = field.trim();
    if let Ok(x) = field.parse::<f64>() {
        return Ok(x);
    }
    let date = NaiveDate::parse_from_str(field, "%Y-%m-%d").map_err(|_| format!("cannot parse time `{field}`"))?;
    let origin = origin.ok_or_else(|| format!("date `{field}` given but the sidecar has no origin"))?;
    Ok((date - origin).num_days() as f64)
}

fn parse_upper(field: &str, origin: Option<NaiveDate>) -> std::result::Result<f64, String> {
    if field.trim().eq_ignore_ascii_case("inf") {
        Ok(f64::INFINITY)
    } else {
        parse_time(field, origin)
    }
}

fn format_upper(x: f64) -> String {
    if x == f64::INFINITY {
        "inf".to_string()
    } else {
        x.to_string()
    }
}

/// Reads a cohort directory. Outcomes are moved to the analysis scale;
/// subjects are returned in file order, unvalidated.
pub fn load_cohort(dir: &Path) -> Result<(Vec<Subject>, CohortMeta)> {
    let sidecar = dir.join(SIDECAR_FILE);
    let meta: CohortMeta = serde_json::from_str(&read_text(&sidecar)?)
        .map_err(|e| parse_error(&sidecar, e.line() as u64, e.to_string()))?;
    let subjects_path = dir.join(SUBJECTS_FILE);
    let mut subjects = read_subjects(&subjects_path, &meta)?;
    let obs_path = dir.join(OBSERVATIONS_FILE);
    read_observations(&obs_path, &meta, &mut subjects)?;
    Ok((subjects, meta))
}

fn read_subjects(path: &Path, meta: &CohortMeta) -> Result<Vec<Subject>> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_open_error(path, e))?;
    let k = meta.covariates.len();
    let mut expected = vec!["id".to_string(), "z".to_string()];
    expected.extend(meta.covariates.iter().cloned());
    expected.extend(["l_h", "r_h", "l_v", "r_v"].map(String::from));
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != expected {
        return Err(parse_error(
            path,
            1,
            format!("expected header {}, found {}", expected.join(","), header.join(",")),
        ));
    }
    let mut out = Vec::new();
    let mut seen = HashMap::new();
    for record in rdr.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        let field = |j: usize| record.get(j).unwrap_or("");
        let num = |j: usize, name: &str| {
            parse_time(field(j), meta.origin).map_err(|m| parse_error(path, row, format!("{name}: {m}")))
        };
        let id = field(0).to_string();
        if id.is_empty() {
            return Err(parse_error(path, row, "empty id"));
        }
        if seen.insert(id.clone(), row).is_some() {
            return Err(parse_error(path, row, format!("duplicate id `{id}`")));
        }
        let z: u8 = field(1)
            .parse()
            .map_err(|_| parse_error(path, row, format!("z: cannot parse `{}`", field(1))))?;
        let x_star = (0..k)
            .map(|c| {
                field(2 + c).parse::<f64>().map_err(|_| {
                    parse_error(
                        path,
                        row,
                        format!("{}: cannot parse `{}`", meta.covariates[c], field(2 + c)),
                    )
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let r_v = parse_upper(field(k + 5), meta.origin).map_err(|m| parse_error(path, row, format!("r_v: {m}")))?;
        out.push(Subject {
            id,
            z,
            x_star,
            l_h: num(k + 2, "l_h")?,
            r_h: num(k + 3, "r_h")?,
            l_v: num(k + 4, "l_v")?,
            r_v,
            obs: Vec::new(),
        });
    }
    Ok(out)
}

fn read_observations(path: &Path, meta: &CohortMeta, subjects: &mut [Subject]) -> Result<()> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_open_error(path, e))?;
    let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
    if header != ["id", "t", "y_raw"] {
        return Err(parse_error(
            path,
            1,
            format!("expected header id,t,y_raw, found {}", header.join(",")),
        ));
    }
    let index: HashMap<String, usize> = subjects.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect();
    for record in rdr.records() {
        let record = record?;
        let row = record.position().map_or(0, |p| p.line());
        let id = record.get(0).unwrap_or("");
        let &i = index
            .get(id)
            .ok_or_else(|| parse_error(path, row, format!("observation for unknown subject `{id}`")))?;
        let t = parse_time(record.get(1).unwrap_or(""), meta.origin)
            .map_err(|m| parse_error(path, row, format!("t: {m}")))?;
        let raw: f64 = record
            .get(2)
            .unwrap_or("")
            .parse()
            .map_err(|_| parse_error(path, row, "y_raw: not a number"))?;
        if meta.outcome_transform == OutcomeTransform::Sqrt && raw < 0.0 {
            return Err(parse_error(
                path,
                row,
                format!("y_raw = {raw} is negative under the sqrt transform"),
            ));
        }
        subjects[i].obs.push(Observation {
            t,
            y: meta.outcome_transform.forward(raw),
        });
    }
    Ok(())
}

fn csv_open_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::io(path, source),
        other => Error::Parse {
            path: path.to_path_buf(),
            row: 0,
            message: format!("{other:?}"),
        },
    }
}

/// Writes the three cohort files; outcomes are stored on the raw scale.
pub fn write_cohort(dir: &Path, subjects: &[Subject], meta: &CohortMeta) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut wtr = csv::Writer::from_path(dir.join(SUBJECTS_FILE))?;
    let mut header = vec!["id".to_string(), "z".to_string()];
    header.extend(meta.covariates.iter().cloned());
    header.extend(["l_h", "r_h", "l_v", "r_v"].map(String::from));
    wtr.write_record(&header)?;
    for s in subjects {
        let mut rec = vec![s.id.clone(), s.z.to_string()];
        rec.extend(s.x_star.iter().map(f64::to_string));
        rec.extend([
            s.l_h.to_string(),
            s.r_h.to_string(),
            s.l_v.to_string(),
            format_upper(s.r_v),
        ]);
        wtr.write_record(&rec)?;
    }
    wtr.flush().map_err(|e| Error::io(dir.join(SUBJECTS_FILE), e))?;

    let mut wtr = csv::Writer::from_path(dir.join(OBSERVATIONS_FILE))?;
    wtr.write_record(["id", "t", "y_raw"])?;
    for s in subjects {
        for o in &s.obs {
            wtr.write_record([
                s.id.clone(),
                o.t.to_string(),
                meta.outcome_transform.inverse(o.y).to_string(),
            ])?;
        }
    }
    wtr.flush().map_err(|e| Error::io(dir.join(OBSERVATIONS_FILE), e))?;
    write_json(&dir.join(SIDECAR_FILE), meta)
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = read_text(path)?;
    serde_json::from_str(&text).map_err(|e| parse_error(path, e.line() as u64, e.to_string()))
}

/// Replaces every H left endpoint by `global_left`; V intervals are untouched.
pub fn widen_intervals(subjects: &[Subject], global_left: f64) -> Result<Vec<Subject>> {
    if let Some(s) = subjects.iter().find(|s| global_left >= s.r_h) {
        return Err(Error::InvalidSubject {
            id: s.id.clone(),
            message: format!("global left endpoint {global_left} is not below r_h = {}", s.r_h),
        });
    }
    Ok(subjects
        .iter()
        .map(|s| Subject {
            l_h: global_left,
            ..s.clone()
        })
        .collect())
}

/// A known spline curve: coefficients on a truncated-polynomial basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrueCurve {
    pub basis: BasisSpec,
    pub coef: Vec<f64>,
}

impl TrueCurve {
    pub fn new(basis: BasisSpec, coef: Vec<f64>) -> Result<Self> {
        if coef.len() != basis.dimension() {
            return Err(Error::InvalidConfig(format!(
                "curve has {} coefficients for a basis of dimension {}",
                coef.len(),
                basis.dimension()
            )));
        }
        Ok(Self { basis, coef })
    }

    pub fn eval(&self, t: f64) -> f64 {
        let mut row = vec![0.0; self.basis.dimension()];
        self.basis.eval_into(t, &mut row);
        row.iter().zip(&self.coef).map(|(a, b)| a * b).sum()
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let mut row = vec![0.0; self.basis.dimension()];
        self.basis.derivative_into(t, &mut row);
        row.iter().zip(&self.coef).map(|(a, b)| a * b).sum()
    }
}

/// Settings of the synthetic cohort generator. Per-group arrays are indexed
/// by the group label z.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub n_per_group: [usize; 2],
    /// Scheduled follow-up visits after the enrollment visit at day 0.
    pub n_visits: usize,
    pub visit_interval: f64,
    /// Visit k happens at k·interval + U(−jitter, jitter).
    pub visit_jitter: f64,
    /// Probability of dropping out after each follow-up visit.
    pub dropout: f64,
    pub max_followup: f64,
    /// Base laws of H and W, truncated to (0, ∞) by rejection.
    pub h_base: [NormalParams; 2],
    pub w_base: [NormalParams; 2],
    /// Responder mean curves on the realigned clock t − v.
    pub responder_curves: [TrueCurve; 2],
    /// Nonresponder mean curves on calendar time.
    pub nonresponder_curves: [TrueCurve; 2],
    /// Mean and sd of the continuous covariate; the second is Bernoulli.
    pub covariate_mean: f64,
    pub covariate_sd: f64,
    pub binary_covariate_rate: f64,
    pub beta_star: Vec<f64>,
    /// Random-coefficient sds on (1, u, u², (u)₊²) with the knot at 0 for
    /// responders and at half the follow-up for nonresponders.
    pub responder_random_sd: Vec<f64>,
    pub nonresponder_random_sd: Vec<f64>,
    pub sigma2: f64,
    pub time_scale: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        let scale = 365.25;
        let responder = |level: f64| {
            TrueCurve::new(
                BasisSpec::with_scale(2, vec![0.0, 180.0], scale).expect("valid knots"),
                vec![level, -0.3, 0.0, 6.0, -6.0],
            )
            .expect("matching dimension")
        };
        let nonresponder = |level: f64| {
            TrueCurve::new(
                BasisSpec::with_scale(2, vec![], scale).expect("valid basis"),
                vec![level, -0.4, 0.02],
            )
            .expect("matching dimension")
        };
        Self {
            seed: 1,
            n_per_group: [50, 50],
            n_visits: 12,
            visit_interval: 182.0,
            visit_jitter: 14.0,
            dropout: 0.02,
            max_followup: 2190.0,
            h_base: [NormalParams::new(250.0, 150.0_f64.powi(2)); 2],
            w_base: [
                NormalParams::new(150.0, 60.0_f64.powi(2)),
                NormalParams::new(210.0, 60.0_f64.powi(2)),
            ],
            responder_curves: [responder(14.0), responder(13.0)],
            nonresponder_curves: [nonresponder(12.0), nonresponder(11.5)],
            covariate_mean: 3.0,
            covariate_sd: 1.0,
            binary_covariate_rate: 0.3,
            beta_star: vec![0.8, -0.5],
            responder_random_sd: vec![1.2, 0.4, 0.0, 0.0],
            nonresponder_random_sd: vec![1.2, 0.4, 0.0, 0.0],
            sigma2: 1.0,
            time_scale: scale,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.n_per_group.iter().sum::<usize>() == 0 {
            return bad("generator needs at least one subject");
        }
        if self.n_visits == 0 || !(self.visit_interval > 0.0) {
            return bad("visit schedule must have positive length and spacing");
        }
        if !(self.visit_jitter >= 0.0 && self.visit_jitter < 0.5 * self.visit_interval) {
            return bad("visit jitter must lie in [0, interval / 2)");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout probability must lie in [0, 1)");
        }
        if !(self.max_followup > 0.0 && self.time_scale > 0.0) {
            return bad("follow-up horizon and time scale must be positive");
        }
        if self.h_base.iter().chain(&self.w_base).any(|p| !(p.var > 0.0)) {
            return bad("base-measure variances must be positive");
        }
        if !(self.covariate_sd >= 0.0 && (0.0..=1.0).contains(&self.binary_covariate_rate)) {
            return bad("covariate settings out of range");
        }
        if self.beta_star.len() != 2 {
            return bad("beta_star must have two entries (continuous, binary covariate)");
        }
        if self.responder_random_sd.len() != 4 || self.nonresponder_random_sd.len() != 4 {
            return bad("random-effect sds must have four entries");
        }
        if !(self.sigma2 >= 0.0) {
            return bad("sigma2 must be >= 0");
        }
        Ok(())
    }

    fn individual_bases(&self) -> Result<[BasisSpec; 2]> {
        Ok([
            BasisSpec::with_scale(2, vec![0.0], self.time_scale)?,
            BasisSpec::with_scale(2, vec![0.5 * self.max_followup], self.time_scale)?,
        ])
    }
}

/// Ground truth behind a generated cohort.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: GeneratorConfig,
    pub h: Vec<f64>,
    pub w: Vec<f64>,
    /// Random coefficients of each subject on its individual basis.
    pub random_effects: Vec<Vec<f64>>,
}

impl GroundTruth {
    pub fn v(&self, i: usize) -> f64 {
        self.h[i] + self.w[i]
    }
}

fn positive_normal<R: Rng + ?Sized>(p: NormalParams, rng: &mut R) -> f64 {
    loop {
        let x = p.mean + p.sd() * standard_normal(rng);
        if x > 0.0 {
            return x;
        }
    }
}

/// Simulates a cohort. Subject `i` uses its own substream of the seed;
/// subjects whose H falls after their last visit are redrawn.
pub fn generate_cohort(config: &GeneratorConfig) -> Result<(Vec<Subject>, CohortMeta, GroundTruth)> {
    config.validate()?;
    let individual = config.individual_bases()?;
    let mut subjects = Vec::new();
    let mut truth = GroundTruth {
        config: config.clone(),
        h: Vec::new(),
        w: Vec::new(),
        random_effects: Vec::new(),
    };
    let mut index = 0u64;
    for z in [0u8, 1] {
        for _ in 0..config.n_per_group[usize::from(z)] {
            let mut rng = seeded_rng(config.seed, index);
            let (s, h, w, re) = generate_subject(config, &individual, z, format!("S{:04}", index + 1), &mut rng)?;
            subjects.push(s);
            truth.h.push(h);
            truth.w.push(w);
            truth.random_effects.push(re);
            index += 1;
        }
    }
    if subjects.iter().all(|s| s.r_v.is_infinite()) {
        log::warn!("generated cohort has no responders");
    }
    let meta = CohortMeta {
        covariates: vec!["cd4_100".into(), "idu".into()],
        outcome_transform: OutcomeTransform::Sqrt,
        max_followup: config.max_followup,
        origin: None,
    };
    Ok((subjects, meta, truth))
}

fn generate_subject<R: Rng + ?Sized>(
    config: &GeneratorConfig,
    individual: &[BasisSpec; 2],
    z: u8,
    id: String,
    rng: &mut R,
) -> Result<(Subject, f64, f64, Vec<f64>)> {
    let g = usize::from(z);
    loop {
        let mut visits = vec![0.0];
        for k in 1..=config.n_visits {
            let jitter = config.visit_jitter * (2.0 * rng.random::<f64>() - 1.0);
            visits.push(k as f64 * config.visit_interval + jitter);
            if k < config.n_visits && rng.random::<f64>() < config.dropout {
                break;
            }
        }
        visits.retain(|&t| t <= config.max_followup);
        let h = positive_normal(config.h_base[g], rng);
        let w = positive_normal(config.w_base[g], rng);
        let last = *visits.last().expect("enrollment visit");
        if h > last {
            continue;
        }
        let v = h + w;
        let k_h = visits.iter().position(|&t| t >= h).expect("h before last visit");
        let (l_h, r_h) = (visits[k_h - 1], visits[k_h]);
        let (l_v, r_v) = match visits.iter().position(|&t| t >= v) {
            Some(k) => (visits[k - 1], visits[k]),
            None => (last, f64::INFINITY),
        };
        let responder = r_v.is_finite();
        let x = vec![
            config.covariate_mean + config.covariate_sd * standard_normal(rng),
            if rng.random::<f64>() < config.binary_covariate_rate {
                1.0
            } else {
                0.0
            },
        ];
        let (sds, basis) = if responder {
            (&config.responder_random_sd, &individual[0])
        } else {
            (&config.nonresponder_random_sd, &individual[1])
        };
        let re: Vec<f64> = sds.iter().map(|sd| sd * standard_normal(rng)).collect();
        let offset: f64 = x.iter().zip(&config.beta_star).map(|(a, b)| a * b).sum();
        let mut row = vec![0.0; basis.dimension()];
        let obs = visits
            .iter()
            .map(|&t| {
                let time = if responder { t - v } else { t };
                let population = if responder {
                    config.responder_curves[g].eval(time)
                } else {
                    config.nonresponder_curves[g].eval(time)
                };
                basis.eval_into(time, &mut row);
                let random: f64 = row.iter().zip(&re).map(|(a, b)| a * b).sum();
                let noise = if config.sigma2 > 0.0 {
                    config.sigma2.sqrt() * standard_normal(rng)
                } else {
                    0.0
                };
                Observation {
                    t,
                    y: (population + random + offset + noise).max(0.0),
                }
            })
            .collect();
        let subject = Subject {
            id,
            z,
            x_star: x,
            l_h,
            r_h,
            l_v,
            r_v,
            obs,
        };
        return Ok((subject, h, w, re));
    }
}

/// Writes a generated cohort and its ground truth into `dir`; returns the
/// written paths.
pub fn write_generated(
    dir: &Path,
    subjects: &[Subject],
    meta: &CohortMeta,
    truth: &GroundTruth,
) -> Result<Vec<PathBuf>> {
    write_cohort(dir, subjects, meta)?;
    write_json(&dir.join(TRUTH_FILE), truth)?;
    Ok([SUBJECTS_FILE, OBSERVATIONS_FILE, SIDECAR_FILE, TRUTH_FILE]
        .iter()
        .map(|f| dir.join(f))
        .collect())
}

pub fn load_truth(dir: &Path) -> Result<GroundTruth> {
    read_json(&dir.join(TRUTH_FILE))
}
