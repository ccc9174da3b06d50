//! Python bindings: cohort generation and I/O, fitting, summaries and a few
//! numerical kernels. Structured results cross the boundary as JSON and are
//! decoded with Python's `json` module.

use std::path::PathBuf;

use pyo3::exceptions::{PyIndexError, PyKeyError, PyValueError};
use pyo3::prelude::*;

use dicjm_core::engine::{self, ChainConfig, ModelVariant, PosteriorDraws};
use dicjm_core::error::Error;
use dicjm_core::fitfile;
use dicjm_core::kernels::{self, GaussLegendre};
use dicjm_core::outcome::ModelContext;
use dicjm_core::pipeline::{self, CohortMeta, GeneratorConfig};
use dicjm_core::spline::{self, BasisSpec};
use dicjm_core::summaries::{self, SummaryOptions};
use dicjm_core::types::{validate_cohort, Hyperparams, Subject};

fn err(e: Error) -> PyErr {
    match e {
        Error::UnknownParameter(name) => PyKeyError::new_err(name),
        other => PyValueError::new_err(other.to_string()),
    }
}

fn to_py_json<'py, T: serde::Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

fn from_json<T: for<'de> serde::Deserialize<'de> + Default>(text: Option<&str>) -> PyResult<T> {
    match text {
        Some(t) => serde_json::from_str(t).map_err(|e| PyValueError::new_err(e.to_string())),
        None => Ok(T::default()),
    }
}

/// A list of subjects with its sidecar metadata.
#[pyclass(module = "dicjm")]
#[derive(Clone)]
struct Cohort {
    subjects: Vec<Subject>,
    meta: CohortMeta,
}

#[pymethods]
impl Cohort {
    /// Reads `subjects.csv`, `observations.csv` and `cohort.json` from a directory.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        let (subjects, meta) = pipeline::load_cohort(&dir).map_err(err)?;
        Ok(Self { subjects, meta })
    }

    fn write(&self, dir: PathBuf) -> PyResult<()> {
        pipeline::write_cohort(&dir, &self.subjects, &self.meta).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.subjects.len()
    }

    #[getter]
    fn ids(&self) -> Vec<String> {
        self.subjects.iter().map(|s| s.id.clone()).collect()
    }

    #[getter]
    fn responders(&self) -> Vec<bool> {
        self.subjects.iter().map(|s| s.r_v.is_finite()).collect()
    }

    #[getter]
    fn max_followup(&self) -> f64 {
        self.meta.max_followup
    }

    /// Subject `i` as a dict (`r_v` is the string "inf" when right-censored).
    fn subject<'py>(&self, py: Python<'py>, i: usize) -> PyResult<Bound<'py, PyAny>> {
        let s = self
            .subjects
            .get(i)
            .ok_or_else(|| PyIndexError::new_err(format!("subject index {i} out of range")))?;
        to_py_json(py, s)
    }

    /// Copy with every H left endpoint moved to `global_left`.
    fn widen(&self, global_left: f64) -> PyResult<Self> {
        Ok(Self {
            subjects: pipeline::widen_intervals(&self.subjects, global_left).map_err(err)?,
            meta: self.meta.clone(),
        })
    }

    /// Problems found by validation, or an empty list.
    fn validate(&self) -> Vec<String> {
        match validate_cohort(self.subjects.clone(), &self.hyper()) {
            Ok(c) => c.warnings().to_vec(),
            Err(e) => vec![e.to_string()],
        }
    }
}

impl Cohort {
    fn hyper(&self) -> Hyperparams {
        Hyperparams {
            max_followup: self.meta.max_followup,
            ..Hyperparams::default()
        }
    }
}

/// Simulates a cohort. `config` is a JSON generator configuration; returns
/// the cohort and its ground truth as a dict.
#[pyfunction]
#[pyo3(signature = (config=None, seed=None))]
fn generate_cohort<'py>(
    py: Python<'py>,
    config: Option<&str>,
    seed: Option<u64>,
) -> PyResult<(Cohort, Bound<'py, PyAny>)> {
    let mut cfg: GeneratorConfig = from_json(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (subjects, meta, truth) = pipeline::generate_cohort(&cfg).map_err(err)?;
    Ok((Cohort { subjects, meta }, to_py_json(py, &truth)?))
}

/// Posterior draws together with the model context they belong to.
#[pyclass(module = "dicjm")]
struct Fit {
    context: ModelContext,
    draws: PosteriorDraws,
}

#[pymethods]
impl Fit {
    /// Runs the sampler. `hyper` is an optional JSON hyperparameter object.
    #[staticmethod]
    #[pyo3(signature = (cohort, n_iter=7000, burn_in=2000, chains=2, thin=1, seed=1, alpha=(1.0, 1.0), variant="joint", metropolis_steps=10, threads=None, hyper=None))]
    #[allow(clippy::too_many_arguments)]
    fn run(
        py: Python<'_>,
        cohort: &Cohort,
        n_iter: usize,
        burn_in: usize,
        chains: usize,
        thin: usize,
        seed: u64,
        alpha: (f64, f64),
        variant: &str,
        metropolis_steps: usize,
        threads: Option<usize>,
        hyper: Option<&str>,
    ) -> PyResult<Self> {
        let mut hp: Hyperparams = from_json(hyper)?;
        hp.max_followup = cohort.meta.max_followup;
        let config = ChainConfig {
            n_iter,
            burn_in,
            n_chains: chains,
            thin,
            seed,
            alpha_h: alpha.0,
            alpha_w: alpha.1,
            metropolis_steps,
            variant: variant.parse::<ModelVariant>().map_err(err)?,
            latent_dump: None,
        };
        let validated = validate_cohort(cohort.subjects.clone(), &hp).map_err(err)?;
        let context = ModelContext::new(validated, hp).map_err(err)?;
        let draws = py
            .detach(|| engine::run_chains(&context, &config, threads))
            .map_err(err)?;
        Ok(Self { context, draws })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let fit = fitfile::read_fit(&path).map_err(err)?;
        Ok(Self {
            context: fit.context,
            draws: fit.draws,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        fitfile::write_fit(&path, &self.context, &self.draws).map_err(err)
    }

    #[getter]
    fn n_draws(&self) -> usize {
        self.draws.n_draws()
    }

    #[getter]
    fn n_chains(&self) -> usize {
        self.draws.chains.len()
    }

    #[getter]
    fn columns(&self) -> Vec<String> {
        self.draws.layout.columns()
    }

    /// Draws of one column, one list per chain.
    fn column(&self, name: &str) -> PyResult<Vec<Vec<f64>>> {
        let k = self.draws.layout.column_index(name).map_err(err)?;
        Ok(self.draws.chain_column(k))
    }

    /// Split R-hat of one column; returns (value, zero_variance).
    fn rhat(&self, name: &str) -> PyResult<(f64, bool)> {
        let k = self.draws.layout.column_index(name).map_err(err)?;
        let r = engine::gelman_rubin(&self.draws.chain_column(k)).map_err(err)?;
        Ok((r.value, r.zero_variance))
    }

    /// Full summary report as a dict; `options` is optional JSON.
    #[pyo3(signature = (options=None))]
    fn summary<'py>(&self, py: Python<'py>, options: Option<&str>) -> PyResult<Bound<'py, PyAny>> {
        let opts: SummaryOptions = from_json(options)?;
        let report = summaries::summarize_fit(&self.draws, &self.context, &opts).map_err(err)?;
        to_py_json(py, &report)
    }

    /// Duration percentiles of one group as (level, estimate) pairs.
    #[pyo3(signature = (group, levels=vec![0.05, 0.25, 0.5, 0.75, 0.95], pooled=false))]
    fn percentiles(&self, group: u8, levels: Vec<f64>, pooled: bool) -> PyResult<Vec<(f64, Option<f64>)>> {
        let rows =
            summaries::event_percentiles(&self.draws, &self.context.cohort, &levels, group, pooled).map_err(err)?;
        Ok(rows.into_iter().map(|r| (r.level, r.estimate)).collect())
    }

    /// Sampled mean and predictive curves of subject `i` as a dict.
    #[pyo3(signature = (i, n_samples=50, seed=0))]
    fn predictive<'py>(&self, py: Python<'py>, i: usize, n_samples: usize, seed: u64) -> PyResult<Bound<'py, PyAny>> {
        let p = summaries::subject_predictive(&self.draws, &self.context, i, n_samples, None, seed).map_err(err)?;
        to_py_json(py, &p)
    }
}

/// Truncated-polynomial basis row at `t`.
#[pyfunction]
#[pyo3(signature = (degree, knots, t, scale=1.0))]
fn eval_basis(degree: usize, knots: Vec<f64>, t: f64, scale: f64) -> PyResult<Vec<f64>> {
    let spec = BasisSpec::with_scale(degree, knots, scale).map_err(err)?;
    Ok(spline::eval_basis(&spec, t))
}

/// Derivative of the basis row at `t`.
#[pyfunction]
#[pyo3(signature = (degree, knots, t, scale=1.0))]
fn eval_derivative(degree: usize, knots: Vec<f64>, t: f64, scale: f64) -> PyResult<Vec<f64>> {
    let spec = BasisSpec::with_scale(degree, knots, scale).map_err(err)?;
    Ok(spline::eval_derivative(&spec, t))
}

/// `n` draws from N(mean, var) truncated to (lo, hi].
#[pyfunction]
#[pyo3(signature = (mean, var, lo, hi, n, seed=0))]
fn sample_truncated_normal(mean: f64, var: f64, lo: f64, hi: f64, n: usize, seed: u64) -> PyResult<Vec<f64>> {
    let mut rng = kernels::seeded_rng(seed, 0);
    (0..n)
        .map(|_| kernels::sample_truncated_normal(mean, var, lo, hi, &mut rng).map_err(err))
        .collect()
}

/// Gauss-Legendre nodes and weights on [-1, 1].
#[pyfunction]
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let rule = GaussLegendre::new(n);
    (rule.nodes().to_vec(), rule.weights().to_vec())
}

#[pyfunction]
fn normal_cdf(x: f64, mean: f64, var: f64) -> f64 {
    kernels::normal_cdf(x, mean, var)
}

#[pymodule]
fn dicjm(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Cohort>()?;
    m.add_class::<Fit>()?;
    m.add_function(wrap_pyfunction!(generate_cohort, m)?)?;
    m.add_function(wrap_pyfunction!(eval_basis, m)?)?;
    m.add_function(wrap_pyfunction!(eval_derivative, m)?)?;
    m.add_function(wrap_pyfunction!(sample_truncated_normal, m)?)?;
    m.add_function(wrap_pyfunction!(gauss_legendre, m)?)?;
    m.add_function(wrap_pyfunction!(normal_cdf, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
