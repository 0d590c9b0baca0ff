//! Python module `plom_py`.
//!
//! Matrices cross the boundary as lists of rows: ν rows of n_d realizations
//! for samples, n_d rows of m columns for bases. Anything indexable row by
//! row (nested lists, 2-D numpy arrays) is accepted on input.

use std::path::PathBuf;

use nalgebra::DMatrix;
use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use plom_core::data_model::TrainingSet;
use plom_core::error::Error;
use plom_core::gaussian_reference::{run_reference, ReferenceConfig};
use plom_core::gkde;
use plom_core::info_metrics::{self, SampleSet};
use plom_core::isde::{simulate, IsdeConfig};
use plom_core::kernels;
use plom_core::pipeline::{run_pipeline, to_json, write_run, RunConfig};
use plom_core::plom::{self as core_plom, ConstraintMode, HessianEstimate, PlomConfig};
use plom_core::selection;
use plom_core::synthetic::{self, GeneratorKind, GeneratorSpec};

fn py_err(e: Error) -> PyErr {
    if e.is_input_error() {
        PyValueError::new_err(e.to_string())
    } else {
        PyRuntimeError::new_err(format!("{}: {e}", e.kind()))
    }
}

fn to_matrix(rows: Vec<Vec<f64>>) -> PyResult<DMatrix<f64>> {
    let nr = rows.len();
    let nc = rows.first().map_or(0, Vec::len);
    if nr == 0 || nc == 0 {
        return Err(PyValueError::new_err("matrix must be non-empty"));
    }
    if rows.iter().any(|r| r.len() != nc) {
        return Err(PyValueError::new_err("ragged rows"));
    }
    Ok(DMatrix::from_fn(nr, nc, |i, j| rows[i][j]))
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn training(eta: Vec<Vec<f64>>) -> PyResult<TrainingSet> {
    TrainingSet::new(to_matrix(eta)?).map_err(py_err)
}

fn parse_mode(s: &str) -> PyResult<ConstraintMode> {
    match s {
        "none" => Ok(ConstraintMode::None),
        "diagonal" => Ok(ConstraintMode::Diagonal),
        "full" => Ok(ConstraintMode::Full),
        _ => Err(PyValueError::new_err(format!("unknown constraint mode {s:?}"))),
    }
}

/// Normalized synthetic training set (ν rows, n_d columns).
#[pyfunction]
#[pyo3(signature = (kind, nu, n_d, seed = 0))]
fn generate_synthetic(kind: &str, nu: usize, n_d: usize, seed: u64) -> PyResult<Vec<Vec<f64>>> {
    let k = match kind {
        "gaussian" => GeneratorKind::Gaussian,
        "multiconnected-manifold" => GeneratorKind::multiconnected(),
        "chaos-expansion" => GeneratorKind::chaos(),
        "high-dim-homogeneous" => GeneratorKind::high_dim(),
        _ => return Err(PyValueError::new_err(format!("unknown generator kind {kind:?}"))),
    };
    let ts = synthetic::generate(&GeneratorSpec::new(k, nu, n_d, seed)).map_err(py_err)?;
    Ok(to_rows(ts.eta()))
}

/// Centers and whitens raw samples (rows are components).
#[pyfunction]
fn normalize(x: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
    let ts = TrainingSet::normalized(to_matrix(x)?).map_err(py_err)?;
    Ok(to_rows(ts.eta()))
}

/// (s, ŝ, ŝ/s) for dimension ν and n_d points.
#[pyfunction]
fn bandwidths(nu: usize, n_d: usize) -> (f64, f64, f64) {
    let b = gkde::bandwidths(nu, n_d);
    (b.s, b.s_hat, b.ratio)
}

/// Gaussian kernel density model built on a normalized training set.
#[pyclass(name = "GkdeModel", module = "plom_py")]
struct PyGkde {
    inner: gkde::GkdeModel,
}

#[pymethods]
impl PyGkde {
    #[new]
    fn new(eta: Vec<Vec<f64>>) -> PyResult<Self> {
        Ok(Self { inner: gkde::GkdeModel::new(training(eta)?) })
    }

    #[getter]
    fn nu(&self) -> usize {
        self.inner.nu()
    }

    #[getter]
    fn n_d(&self) -> usize {
        self.inner.n_d()
    }

    /// (s, ŝ, ŝ/s).
    #[getter]
    fn bandwidths(&self) -> (f64, f64, f64) {
        let b = self.inner.bandwidths();
        (b.s, b.s_hat, b.ratio)
    }

    fn log_pdf(&self, y: Vec<f64>) -> PyResult<f64> {
        self.check(&y)?;
        Ok(self.inner.log_pdf(&y))
    }

    /// ∇ log p at y.
    fn grad_log_pdf(&self, y: Vec<f64>) -> PyResult<Vec<f64>> {
        self.check(&y)?;
        Ok(self.inner.drift(&y).iter().copied().collect())
    }

    #[pyo3(signature = (n, seed = 0))]
    fn sample(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        to_rows(&self.inner.sample(n, seed))
    }

    fn __repr__(&self) -> String {
        format!("GkdeModel(nu={}, n_d={})", self.inner.nu(), self.inner.n_d())
    }
}

impl PyGkde {
    fn check(&self, y: &[f64]) -> PyResult<()> {
        if y.len() != self.inner.nu() {
            return Err(py_err(Error::DimensionMismatch { expected: self.inner.nu(), found: y.len() }));
        }
        Ok(())
    }
}

/// Reduced-order basis [g] with its spectrum.
#[pyclass(name = "KernelBasis", module = "plom_py")]
struct PyBasis {
    inner: kernels::KernelBasis,
    /// Instant index for transient bases.
    #[pyo3(get)]
    n: Option<usize>,
    #[pyo3(get)]
    t: Option<f64>,
}

#[pymethods]
impl PyBasis {
    /// n_d × m matrix as rows.
    #[getter]
    fn g(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.g)
    }

    #[getter]
    fn eigvals(&self) -> Vec<f64> {
        self.inner.eigvals.clone()
    }

    #[getter]
    fn m(&self) -> usize {
        self.inner.m
    }

    #[getter]
    fn eps_dm(&self) -> Option<f64> {
        self.inner.eps_dm
    }

    #[getter]
    fn jump(&self) -> f64 {
        self.inner.jump
    }

    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    fn __repr__(&self) -> String {
        format!("KernelBasis(m={}, n={:?}, eps_dm={:?})", self.inner.m, self.n, self.inner.eps_dm)
    }
}

/// DMAPS basis with ε chosen so that the eigenvalue jump reaches `jump_target`.
#[pyfunction]
#[pyo3(signature = (eta, jump_target = 0.1))]
fn dmaps_basis(eta: Vec<Vec<f64>>, jump_target: f64) -> PyResult<PyBasis> {
    let b = kernels::dmaps_basis(&training(eta)?, jump_target).map_err(py_err)?;
    Ok(PyBasis { inner: b, n: None, t: None })
}

/// Transient bases at the given instants, from the connected kernel with
/// the DMAPS smoothing parameter `eps_dm`.
#[pyfunction]
#[pyo3(signature = (eta, eps_dm, instants, kappa = 30.0, n_mc = 1000, seed = 0, n_s = 1))]
fn transient_bases(
    py: Python<'_>,
    eta: Vec<Vec<f64>>,
    eps_dm: f64,
    instants: Vec<usize>,
    kappa: f64,
    n_mc: usize,
    seed: u64,
    n_s: usize,
) -> PyResult<Vec<PyBasis>> {
    let model = gkde::GkdeModel::new(training(eta)?);
    let mut ns = instants;
    ns.sort_unstable();
    ns.dedup();
    let n_steps = ns.last().copied().unwrap_or(0);
    let out = py.detach(|| -> plom_core::error::Result<Vec<(usize, f64, kernels::KernelBasis)>> {
        let mut cfg = IsdeConfig::from_kappa(&model, kappa, n_steps, n_mc, seed);
        cfg.n_s = n_s;
        cfg.retain = Some(ns.clone());
        cfg.validate()?;
        let traj = simulate(&model, &cfg)?;
        let kms = kernels::transient_connected_matrices(&model, &traj, &ns, eps_dm)?;
        let m = kernels::m_opt(model.nu());
        kms.iter().zip(&ns).map(|(km, &n)| Ok((n, km.t, kernels::transient_basis(km, m)?))).collect()
    });
    Ok(out.map_err(py_err)?.into_iter().map(|(n, t, b)| PyBasis { inner: b, n: Some(n), t: Some(t) }).collect())
}

/// Angle in degrees from the normalized cross-Gram of two bases.
#[pyfunction]
fn subspace_angle(ga: Vec<Vec<f64>>, gb: Vec<Vec<f64>>) -> PyResult<f64> {
    selection::subspace_angle(&to_matrix(ga)?, &to_matrix(gb)?).map_err(py_err)
}

/// Largest principal angle between the spans, in degrees.
#[pyfunction]
fn span_angle(ga: Vec<Vec<f64>>, gb: Vec<Vec<f64>>) -> PyResult<f64> {
    selection::span_angle(&to_matrix(ga)?, &to_matrix(gb)?).map_err(py_err)
}

/// Learned realizations with the constraint iteration record.
#[pyclass(name = "LearnedSet", module = "plom_py")]
struct PyLearned {
    inner: core_plom::LearnedSet,
    #[pyo3(get)]
    d2: f64,
}

#[pymethods]
impl PyLearned {
    /// ν × (n_d·n_MCH) as rows.
    #[getter]
    fn eta_ar(&self) -> Vec<Vec<f64>> {
        to_rows(&self.inner.eta_ar)
    }

    #[getter]
    fn n_mch(&self) -> usize {
        self.inner.n_mch()
    }

    #[getter]
    fn converged(&self) -> bool {
        self.inner.converged
    }

    #[getter]
    fn iterations(&self) -> usize {
        self.inner.i_last
    }

    #[getter]
    fn lambda_(&self) -> Vec<f64> {
        self.inner.lambda.clone()
    }

    /// (i, err, α) per constraint iteration.
    #[getter]
    fn err_trace(&self) -> Vec<(usize, f64, f64)> {
        self.inner.err_trace.iter().map(|r| (r.i, r.err, r.alpha)).collect()
    }

    fn __repr__(&self) -> String {
        format!("LearnedSet(n_mch={}, d2={:.6}, converged={})", self.inner.n_mch(), self.d2, self.inner.converged)
    }
}

/// Reduced-basis sampler; `g` is n_d × m, or None for the identity basis.
#[pyfunction]
#[pyo3(signature = (eta, g = None, n_mch = 100, seed = 0, constraints = "none", m0 = 30, f0 = 4.0, max_iter = 400, hessian = "realizations"))]
#[allow(clippy::too_many_arguments)]
fn plom(
    py: Python<'_>,
    eta: Vec<Vec<f64>>,
    g: Option<Vec<Vec<f64>>>,
    n_mch: usize,
    seed: u64,
    constraints: &str,
    m0: usize,
    f0: f64,
    max_iter: usize,
    hessian: &str,
) -> PyResult<PyLearned> {
    let ts = training(eta)?;
    let g = match g {
        Some(rows) => to_matrix(rows)?,
        None => core_plom::identity_basis(ts.n_d()),
    };
    let mode = parse_mode(constraints)?;
    let hessian = match hessian {
        "realizations" => HessianEstimate::Realizations,
        "chain-means" => HessianEstimate::ChainMeans,
        other => return Err(PyValueError::new_err(format!("unknown hessian estimate {other:?}"))),
    };
    let cfg = PlomConfig { n_mch, seed, constraints: mode, m0, f0, max_iter, hessian, ..PlomConfig::default() };
    let model = gkde::GkdeModel::new(ts);
    let res = py.detach(|| -> plom_core::error::Result<(core_plom::LearnedSet, f64)> {
        let l = if mode == ConstraintMode::None {
            core_plom::generate(&model, &g, &cfg, mode, &[])?
        } else {
            core_plom::constrain(&model, &g, &cfg)?
        };
        let d2 = selection::concentration(&l.matrices(), model.training().eta())?;
        Ok((l, d2))
    });
    let (inner, d2) = res.map_err(py_err)?;
    Ok(PyLearned { inner, d2 })
}

/// d̂²: mean relative squared distance of learned matrices to the training set.
#[pyfunction]
fn concentration(eta_ar: Vec<Vec<f64>>, eta_d: Vec<Vec<f64>>) -> PyResult<f64> {
    let (ar, d) = (to_matrix(eta_ar)?, to_matrix(eta_d)?);
    let n_d = d.ncols();
    if ar.nrows() != d.nrows() || ar.ncols() % n_d != 0 {
        return Err(PyValueError::new_err("learned samples must be ν × (n_d·n_MCH)"));
    }
    let mats: Vec<DMatrix<f64>> = (0..ar.ncols() / n_d).map(|l| ar.columns(l * n_d, n_d).into_owned()).collect();
    selection::concentration(&mats, &d).map_err(py_err)
}

fn samples(x: Vec<Vec<f64>>, cap: Option<usize>, seed: u64) -> PyResult<SampleSet> {
    let m = to_matrix(x)?;
    match cap {
        Some(c) => SampleSet::capped(m, c, seed),
        None => SampleSet::new(m),
    }
    .map_err(py_err)
}

/// D̂(a ‖ b).
#[pyfunction]
#[pyo3(signature = (a, b, cap = None, seed = 0))]
fn kl_divergence(a: Vec<Vec<f64>>, b: Vec<Vec<f64>>, cap: Option<usize>, seed: u64) -> PyResult<f64> {
    let (sa, sb) = (samples(a, cap, seed)?, samples(b, cap, seed.wrapping_add(1))?);
    info_metrics::kl_divergence(&sa, &sb).map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (x, cap = None, seed = 0))]
fn mutual_information(x: Vec<Vec<f64>>, cap: Option<usize>, seed: u64) -> PyResult<f64> {
    Ok(info_metrics::mutual_information(&samples(x, cap, seed)?))
}

#[pyfunction]
#[pyo3(signature = (x, cap = None, seed = 0))]
fn entropy(x: Vec<Vec<f64>>, cap: Option<usize>, seed: u64) -> PyResult<f64> {
    Ok(info_metrics::entropy(&samples(x, cap, seed)?))
}

/// Gaussian reference run: (err_λ, λ̂_α list).
#[pyfunction]
#[pyo3(signature = (n_d, seed = 0))]
fn reference(py: Python<'_>, n_d: usize, seed: u64) -> PyResult<(f64, Vec<f64>)> {
    let run = py.detach(|| run_reference(&ReferenceConfig::new(n_d, seed))).map_err(py_err)?.run;
    Ok((run.spectrum.err_lambda, run.spectrum.lambda_hat))
}

/// Full pipeline from TOML text; returns the run record as JSON and writes
/// the artifact tree when `output` is given.
#[pyfunction]
#[pyo3(signature = (config_toml, output = None))]
fn run(py: Python<'_>, config_toml: &str, output: Option<PathBuf>) -> PyResult<String> {
    let cfg = RunConfig::from_toml(config_toml).map_err(py_err)?;
    py.detach(|| -> plom_core::error::Result<String> {
        let out = run_pipeline(&cfg)?;
        if let Some(dir) = &output {
            write_run(dir, &out)?;
        }
        to_json(&out.record)
    })
    .map_err(py_err)
}

#[pymodule]
fn plom_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    m.add_class::<PyGkde>()?;
    m.add_class::<PyBasis>()?;
    m.add_class::<PyLearned>()?;
    m.add_function(wrap_pyfunction!(generate_synthetic, m)?)?;
    m.add_function(wrap_pyfunction!(normalize, m)?)?;
    m.add_function(wrap_pyfunction!(bandwidths, m)?)?;
    m.add_function(wrap_pyfunction!(dmaps_basis, m)?)?;
    m.add_function(wrap_pyfunction!(transient_bases, m)?)?;
    m.add_function(wrap_pyfunction!(subspace_angle, m)?)?;
    m.add_function(wrap_pyfunction!(span_angle, m)?)?;
    m.add_function(wrap_pyfunction!(plom, m)?)?;
    m.add_function(wrap_pyfunction!(concentration, m)?)?;
    m.add_function(wrap_pyfunction!(kl_divergence, m)?)?;
    m.add_function(wrap_pyfunction!(mutual_information, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(reference, m)?)?;
    m.add_function(wrap_pyfunction!(run, m)?)?;
    Ok(())
}
