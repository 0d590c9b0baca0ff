//! The PLoM generator: a reduced-order dissipative Hamiltonian ISDE on
//! [Z] ∈ M_{ν,m} with [H] = [Z][g]ᵀ, integrated by the Störmer-Verlet scheme,
//! plus second-order moment constraints imposed through Lagrange multipliers.
//!
//! dZ = Y dt
//! dY = L(Z gᵀ) a dt − ½ f0 Y dt + √f0 dW a,   a = g (gᵀg)⁻¹
//!
//! Each learned matrix comes from an independent restart of M0 steps started
//! at Z(0) = η_d a and Y(0) = N a.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gkde::GkdeModel;
use crate::rng::{derive_seed, Stream};

/// Consecutive error increases after which the constraint loop is abandoned.
pub const DIVERGENCE_WINDOW: usize = 50;
/// Relative ridge added to cov(h) before solving.
pub const GAMMA_RIDGE: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ConstraintMode {
    #[default]
    None,
    /// E{H_k²} = 1.
    Diagonal,
    /// E{H} = 0 and E{H ⊗ H} = I.
    Full,
}

impl ConstraintMode {
    /// Length of h and λ.
    pub fn dim(self, nu: usize) -> usize {
        match self {
            ConstraintMode::None => 0,
            ConstraintMode::Diagonal => nu,
            ConstraintMode::Full => 2 * nu + nu * (nu - 1) / 2,
        }
    }

    /// Target vector b. Full mode packs (means, squares, cross terms k<k' row-major).
    pub fn target(self, nu: usize) -> Vec<f64> {
        match self {
            ConstraintMode::None => Vec::new(),
            ConstraintMode::Diagonal => vec![1.0; nu],
            ConstraintMode::Full => {
                let mut b = vec![0.0; self.dim(nu)];
                b[nu..2 * nu].iter_mut().for_each(|v| *v = 1.0);
                b
            }
        }
    }

    /// h(u) for one realization u ∈ R^ν.
    pub fn h(self, u: &[f64], out: &mut [f64]) {
        let nu = u.len();
        match self {
            ConstraintMode::None => {}
            ConstraintMode::Diagonal => {
                for k in 0..nu {
                    out[k] = u[k] * u[k];
                }
            }
            ConstraintMode::Full => {
                for k in 0..nu {
                    out[k] = u[k];
                    out[nu + k] = u[k] * u[k];
                }
                let mut c = 2 * nu;
                for k in 0..nu {
                    for kp in k + 1..nu {
                        out[c] = u[k] * u[kp];
                        c += 1;
                    }
                }
            }
        }
    }

    /// Subtracts ∇(λ·h)(u) from `out`.
    fn apply_drift(self, lambda: &[f64], u: &[f64], out: &mut [f64]) {
        let nu = u.len();
        match self {
            ConstraintMode::None => {}
            ConstraintMode::Diagonal => {
                for k in 0..nu {
                    out[k] -= 2.0 * lambda[k] * u[k];
                }
            }
            ConstraintMode::Full => {
                for k in 0..nu {
                    out[k] -= lambda[k] + 2.0 * lambda[nu + k] * u[k];
                }
                let mut c = 2 * nu;
                for k in 0..nu {
                    for kp in k + 1..nu {
                        out[k] -= lambda[c] * u[kp];
                        out[kp] -= lambda[c] * u[k];
                        c += 1;
                    }
                }
            }
        }
    }
}

/// Estimate of cov{h} used as the Newton matrix of the constraint iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum HessianEstimate {
    /// Covariance of h over all n_ar learned realizations.
    #[default]
    Realizations,
    /// n_d times the covariance over chains of the per-matrix mean of h.
    ///
    /// The reduced-order sampler draws whole matrices [η] = [z][g]ᵀ whose
    /// stationary law is tilted by exp(−n_d λ·ĥ), so this is the exact
    /// sensitivity of E{h} to λ. It needs n_MCH larger than the number of
    /// constraints.
    ChainMeans,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlomConfig {
    pub f0: f64,
    /// Störmer-Verlet step; `None` means 2πŝ/20.
    pub dt_sv: Option<f64>,
    pub m0: usize,
    pub n_mch: usize,
    pub constraints: ConstraintMode,
    pub beta1: f64,
    pub beta2: f64,
    pub i2: usize,
    pub err_tol: f64,
    pub max_iter: usize,
    pub hessian: HessianEstimate,
    pub seed: u64,
    /// Draw fresh noise at every constraint iteration instead of reusing it.
    pub reseed_each_iter: bool,
    /// Start each iteration's chains from the previous iteration's final states.
    pub warm_start: bool,
}

impl Default for PlomConfig {
    fn default() -> Self {
        Self {
            f0: 4.0,
            dt_sv: None,
            m0: 30,
            n_mch: 100,
            constraints: ConstraintMode::None,
            beta1: 0.001,
            beta2: 0.05,
            i2: 20,
            err_tol: 1e-3,
            max_iter: 5000,
            hessian: HessianEstimate::Realizations,
            seed: 0,
            reseed_each_iter: false,
            warm_start: false,
        }
    }
}

impl PlomConfig {
    pub fn step(&self, s_hat: f64) -> f64 {
        self.dt_sv.unwrap_or(2.0 * std::f64::consts::PI * s_hat / 20.0)
    }

    pub fn validate(&self, s_hat: f64) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidInput(m));
        if !(self.f0 > 0.0 && self.f0 < 4.0 / s_hat) {
            return bad(format!("f0 = {} outside (0, 4/ŝ) = (0, {})", self.f0, 4.0 / s_hat));
        }
        let dt = self.step(s_hat);
        if !(dt > 0.0 && dt.is_finite()) {
            return bad(format!("dt_sv must be positive, got {dt}"));
        }
        if self.m0 == 0 || self.n_mch == 0 {
            return bad("m0 and n_mch must be positive".into());
        }
        if self.constraints != ConstraintMode::None {
            if !(self.beta1 > 0.0 && self.beta1 < self.beta2 && self.beta2 <= 1.0) {
                return bad(format!("need 0 < beta1 < beta2 <= 1, got {} and {}", self.beta1, self.beta2));
            }
            if self.i2 < 2 {
                return bad(format!("i2 must be at least 2, got {}", self.i2));
            }
            if !(self.err_tol > 0.0) {
                return bad("err_tol must be positive".into());
            }
            if self.hessian == HessianEstimate::ChainMeans && self.n_mch <= 1 {
                return bad("the chain-mean Hessian needs n_mch > 1".into());
            }
        }
        Ok(())
    }

    /// Relaxation α_i, i ≥ 1: linear from β1 to β2 up to i2, then β2.
    pub fn alpha(&self, i: usize) -> f64 {
        if i <= self.i2 {
            self.beta1 + (self.beta2 - self.beta1) * (i as f64 - 1.0) / (self.i2 as f64 - 1.0)
        } else {
            self.beta2
        }
    }
}

/// [a] = [g]([g]ᵀ[g])⁻¹.
pub fn projector(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let gram = g.transpose() * g;
    let chol = gram.cholesky().ok_or(Error::SingularGram)?;
    let inv = chol.inverse();
    if inv.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularGram);
    }
    Ok(g * inv)
}

/// The n_d × n_d identity basis, which turns the generator into plain MCMC
/// of the GKDE measure.
pub fn identity_basis(n_d: usize) -> DMatrix<f64> {
    DMatrix::identity(n_d, n_d)
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceRow {
    pub i: usize,
    pub err: f64,
    /// Relaxation used for the update that follows; 0 on the final row.
    pub alpha: f64,
}

#[derive(Clone, Debug)]
pub struct LearnedSet {
    /// ν × (n_d·n_MCH); columns ℓ·n_d..(ℓ+1)·n_d hold [η_ar^ℓ].
    pub eta_ar: DMatrix<f64>,
    pub n_d: usize,
    pub mode: ConstraintMode,
    pub lambda: Vec<f64>,
    pub err_trace: Vec<TraceRow>,
    pub i_last: usize,
    pub converged: bool,
}

impl LearnedSet {
    pub fn n_mch(&self) -> usize {
        self.eta_ar.ncols() / self.n_d
    }

    pub fn n_ar(&self) -> usize {
        self.eta_ar.ncols()
    }

    pub fn matrix(&self, l: usize) -> DMatrix<f64> {
        self.eta_ar.columns(l * self.n_d, self.n_d).into_owned()
    }

    pub fn matrices(&self) -> Vec<DMatrix<f64>> {
        (0..self.n_mch()).map(|l| self.matrix(l)).collect()
    }
}

type ChainState = (DMatrix<f64>, DMatrix<f64>);

struct Generator<'a> {
    model: &'a GkdeModel,
    gt: DMatrix<f64>,
    a: DMatrix<f64>,
    dt: f64,
    f0: f64,
    m0: usize,
    mode: ConstraintMode,
}

impl Generator<'_> {
    /// ℒ(Z) = L_λ(Z gᵀ) a.
    fn force(&self, lambda: &[f64], z: &DMatrix<f64>, u: &mut DMatrix<f64>, lu: &mut DMatrix<f64>, w: &mut [f64]) -> DMatrix<f64> {
        let nu = z.nrows();
        u.gemm(1.0, z, &self.gt, 0.0);
        for j in 0..u.ncols() {
            let col = &u.as_slice()[j * nu..(j + 1) * nu];
            let out = &mut lu.as_mut_slice()[j * nu..(j + 1) * nu];
            self.model.grad_log_xi_into(col, out, w);
            self.mode.apply_drift(lambda, col, out);
        }
        &*lu * &self.a
    }

    fn run(&self, lambda: &[f64], seed: u64, l: usize, start: Option<&ChainState>) -> Result<(DMatrix<f64>, ChainState)> {
        let (nu, n_d) = (self.model.nu(), self.model.n_d());
        let mut rng = Stream::new(seed, l as u64, 0);
        let mut noise = DMatrix::zeros(nu, n_d);
        let (mut z, mut y) = match start {
            Some((z, y)) => (z.clone(), y.clone()),
            None => {
                rng.fill_normal(noise.as_mut_slice());
                (self.model.training().eta() * &self.a, &noise * &self.a)
            }
        };
        let mut u = DMatrix::zeros(nu, n_d);
        let mut lu = DMatrix::zeros(nu, n_d);
        let mut w = vec![0.0; n_d];
        let b = self.f0 * self.dt / 4.0;
        let c_y = (1.0 - b) / (1.0 + b);
        let c_f = self.dt / (1.0 + b);
        let c_w = self.f0.sqrt() * self.dt.sqrt() / (1.0 + b);
        for _ in 0..self.m0 {
            let z_half = &z + &y * (0.5 * self.dt);
            let f = self.force(lambda, &z_half, &mut u, &mut lu, &mut w);
            rng.fill_normal(noise.as_mut_slice());
            let dw = &noise * &self.a;
            y = &y * c_y + f * c_f + dw * c_w;
            z = z_half + &y * (0.5 * self.dt);
        }
        let eta = &z * &self.gt;
        if eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { instant: l });
        }
        Ok((eta, (z, y)))
    }

    fn generate(&self, lambda: &[f64], seed: u64, n_mch: usize, warm: Option<&[ChainState]>) -> Result<(DMatrix<f64>, Vec<ChainState>)> {
        let (nu, n_d) = (self.model.nu(), self.model.n_d());
        let runs: Vec<Result<(DMatrix<f64>, ChainState)>> = (0..n_mch)
            .into_par_iter()
            .map(|l| self.run(lambda, seed, l, warm.map(|w| &w[l])))
            .collect();
        let mut eta_ar = DMatrix::zeros(nu, n_d * n_mch);
        let mut states = Vec::with_capacity(n_mch);
        for (l, r) in runs.into_iter().enumerate() {
            let (eta, st) = r?;
            eta_ar.columns_mut(l * n_d, n_d).copy_from(&eta);
            states.push(st);
        }
        Ok((eta_ar, states))
    }
}

fn generator<'a>(model: &'a GkdeModel, g: &'a DMatrix<f64>, cfg: &PlomConfig, mode: ConstraintMode) -> Result<Generator<'a>> {
    let s_hat = model.bandwidths().s_hat;
    cfg.validate(s_hat)?;
    if g.nrows() != model.n_d() {
        return Err(Error::DimensionMismatch { expected: model.n_d(), found: g.nrows() });
    }
    Ok(Generator {
        model,
        gt: g.transpose(),
        a: projector(g)?,
        dt: cfg.step(s_hat),
        f0: cfg.f0,
        m0: cfg.m0,
        mode,
    })
}

/// n_MCH learned matrices for fixed multipliers (`lambda` empty or of the
/// length required by `mode`).
pub fn generate(
    model: &GkdeModel,
    g: &DMatrix<f64>,
    cfg: &PlomConfig,
    mode: ConstraintMode,
    lambda: &[f64],
) -> Result<LearnedSet> {
    let nu = model.nu();
    let lam: Vec<f64> = if lambda.is_empty() { vec![0.0; mode.dim(nu)] } else { lambda.to_vec() };
    if lam.len() != mode.dim(nu) {
        return Err(Error::DimensionMismatch { expected: mode.dim(nu), found: lam.len() });
    }
    let gen = generator(model, g, cfg, mode)?;
    let (eta_ar, _) = gen.generate(&lam, cfg.seed, cfg.n_mch, None)?;
    Ok(LearnedSet {
        eta_ar,
        n_d: model.n_d(),
        mode,
        lambda: lam,
        err_trace: Vec::new(),
        i_last: 0,
        converged: true,
    })
}

/// E{h} and cov{h} over the columns of `eta_ar`.
pub fn h_moments(mode: ConstraintMode, eta_ar: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let nu = eta_ar.nrows();
    let dim = mode.dim(nu);
    let n = eta_ar.ncols();
    let mut hs = DMatrix::zeros(dim, n);
    for l in 0..n {
        let u = &eta_ar.as_slice()[l * nu..(l + 1) * nu];
        mode.h(u, &mut hs.as_mut_slice()[l * dim..(l + 1) * dim]);
    }
    let mean = hs.column_mean();
    for mut c in hs.column_iter_mut() {
        c -= &mean;
    }
    let cov = &hs * hs.transpose() / (n as f64 - 1.0);
    (mean, cov)
}

/// n_d × cov over chains of the per-matrix mean of h.
pub fn chain_mean_cov(mode: ConstraintMode, eta_ar: &DMatrix<f64>, n_d: usize) -> DMatrix<f64> {
    let n_mch = eta_ar.ncols() / n_d;
    let dim = mode.dim(eta_ar.nrows());
    let mut means = DMatrix::zeros(dim, n_mch);
    for l in 0..n_mch {
        let (m, _) = h_moments(mode, &eta_ar.columns(l * n_d, n_d).into_owned());
        means.set_column(l, &m);
    }
    let mu = means.column_mean();
    for mut c in means.column_iter_mut() {
        c -= &mu;
    }
    &means * means.transpose() * (n_d as f64 / (n_mch as f64 - 1.0))
}

/// Iterates λ^{i+1} = λ^i − α_{i+1} cov(h)⁻¹ (b − E h) from λ⁰ = 0 until
/// ‖b − E h‖/‖b‖ ≤ err_tol or max_iter. `cfg.hessian` picks the estimate of cov(h).
pub fn constrain(model: &GkdeModel, g: &DMatrix<f64>, cfg: &PlomConfig) -> Result<LearnedSet> {
    let mode = cfg.constraints;
    if mode == ConstraintMode::None {
        return Err(Error::InvalidInput("constrain needs a constraint mode".into()));
    }
    let nu = model.nu();
    let gen = generator(model, g, cfg, mode)?;
    let b = DVector::from_vec(mode.target(nu));
    let b_norm = b.norm();
    let mut lambda = DVector::zeros(mode.dim(nu));
    let mut trace = Vec::new();
    let mut warm: Option<Vec<ChainState>> = None;
    let mut prev = f64::INFINITY;
    let mut growing = 0;
    let mut i = 0;
    loop {
        let seed = if cfg.reseed_each_iter { derive_seed(cfg.seed, &format!("constraint/{i}")) } else { cfg.seed };
        let (eta_ar, states) = gen.generate(lambda.as_slice(), seed, cfg.n_mch, warm.as_deref())?;
        let (eh, mut cov) = h_moments(mode, &eta_ar);
        if cfg.hessian == HessianEstimate::ChainMeans {
            cov = chain_mean_cov(mode, &eta_ar, model.n_d());
        }
        let grad = &b - eh;
        let err = grad.norm() / b_norm;
        let done = err <= cfg.err_tol;
        if done || i >= cfg.max_iter {
            trace.push(TraceRow { i, err, alpha: 0.0 });
            return Ok(LearnedSet {
                eta_ar,
                n_d: model.n_d(),
                mode,
                lambda: lambda.iter().copied().collect(),
                err_trace: trace,
                i_last: i,
                converged: done,
            });
        }
        if err > prev {
            growing += 1;
            if growing >= DIVERGENCE_WINDOW {
                return Err(Error::Diverged(i));
            }
        } else {
            growing = 0;
        }
        prev = err;
        let alpha = cfg.alpha(i + 1);
        trace.push(TraceRow { i, err, alpha });
        let dim = cov.nrows();
        let ridge = GAMMA_RIDGE * cov.trace() / dim as f64;
        let reg = cov + DMatrix::identity(dim, dim) * ridge;
        let step = reg.cholesky().ok_or(Error::SingularCovariance)?.solve(&grad);
        if step.iter().any(|v| !v.is_finite()) {
            return Err(Error::SingularCovariance);
        }
        lambda -= step * alpha;
        if cfg.warm_start {
            warm = Some(states);
        }
        i += 1;
    }
}
