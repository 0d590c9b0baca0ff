//! Closed forms for the one-dimensional Ornstein-Uhlenbeck reference
//! dY = -½ Y dt + dW, whose Fokker-Planck eigenvalues are α/2 with
//! normalized Hermite eigenfunctions, and the pipeline that estimates those
//! eigenvalues from the exact transient kernel K̂(nΔt).

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::data_model::TrainingSet;
use crate::error::{Error, Result};
use crate::gkde::GkdeModel;
use crate::isde::{convergence_curves, simulate, IsdeConfig, IsdeTrajectorySet};
use crate::kernels::{kernel_spectrum, rate_estimates, transient_exact_matrices, KernelMatrix};
use crate::synthetic::{generate, GeneratorKind, GeneratorSpec};

/// Training sizes of the convergence study.
pub const ND_GRID: [usize; 10] = [100, 300, 400, 800, 1000, 1200, 1500, 1800, 2000, 2200];
/// Δt of the reference runs (κ = 1 at n_d = 1200).
pub const REFERENCE_DT: f64 = 0.061796;
/// Eigenvalues compared, α = 0..=A_MAX.
pub const A_MAX: usize = 5;

/// (m_r(t), σ_r(t)) = (x e^{-t/2}, √(1 - e^{-t})).
pub fn ou_moments(x: f64, t: f64) -> (f64, f64) {
    (x * (-0.5 * t).exp(), (-(-t).exp_m1()).sqrt())
}

/// ρ_r(y, t | x, 0).
pub fn ou_transition_pdf(y: f64, t: f64, x: f64) -> f64 {
    let (m, s) = ou_moments(x, t);
    let z = (y - m) / s;
    (-0.5 * z * z).exp() / ((2.0 * std::f64::consts::PI).sqrt() * s)
}

pub fn gaussian_pdf(y: f64) -> f64 {
    (-0.5 * y * y).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// k_{r,t}(y, x) = ρ_r(y, t | x, 0)/p_{H_r}(y) in closed form.
pub fn mehler_kernel(y: f64, x: f64, t: f64) -> f64 {
    let e = (-t).exp();
    let one_minus = -(-t).exp_m1();
    let q = y * y + x * x - 2.0 * (0.5 * t).exp() * y * x;
    (-0.5 * e / one_minus * q).exp() / one_minus.sqrt()
}

/// Σ_{α ≤ a} e^{-αt/2} ψ_α(y) ψ_α(x).
pub fn mehler_series(y: f64, x: f64, t: f64, a: usize) -> f64 {
    let (hy, hx) = (hermite_all(a, y), hermite_all(a, x));
    let mut fact = 1.0;
    let mut sum = 0.0;
    for alpha in 0..=a {
        if alpha > 0 {
            fact *= alpha as f64;
        }
        sum += (-(alpha as f64) * t / 2.0).exp() * hy[alpha] * hx[alpha] / fact;
    }
    sum
}

fn hermite_all(a: usize, y: f64) -> Vec<f64> {
    let mut h = vec![1.0; a + 1];
    if a >= 1 {
        h[1] = y;
    }
    for k in 1..a {
        h[k + 1] = y * h[k] - k as f64 * h[k - 1];
    }
    h
}

/// Probabilists' Hermite polynomial h_α(y) by h_{α+1} = y h_α − α h_{α−1}.
pub fn hermite(alpha: usize, y: f64) -> f64 {
    hermite_all(alpha, y)[alpha]
}

/// ψ_α = h_α/√α!.
pub fn psi(alpha: usize, y: f64) -> f64 {
    let log_fact: f64 = (1..=alpha).map(|k| (k as f64).ln()).sum();
    hermite(alpha, y) * (-0.5 * log_fact).exp()
}

/// Gauss-Hermite rule for the standard normal measure (Golub-Welsch).
pub fn gauss_hermite(n: usize) -> (Vec<f64>, Vec<f64>) {
    let j = DMatrix::from_fn(n, n, |i, k| {
        if k == i + 1 || i == k + 1 {
            (i.max(k) as f64).sqrt()
        } else {
            0.0
        }
    });
    let eig = SymmetricEigen::new(j);
    let mut pairs: Vec<(f64, f64)> = (0..n)
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors[(0, i)].powi(2)))
        .collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    pairs.into_iter().unzip()
}

/// λ_{r,α} = α/2.
pub fn exact_rate(alpha: usize) -> f64 {
    alpha as f64 / 2.0
}

/// Σ_{α≤a}(α/2 − λ̂_α)² / Σ_{α≤a}(α/2)².
pub fn spectrum_error(lambda_hat: &[f64], a_max: usize) -> Result<f64> {
    if lambda_hat.len() < a_max + 1 {
        return Err(Error::InvalidInput(format!(
            "need {} rate estimates, found {}",
            a_max + 1,
            lambda_hat.len()
        )));
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for (a, &l) in lambda_hat.iter().take(a_max + 1).enumerate() {
        let r = exact_rate(a);
        num += (r - l) * (r - l);
        den += r * r;
    }
    Ok(num / den)
}

/// Standard normal training set of size n_d, normalized.
pub fn gaussian_training(n_d: usize, seed: u64) -> Result<TrainingSet> {
    generate(&GeneratorSpec::new(GeneratorKind::Gaussian, 1, n_d, seed))
}

#[derive(Clone, Debug, Serialize)]
pub struct ReferenceConfig {
    pub n_d: usize,
    pub n_mc: usize,
    pub delta_t: f64,
    /// Last simulated instant N.
    pub n_steps: usize,
    /// Instant n of the spectrum estimate, t = nΔt.
    pub t_index: usize,
    pub seed: u64,
}

impl ReferenceConfig {
    pub fn new(n_d: usize, seed: u64) -> Self {
        Self { n_d, n_mc: n_d, delta_t: REFERENCE_DT, n_steps: 2, t_index: 2, seed }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SpectrumEstimate {
    pub n_d: usize,
    pub n_mc: usize,
    pub t: f64,
    pub eigvals: Vec<f64>,
    pub lambda_hat: Vec<f64>,
    pub skipped: Vec<usize>,
    pub err_lambda: f64,
    /// Largest imaginary part among the eigenvalues of K.
    pub max_imag: f64,
}

/// λ̂_α from the leading eigenvalues of K̂(t) (symmetrized form).
pub fn spectrum_from_kernel(km: &KernelMatrix, n_mc: usize) -> Result<SpectrumEstimate> {
    let spec = kernel_spectrum(km);
    let rates = rate_estimates(&spec.values, km.t, A_MAX + 1);
    let lambda_hat = rates.values();
    let err_lambda = spectrum_error(&lambda_hat, A_MAX)?;
    Ok(SpectrumEstimate {
        n_d: km.n_d(),
        n_mc,
        t: km.t,
        eigvals: spec.values.iter().take(A_MAX + 1).copied().collect(),
        lambda_hat,
        skipped: rates.skipped,
        err_lambda,
        max_imag: spec.max_imag,
    })
}

/// max_ij |K_ij − 1/n_d|·n_d.
pub fn stationarity_deviation(km: &KernelMatrix) -> f64 {
    let n = km.n_d() as f64;
    km.k.iter().map(|v| (v - 1.0 / n).abs() * n).fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize)]
pub struct ReferenceRun {
    pub config: ReferenceConfig,
    pub spectrum: SpectrumEstimate,
    /// ȳ(n), σ̄(n) for n = 1..=N.
    pub y_bar: Vec<f64>,
    pub sigma_bar: Vec<f64>,
    /// Stationarity deviation of K̂(NΔt), when N differs from the spectrum instant.
    pub stationarity: Option<f64>,
}

pub struct ReferenceArtifacts {
    pub model: GkdeModel,
    pub traj: IsdeTrajectorySet,
    pub run: ReferenceRun,
}

/// Simulates the reference diffusion and estimates the spectrum at t_index·Δt.
pub fn run_reference(cfg: &ReferenceConfig) -> Result<ReferenceArtifacts> {
    if cfg.t_index == 0 || cfg.t_index > cfg.n_steps {
        return Err(Error::InvalidInput(format!("t_index must lie in 1..={}", cfg.n_steps)));
    }
    let model = GkdeModel::new(gaussian_training(cfg.n_d, cfg.seed)?);
    let mut icfg = IsdeConfig::from_delta_t(&model, cfg.delta_t, cfg.n_steps, cfg.n_mc, cfg.seed);
    let mut ns = vec![cfg.t_index];
    if cfg.n_steps != cfg.t_index {
        ns.push(cfg.n_steps);
    }
    icfg.retain = Some(ns.clone());
    let traj = simulate(&model, &icfg)?;
    let kms = transient_exact_matrices(&model, &traj, &ns)?;
    let spectrum = spectrum_from_kernel(&kms[0], cfg.n_mc)?;
    let stationarity = kms.get(1).map(stationarity_deviation);
    let (y_bar, sigma_bar) = convergence_curves(&traj);
    let run = ReferenceRun { config: cfg.clone(), spectrum, y_bar, sigma_bar, stationarity };
    Ok(ReferenceArtifacts { model, traj, run })
}
