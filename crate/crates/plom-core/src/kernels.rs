//! Kernel matrices on the training points and their reduced eigenbases.
//!
//! * DMAPS: 𝒦_DM(i,j) = exp(-|η^i - η^j|²/(4ε)), K_DM = B⁻¹ 𝒦_DM.
//! * Exact transient: K̂(nΔt) = B̂⁻¹ 𝒦̂(nΔt), a kernel density estimate of the
//!   transition density with the anisotropic bandwidth s_SB σ_n.
//! * Connected transient: K̃(nΔt) = B⁻¹ 𝒦(nΔt), the same construction
//!   rescaled so that K̃(Δt) → K_DM as Δt → 0.
//!
//! Bases come from the symmetric matrix P^S = (P + Pᵀ)/2 with
//! P = B^{-1/2} 𝒦 B^{-1/2}; eigenvectors are mapped back by g = B^{-1/2} φ.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::data_model::TrainingSet;
use crate::error::{Error, Result};
use crate::gkde::{silverman, GkdeModel};
use crate::isde::IsdeTrajectorySet;
use crate::linalg::{exp_in_place_sum, sym_eigen_desc, sym_eigenvalues_desc};

/// Realizations accumulated per block before a compensated merge.
pub const KERNEL_BLOCK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub enum KernelKind {
    TransientExact(usize),
    TransientConnected(usize),
    Dmaps,
}

#[derive(Clone, Debug)]
pub struct KernelMatrix {
    pub kind: KernelKind,
    pub t: f64,
    /// Unnormalized kernel 𝒦.
    pub raw: DMatrix<f64>,
    /// Diagonal of B.
    pub b_diag: DVector<f64>,
    /// Normalized kernel K = B⁻¹ 𝒦.
    pub k: DMatrix<f64>,
}

impl KernelMatrix {
    fn new(kind: KernelKind, t: f64, raw: DMatrix<f64>, b_diag: DVector<f64>) -> Self {
        let mut k = raw.clone();
        for (i, &b) in b_diag.iter().enumerate() {
            k.row_mut(i).scale_mut(1.0 / b);
        }
        Self { kind, t, raw, b_diag, k }
    }

    pub fn n_d(&self) -> usize {
        self.raw.nrows()
    }

    /// P^S = sym(B^{-1/2} 𝒦 B^{-1/2}).
    pub fn symmetric_form(&self) -> DMatrix<f64> {
        let n = self.n_d();
        let r: Vec<f64> = self.b_diag.iter().map(|b| 1.0 / b.sqrt()).collect();
        DMatrix::from_fn(n, n, |i, j| 0.5 * r[i] * r[j] * (self.raw[(i, j)] + self.raw[(j, i)]))
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelBasis {
    /// All eigenvalues of P^S, descending.
    pub eigvals: Vec<f64>,
    /// [g] = B^{-1/2} [φ], n_d × m.
    #[serde(skip)]
    pub g: DMatrix<f64>,
    /// Orthonormal eigenvectors [φ], n_d × m.
    #[serde(skip)]
    pub phi: DMatrix<f64>,
    #[serde(skip)]
    pub b_diag: DVector<f64>,
    pub m: usize,
    pub eps_dm: Option<f64>,
    /// b_{m+1}/b_m.
    pub jump: f64,
    pub warnings: Vec<String>,
}

/// m_opt = ν + 1.
pub fn m_opt(nu: usize) -> usize {
    nu + 1
}

fn pairwise_sq_dist(eta: &DMatrix<f64>) -> DMatrix<f64> {
    let n = eta.ncols();
    let mut d = DMatrix::zeros(n, n);
    for j in 0..n {
        for i in 0..j {
            let v = (eta.column(i) - eta.column(j)).norm_squared();
            d[(i, j)] = v;
            d[(j, i)] = v;
        }
    }
    d
}

fn dmaps_from_dist(d2: &DMatrix<f64>, eps: f64) -> KernelMatrix {
    let raw = d2.map(|v| (-v / (4.0 * eps)).exp());
    let b = DVector::from_iterator(raw.nrows(), raw.row_iter().map(|r| r.sum()));
    KernelMatrix::new(KernelKind::Dmaps, 0.0, raw, b)
}

pub fn dmaps_matrix(ts: &TrainingSet, eps_dm: f64) -> Result<KernelMatrix> {
    if !(eps_dm > 0.0 && eps_dm.is_finite()) {
        return Err(Error::InvalidInput(format!("eps_dm must be positive, got {eps_dm}")));
    }
    Ok(dmaps_from_dist(&pairwise_sq_dist(ts.eta()), eps_dm))
}

/// Eigenbasis of any kernel matrix, truncated to m columns.
///
/// Negative eigenvalues that would fall inside the leading m are dropped from
/// the truncated basis and reported in `warnings`.
pub fn transient_basis(km: &KernelMatrix, m: usize) -> Result<KernelBasis> {
    let n = km.n_d();
    if m == 0 || m > n {
        return Err(Error::InvalidInput(format!("truncation {m} outside 1..={n}")));
    }
    let (vals, vecs) = sym_eigen_desc(&km.symmetric_form());
    let mut warnings = Vec::new();
    let keep = vals.iter().take(m).take_while(|&&v| v > 0.0).count();
    if keep < m {
        warnings.push(format!(
            "{} non-positive eigenvalue(s) inside the leading {m}; basis truncated to {keep} columns",
            m - keep
        ));
    }
    let phi = vecs.columns(0, keep).into_owned();
    let mut g = phi.clone();
    for (i, &b) in km.b_diag.iter().enumerate() {
        g.row_mut(i).scale_mut(1.0 / b.sqrt());
    }
    let jump = if m < n { vals[m] / vals[m - 1] } else { 0.0 };
    Ok(KernelBasis {
        eigvals: vals.iter().copied().collect(),
        g,
        phi,
        b_diag: km.b_diag.clone(),
        m: keep,
        eps_dm: None,
        jump,
        warnings,
    })
}

/// Eigenvalues of the normalized kernel K itself.
#[derive(Debug, Clone, Serialize)]
pub struct KernelSpectrum {
    /// Real parts, sorted descending.
    pub values: Vec<f64>,
    /// Largest imaginary part magnitude found.
    pub max_imag: f64,
}

/// Spectrum of K = B⁻¹𝒦 through a real Schur decomposition.
///
/// K is not similar to a symmetric matrix when 𝒦 is only approximately
/// symmetric, so the symmetrized form P^S shifts its leading eigenvalues.
/// Falls back to the symmetric part of K if the Schur iteration fails.
pub fn kernel_spectrum(km: &KernelMatrix) -> KernelSpectrum {
    let ev = km.k.complex_eigenvalues();
    if ev.iter().all(|z| z.re.is_finite() && z.im.is_finite()) {
        let mut values: Vec<f64> = ev.iter().map(|z| z.re).collect();
        values.sort_by(|a, b| b.total_cmp(a));
        let max_imag = ev.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
        KernelSpectrum { values, max_imag }
    } else {
        let sym = (&km.k + km.k.transpose()) * 0.5;
        KernelSpectrum { values: sym_eigenvalues_desc(&sym), max_imag: 0.0 }
    }
}

/// Search settings for the DMAPS smoothing parameter.
#[derive(Clone, Copy, Debug, Serialize)]
pub struct EpsSearch {
    pub log10_min: f64,
    pub log10_max: f64,
    pub grid: usize,
    pub refine: usize,
}

impl Default for EpsSearch {
    fn default() -> Self {
        Self { log10_min: -2.0, log10_max: 4.0, grid: 31, refine: 40 }
    }
}

/// DMAPS basis with m = ν + 1 and the smallest ε whose jump b_{m+1}/b_m
/// reaches `jump_target`.
pub fn dmaps_basis(ts: &TrainingSet, jump_target: f64) -> Result<KernelBasis> {
    dmaps_basis_with(ts, jump_target, EpsSearch::default())
}

pub fn dmaps_basis_with(ts: &TrainingSet, jump_target: f64, search: EpsSearch) -> Result<KernelBasis> {
    let m = m_opt(ts.nu());
    if ts.n_d() <= m {
        return Err(Error::InvalidInput(format!("need n_d > ν + 1 = {m}, found {}", ts.n_d())));
    }
    let d2 = pairwise_sq_dist(ts.eta());
    let jump_at = |log_eps: f64| -> f64 {
        let vals = sym_eigenvalues_desc(&dmaps_from_dist(&d2, 10f64.powf(log_eps)).symmetric_form());
        vals[m] / vals[m - 1]
    };
    let step = (search.log10_max - search.log10_min) / (search.grid - 1) as f64;
    let mut prev: Option<f64> = None;
    let mut found: Option<(f64, f64)> = None;
    let mut best = (f64::NAN, f64::INFINITY);
    for g in 0..search.grid {
        let x = search.log10_min + step * g as f64;
        let j = jump_at(x);
        if j.abs() < best.1 {
            best = (x, j.abs());
        }
        if j <= jump_target {
            found = Some(match prev {
                None => (x, x),
                Some(p) => (p, x),
            });
            break;
        }
        prev = Some(x);
    }
    let (lo, hi) = match found {
        Some(b) => b,
        None => {
            return Err(Error::NoEpsilonFound { eps: 10f64.powf(best.0), jump: best.1 });
        }
    };
    // bisection toward the smallest ε that meets the target
    let (mut a, mut b) = (lo, hi);
    if a < b {
        for _ in 0..search.refine {
            let c = 0.5 * (a + b);
            if jump_at(c) <= jump_target {
                b = c;
            } else {
                a = c;
            }
        }
    }
    let eps = 10f64.powf(b);
    let mut basis = transient_basis(&dmaps_from_dist(&d2, eps), m)?;
    basis.eps_dm = Some(eps);
    Ok(basis)
}

/// DMAPS basis at a given ε.
pub fn dmaps_basis_at(ts: &TrainingSet, eps_dm: f64, m: usize) -> Result<KernelBasis> {
    let mut b = transient_basis(&dmaps_matrix(ts, eps_dm)?, m)?;
    b.eps_dm = Some(eps_dm);
    Ok(b)
}

/// Per-column parameters of the transient kernels:
/// term = exp(log_pref_j - Σ_k (a_kj (η_k^i - y_kj))²).
struct ColumnForm {
    a: Vec<f64>,
    log_pref: Vec<f64>,
}

fn check_sigma(sigma: &DMatrix<f64>) -> Result<()> {
    for j in 0..sigma.ncols() {
        for k in 0..sigma.nrows() {
            if !(sigma[(k, j)] > 0.0) {
                return Err(Error::DegenerateSigma { k, j });
            }
        }
    }
    Ok(())
}

/// Accumulates S_n(i,j) = Σ_ℓ exp(-Σ_k (a_kj (η_k^i - y_kj^ℓ))²) for every n
/// in `ns`, then returns exp(log_pref_j) S_n(i,j) / n_MC.
fn accumulate(
    model: &GkdeModel,
    traj: &IsdeTrajectorySet,
    ns: &[usize],
    forms: &[ColumnForm],
) -> Result<Vec<DMatrix<f64>>> {
    let (nu, n_d, n_mc) = (traj.nu(), traj.n_d(), traj.n_mc());
    let eta = model.training().eta();
    let mut acc: Vec<Vec<f64>> = vec![vec![0.0; n_d * n_d]; ns.len()];
    let mut comp: Vec<Vec<f64>> = vec![vec![0.0; n_d * n_d]; ns.len()];
    let mut l0 = 0;
    while l0 < n_mc {
        let l1 = (l0 + KERNEL_BLOCK).min(n_mc);
        let states = traj.block_states(model, ns, l0, l1)?;
        let nb = l1 - l0;
        for (s, form) in forms.iter().enumerate() {
            let st: &[f64] = &states[s];
            acc[s]
                .par_chunks_mut(n_d)
                .zip(comp[s].par_chunks_mut(n_d))
                .enumerate()
                .for_each_init(
                    || (vec![0.0; nu * nb], vec![0.0; nu * n_d], vec![0.0; nb]),
                    |(u, v, q), (j, (col, cc))| {
                        let a = &form.a[j * nu..(j + 1) * nu];
                        for k in 0..nu {
                            for l in 0..nb {
                                u[k * nb + l] = a[k] * st[l * nu * n_d + j * nu + k];
                            }
                            for i in 0..n_d {
                                v[k * n_d + i] = a[k] * eta[(k, i)];
                            }
                        }
                        for i in 0..n_d {
                            q.iter_mut().for_each(|x| *x = 0.0);
                            for k in 0..nu {
                                let vi = v[k * n_d + i];
                                for (x, &ul) in q.iter_mut().zip(&u[k * nb..(k + 1) * nb]) {
                                    let d = vi - ul;
                                    *x -= d * d;
                                }
                            }
                            let part = exp_in_place_sum(q);
                            let t = col[i] + part;
                            if col[i].abs() >= part.abs() {
                                cc[i] += (col[i] - t) + part;
                            } else {
                                cc[i] += (part - t) + col[i];
                            }
                            col[i] = t;
                        }
                    },
                );
        }
        l0 = l1;
    }
    let inv = 1.0 / n_mc as f64;
    Ok(forms
        .iter()
        .enumerate()
        .map(|(s, form)| {
            DMatrix::from_fn(n_d, n_d, |i, j| {
                let idx = j * n_d + i;
                (acc[s][idx] + comp[s][idx]) * inv * form.log_pref[j].exp()
            })
        })
        .collect())
}

/// s_SB = (4/(n_MC(2+ν)))^{1/(ν+4)}.
pub fn s_sb(nu: usize, n_mc: usize) -> f64 {
    silverman(nu, n_mc)
}

/// K̂(nΔt) for every instant in `ns`.
pub fn transient_exact_matrices(
    model: &GkdeModel,
    traj: &IsdeTrajectorySet,
    ns: &[usize],
) -> Result<Vec<KernelMatrix>> {
    check_instants(traj, ns)?;
    let (nu, n_d) = (traj.nu(), traj.n_d());
    let sb = s_sb(nu, traj.n_mc());
    let s_hat = model.bandwidths().s_hat;
    let mut forms = Vec::with_capacity(ns.len());
    for &n in ns {
        let sigma = traj.sigma(n);
        check_sigma(sigma)?;
        let mut a = vec![0.0; nu * n_d];
        let mut log_pref = vec![0.0; n_d];
        for j in 0..n_d {
            let mut lp = nu as f64 * (s_hat.ln() - sb.ln());
            for k in 0..nu {
                let sg = sigma[(k, j)];
                a[j * nu + k] = 1.0 / (std::f64::consts::SQRT_2 * sb * sg);
                lp -= sg.ln();
            }
            log_pref[j] = lp;
        }
        forms.push(ColumnForm { a, log_pref });
    }
    let raws = accumulate(model, traj, ns, &forms)?;
    let b = DVector::from_iterator(
        n_d,
        (0..n_d).map(|i| {
            let y: Vec<f64> = model.training().eta().column(i).iter().copied().collect();
            (model.log_xi(&y) + (n_d as f64).ln()).exp()
        }),
    );
    let dt = traj.config().delta_t;
    Ok(raws
        .into_iter()
        .zip(ns)
        .map(|(raw, &n)| KernelMatrix::new(KernelKind::TransientExact(n), n as f64 * dt, raw, b.clone()))
        .collect())
}

pub fn transient_exact_matrix(model: &GkdeModel, traj: &IsdeTrajectorySet, n: usize) -> Result<KernelMatrix> {
    Ok(transient_exact_matrices(model, traj, &[n])?.remove(0))
}

/// K̃(nΔt) for every instant in `ns`.
///
/// The per-column prefactor is (Π_k σ_kj/√Δt)⁻¹, evaluated in log space, so
/// that σ_kj → √Δt at n = 1 gives 𝒦 → 𝒦_DM.
pub fn transient_connected_matrices(
    model: &GkdeModel,
    traj: &IsdeTrajectorySet,
    ns: &[usize],
    eps_dm: f64,
) -> Result<Vec<KernelMatrix>> {
    check_instants(traj, ns)?;
    if !(eps_dm > 0.0) {
        return Err(Error::InvalidInput(format!("eps_dm must be positive, got {eps_dm}")));
    }
    let (nu, n_d) = (traj.nu(), traj.n_d());
    let dt = traj.config().delta_t;
    let sq_dt = dt.sqrt();
    let c = 1.0 / (2.0 * eps_dm.sqrt());
    let mut forms = Vec::with_capacity(ns.len());
    for &n in ns {
        let sigma = traj.sigma(n);
        check_sigma(sigma)?;
        let mut a = vec![0.0; nu * n_d];
        let mut log_pref = vec![0.0; n_d];
        for j in 0..n_d {
            let mut lp = 0.0;
            for k in 0..nu {
                let r = sigma[(k, j)] / sq_dt;
                a[j * nu + k] = c / r;
                lp -= r.ln();
            }
            log_pref[j] = lp;
        }
        forms.push(ColumnForm { a, log_pref });
    }
    let raws = accumulate(model, traj, ns, &forms)?;
    let d2 = pairwise_sq_dist(model.training().eta());
    let b = DVector::from_iterator(
        n_d,
        (0..n_d).map(|i| d2.row(i).iter().map(|v| (-v / (4.0 * eps_dm)).exp()).sum::<f64>()),
    );
    Ok(raws
        .into_iter()
        .zip(ns)
        .map(|(raw, &n)| KernelMatrix::new(KernelKind::TransientConnected(n), n as f64 * dt, raw, b.clone()))
        .collect())
}

pub fn transient_connected_matrix(
    model: &GkdeModel,
    traj: &IsdeTrajectorySet,
    n: usize,
    eps_dm: f64,
) -> Result<KernelMatrix> {
    Ok(transient_connected_matrices(model, traj, &[n], eps_dm)?.remove(0))
}

fn check_instants(traj: &IsdeTrajectorySet, ns: &[usize]) -> Result<()> {
    if ns.is_empty() || ns.iter().any(|&n| n == 0 || n > traj.n_steps()) {
        return Err(Error::InvalidInput(format!("instants must lie in 1..={}", traj.n_steps())));
    }
    Ok(())
}

#[derive(Clone, Debug, Serialize)]
pub struct RateEstimates {
    /// (index α starting at 0, λ̂_α) for each positive eigenvalue.
    pub rates: Vec<(usize, f64)>,
    /// Indices of non-positive eigenvalues that were skipped.
    pub skipped: Vec<usize>,
}

impl RateEstimates {
    pub fn values(&self) -> Vec<f64> {
        self.rates.iter().map(|&(_, v)| v).collect()
    }
}

/// λ̂_α = -log(b̂_α)/t over the first `count` eigenvalues.
pub fn rate_estimates(eigvals: &[f64], t: f64, count: usize) -> RateEstimates {
    let mut rates = Vec::new();
    let mut skipped = Vec::new();
    for (a, &b) in eigvals.iter().take(count).enumerate() {
        if b > 0.0 {
            rates.push((a, -b.ln() / t));
        } else {
            skipped.push(a);
        }
    }
    RateEstimates { rates, skipped }
}
