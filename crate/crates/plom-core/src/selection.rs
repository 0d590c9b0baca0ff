//! Comparison of transient bases against the DMAPS basis and the choice of
//! the optimal transient instant.

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::info_metrics::{normalized_mi, solve_chi, ChiSolution};

/// Admissibility threshold τ_c used by default.
pub const DEFAULT_TAU_C: f64 = 0.002;
/// Singular values below this fraction of the largest count as zero in rank checks.
pub const RANK_RTOL: f64 = 1e-10;

fn normalize_columns(g: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let mut out = g.clone();
    for (b, mut c) in out.column_iter_mut().enumerate() {
        let n = c.norm();
        if !(n > 0.0) {
            return Err(Error::RankDeficient(format!("basis column {b} is zero")));
        }
        c /= n;
    }
    Ok(out)
}

fn check_rank(g: &DMatrix<f64>, what: &str) -> Result<()> {
    let sv = g.singular_values();
    let smax = sv.max();
    let rank = sv.iter().filter(|&&s| s > RANK_RTOL * smax).count();
    if rank < g.ncols() {
        return Err(Error::RankDeficient(format!("{what} has rank {rank} < {}", g.ncols())));
    }
    Ok(())
}

/// γ = arccos σ_min(ĝ_aᵀ ĝ_b) in degrees, with ĝ the column-normalized bases.
pub fn subspace_angle(ga: &DMatrix<f64>, gb: &DMatrix<f64>) -> Result<f64> {
    if ga.shape() != gb.shape() {
        return Err(Error::ShapeMismatch(format!("bases {:?} and {:?}", ga.shape(), gb.shape())));
    }
    let (a, b) = (normalize_columns(ga)?, normalize_columns(gb)?);
    check_rank(&a, "first basis")?;
    check_rank(&b, "second basis")?;
    let cross = a.transpose() * b;
    let smin = cross.singular_values().min().clamp(0.0, 1.0);
    Ok(smin.acos().to_degrees())
}

/// Largest principal angle between the spans, in degrees.
///
/// Unlike [`subspace_angle`] this is zero for any two bases of the same
/// subspace, whatever the correlation between their columns.
pub fn span_angle(ga: &DMatrix<f64>, gb: &DMatrix<f64>) -> Result<f64> {
    if ga.shape() != gb.shape() {
        return Err(Error::ShapeMismatch(format!("bases {:?} and {:?}", ga.shape(), gb.shape())));
    }
    check_rank(ga, "first basis")?;
    check_rank(gb, "second basis")?;
    let qa = ga.clone().qr().q();
    let qb = gb.clone().qr().q();
    let smin = (qa.transpose() * qb).singular_values().min().clamp(0.0, 1.0);
    Ok(smin.acos().to_degrees())
}

/// d̂² = (1/n_MCH) Σ_ℓ ‖η_ar^ℓ − η_d‖²_F / ‖η_d‖²_F.
pub fn concentration(learned: &[DMatrix<f64>], eta_d: &DMatrix<f64>) -> Result<f64> {
    if learned.is_empty() {
        return Err(Error::InvalidInput("no learned realizations".into()));
    }
    let den = eta_d.norm_squared();
    let mut acc = 0.0;
    for (l, m) in learned.iter().enumerate() {
        if m.shape() != eta_d.shape() {
            return Err(Error::ShapeMismatch(format!(
                "learned realization {l} is {:?}, training is {:?}",
                m.shape(),
                eta_d.shape()
            )));
        }
        acc += (m - eta_d).norm_squared();
    }
    Ok(acc / learned.len() as f64 / den)
}

/// {n : d²(n)/ν ≤ τ_c} from (n, d²) pairs.
pub fn admissible_set(d2_curve: &[(usize, f64)], nu: usize, tau_c: f64) -> Result<Vec<usize>> {
    if !(tau_c > 0.0) {
        return Err(Error::InvalidInput(format!("tau_c must be positive, got {tau_c}")));
    }
    let set: Vec<usize> =
        d2_curve.iter().filter(|(_, d2)| d2 / nu as f64 <= tau_c).map(|&(n, _)| n).collect();
    if set.is_empty() {
        return Err(Error::EmptyAdmissibleSet);
    }
    Ok(set)
}

/// argmin of the MI curve; ties go to the smaller n.
pub fn select_optimal(mi_curve: &[(usize, f64)]) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(n, v) in mi_curve {
        best = match best {
            Some((bn, bv)) if bv < v || (bv == v && bn < n) => Some((bn, bv)),
            _ => Some((n, v)),
        };
    }
    best.map(|b| b.0).ok_or(Error::EmptyAdmissibleSet)
}

#[derive(Clone, Debug, Serialize)]
pub struct SelectionRecord {
    pub n: usize,
    pub t: f64,
    pub gamma_deg: f64,
    pub d2_over_nu: f64,
    pub kl: f64,
    pub entropy: f64,
    pub mi: f64,
    pub admissible: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct NormalizedMi {
    pub h: f64,
    pub db: f64,
    pub tb: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelectionReport {
    pub records: Vec<SelectionRecord>,
    pub tau_c: f64,
    /// None when no instant is admissible and the DMAPS basis is used instead.
    pub n_opt: Option<usize>,
    pub mi_h: f64,
    pub mi_db: f64,
    pub chi: Option<ChiSolution>,
    pub normalized: Option<NormalizedMi>,
    /// Î(H) < Î(H_DB).
    pub mi_h_below_db: bool,
    /// Î(H) ≤ Î(H_TB; n_opt) < Î(H_DB).
    pub improvement: bool,
    pub warnings: Vec<String>,
}

/// Fills admissibility, picks n_opt and solves for χ.
///
/// `n_samp_h` and `n_samp_ar` are the realization counts actually used by
/// the estimators for the training set and the learned sets.
pub fn build_report(
    mut records: Vec<SelectionRecord>,
    nu: usize,
    tau_c: f64,
    mi_h: f64,
    mi_db: f64,
    n_samp_h: usize,
    n_samp_ar: usize,
) -> Result<SelectionReport> {
    let mut warnings = Vec::new();
    let d2: Vec<(usize, f64)> = records.iter().map(|r| (r.n, r.d2_over_nu * nu as f64)).collect();
    let admissible = match admissible_set(&d2, nu, tau_c) {
        Ok(s) => s,
        Err(Error::EmptyAdmissibleSet) => {
            warnings.push("no admissible instant; falling back to the DMAPS basis".into());
            Vec::new()
        }
        Err(e) => return Err(e),
    };
    for r in records.iter_mut() {
        r.admissible = admissible.contains(&r.n);
    }
    let mi_curve: Vec<(usize, f64)> = records.iter().filter(|r| r.admissible).map(|r| (r.n, r.mi)).collect();
    let n_opt = if mi_curve.is_empty() { None } else { Some(select_optimal(&mi_curve)?) };
    let mi_h_below_db = mi_h < mi_db;
    if !mi_h_below_db {
        warnings.push(format!("training MI {mi_h} is not below the DMAPS-basis MI {mi_db}"));
    }
    let mut chi = None;
    let mut normalized = None;
    let mut improvement = false;
    if let Some(n) = n_opt {
        let mi_tb = records.iter().find(|r| r.n == n).map(|r| r.mi).unwrap_or(f64::NAN);
        improvement = mi_h <= mi_tb && mi_tb < mi_db;
        match solve_chi(mi_h, mi_tb, n_samp_h, n_samp_ar) {
            Ok(c) => {
                if c.valid {
                    normalized = Some(NormalizedMi {
                        h: normalized_mi(mi_h, n_samp_h, c.chi)?,
                        db: normalized_mi(mi_db, n_samp_ar, c.chi)?,
                        tb: normalized_mi(mi_tb, n_samp_ar, c.chi)?,
                    });
                } else {
                    warnings.push(format!("chi = {} gives a non-positive normalization", c.chi));
                }
                chi = Some(c);
            }
            Err(e) => warnings.push(format!("chi not solved: {e}")),
        }
    }
    Ok(SelectionReport {
        records,
        tau_c,
        n_opt,
        mi_h,
        mi_db,
        chi,
        normalized,
        mi_h_below_db,
        improvement,
        warnings,
    })
}
