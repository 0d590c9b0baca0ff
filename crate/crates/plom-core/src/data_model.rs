//! Raw datasets, PCA reduction and the normalized training matrix.
//!
//! The training matrix holds one realization per column, has zero empirical
//! mean and identity empirical covariance (1/(n_d-1) estimator). Every other
//! module assumes this normalization.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::linalg::{column_mean, covariance, sym_eigen_desc};

/// Tolerance on the norm of the empirical mean.
pub const MEAN_TOL: f64 = 1e-8;
/// Tolerance on the Frobenius distance between the empirical covariance and I.
pub const COV_TOL: f64 = 1e-6;
/// Relative cutoff below which PCA eigenvalues count as zero.
pub const EIG_REL_CUTOFF: f64 = 1e-12;

#[derive(Clone, Debug)]
pub struct RawDataset {
    x: DMatrix<f64>,
}

impl RawDataset {
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 {
            return Err(Error::InvalidInput("dataset has no rows".into()));
        }
        if x.ncols() < 2 {
            return Err(Error::InvalidInput(format!(
                "need at least 2 realizations, found {}",
                x.ncols()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dataset contains non-finite values".into()));
        }
        Ok(Self { x })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn n_x(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_d(&self) -> usize {
        self.x.ncols()
    }
}

#[derive(Clone, Debug)]
pub struct PcaReduction {
    pub mean: DVector<f64>,
    pub eigvals: DVector<f64>,
    pub eigvecs: DMatrix<f64>,
    pub nu: usize,
    pub err: f64,
}

impl PcaReduction {
    /// Maps normalized realizations back to the original coordinates.
    pub fn reconstruct(&self, eta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if eta.nrows() != self.nu {
            return Err(Error::DimensionMismatch { expected: self.nu, found: eta.nrows() });
        }
        let scale = DMatrix::from_diagonal(&self.eigvals.map(f64::sqrt));
        let mut x = &self.eigvecs * scale * eta;
        for mut col in x.column_iter_mut() {
            col += &self.mean;
        }
        Ok(x)
    }
}

#[derive(Clone, Debug)]
pub struct TrainingSet {
    eta: DMatrix<f64>,
}

impl TrainingSet {
    /// Wraps a matrix whose columns are realizations. Normalization is not
    /// enforced here; see [`validate_normalization`] and [`TrainingSet::normalized`].
    pub fn new(eta: DMatrix<f64>) -> Result<Self> {
        if eta.nrows() == 0 || eta.ncols() == 0 {
            return Err(Error::InvalidInput("empty training matrix".into()));
        }
        if eta.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("training matrix contains non-finite values".into()));
        }
        Ok(Self { eta })
    }

    /// Whitens arbitrary full-rank data so that the result satisfies the
    /// normalization contract (no dimension reduction).
    pub fn normalized(x: DMatrix<f64>) -> Result<Self> {
        let raw = RawDataset::new(x)?;
        let (pca, ts) = pca_reduce_full(&raw)?;
        if pca.nu != raw.n_x() {
            return Err(Error::RankDeficient(format!(
                "data of dimension {} has numerical rank {}",
                raw.n_x(),
                pca.nu
            )));
        }
        Ok(ts)
    }

    pub fn eta(&self) -> &DMatrix<f64> {
        &self.eta
    }

    pub fn into_eta(self) -> DMatrix<f64> {
        self.eta
    }

    pub fn nu(&self) -> usize {
        self.eta.nrows()
    }

    pub fn n_d(&self) -> usize {
        self.eta.ncols()
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct NormalizationDiagnostics {
    pub mean_norm: f64,
    pub cov_dev: f64,
    pub pass: bool,
}

pub fn validate_normalization(ts: &TrainingSet) -> NormalizationDiagnostics {
    let nu = ts.nu();
    let mean_norm = column_mean(ts.eta()).norm();
    let cov_dev = if ts.n_d() > 1 {
        (covariance(ts.eta()) - DMatrix::identity(nu, nu)).norm()
    } else {
        f64::INFINITY
    };
    NormalizationDiagnostics { mean_norm, cov_dev, pass: mean_norm <= MEAN_TOL && cov_dev <= COV_TOL }
}

/// PCA reduction keeping the smallest ν with err_X(ν) ≤ eps_pca.
pub fn pca_reduce(raw: &RawDataset, eps_pca: f64) -> Result<(PcaReduction, TrainingSet)> {
    if !(eps_pca > 0.0 && eps_pca < 1.0) {
        return Err(Error::InvalidInput(format!("eps_pca must lie in (0,1), got {eps_pca}")));
    }
    reduce(raw, Some(eps_pca))
}

/// PCA keeping every numerically nonzero direction.
pub fn pca_reduce_full(raw: &RawDataset) -> Result<(PcaReduction, TrainingSet)> {
    reduce(raw, None)
}

fn reduce(raw: &RawDataset, eps_pca: Option<f64>) -> Result<(PcaReduction, TrainingSet)> {
    let x = raw.x();
    let mean = column_mean(x);
    let c = covariance(x);
    let (vals, vecs) = sym_eigen_desc(&c);
    let zmax = vals[0];
    if zmax <= f64::EPSILON {
        return Err(Error::DegenerateData("all covariance eigenvalues vanish".into()));
    }
    let total: f64 = vals.iter().map(|&v| v.max(0.0)).sum();
    let usable = vals.iter().take_while(|&&v| v > EIG_REL_CUTOFF * zmax).count();

    let mut nu = usable;
    let mut acc = 0.0;
    if let Some(eps) = eps_pca {
        for (a, &z) in vals.iter().take(usable).enumerate() {
            acc += z;
            if 1.0 - acc / total <= eps {
                nu = a + 1;
                break;
            }
        }
    }
    if nu == 0 {
        return Err(Error::RankDeficient("retained dimension would be zero".into()));
    }
    let kept: f64 = vals.iter().take(nu).sum();
    let err = (1.0 - kept / total).max(0.0);

    let eigvals = DVector::from_iterator(nu, vals.iter().take(nu).copied());
    let eigvecs = vecs.columns(0, nu).into_owned();
    let mut centered = x.clone();
    for mut col in centered.column_iter_mut() {
        col -= &mean;
    }
    let inv_sqrt = DMatrix::from_diagonal(&eigvals.map(|z| 1.0 / z.sqrt()));
    let eta = inv_sqrt * eigvecs.transpose() * centered;
    Ok((PcaReduction { mean, eigvals, eigvecs, nu, err }, TrainingSet::new(eta)?))
}

/// err_X(ν) for every ν, computed directly from the sorted eigenvalues.
pub fn energy_error_curve(raw: &RawDataset) -> Vec<f64> {
    let (vals, _) = sym_eigen_desc(&covariance(raw.x()));
    let total: f64 = vals.iter().map(|&v| v.max(0.0)).sum();
    let mut acc = 0.0;
    vals.iter()
        .map(|&z| {
            acc += z.max(0.0);
            (1.0 - acc / total).max(0.0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn gaussian(rows: usize, cols: usize, seed: u64) -> DMatrix<f64> {
        let mut s = Stream::new(seed, 0, 0);
        DMatrix::from_fn(rows, cols, |_, _| s.normal())
    }

    #[test]
    fn rejects_single_realization() {
        assert!(RawDataset::new(DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn constant_data_is_degenerate() {
        let raw = RawDataset::new(DMatrix::from_element(3, 10, 2.5)).unwrap();
        assert!(matches!(pca_reduce(&raw, 0.01), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn white_data_keeps_all_dimensions() {
        let raw = RawDataset::new(gaussian(4, 500, 1)).unwrap();
        let (pca, ts) = pca_reduce(&raw, 1e-9).unwrap();
        assert_eq!(pca.nu, 4);
        assert!(validate_normalization(&ts).pass);
        let g = pca.eigvecs.transpose() * &pca.eigvecs;
        assert!((g - DMatrix::identity(4, 4)).norm() < 1e-10);
    }

    #[test]
    fn dominant_direction_gives_one_component() {
        // Exact variances 100 and 1 along the axes: err_X(1) = 1/101.
        let n = 400;
        let mut s = Stream::new(3, 0, 0);
        let mut a: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        let mut b: Vec<f64> = (0..n).map(|_| s.normal()).collect();
        for v in [&mut a, &mut b] {
            let m = v.iter().sum::<f64>() / n as f64;
            v.iter_mut().for_each(|x| *x -= m);
        }
        // orthogonalize b against a, then scale both to exact unit variance
        let ab: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let aa: f64 = a.iter().map(|x| x * x).sum();
        b.iter_mut().zip(&a).for_each(|(y, x)| *y -= ab / aa * x);
        for v in [&mut a, &mut b] {
            let sd = (v.iter().map(|x| x * x).sum::<f64>() / (n as f64 - 1.0)).sqrt();
            v.iter_mut().for_each(|x| *x /= sd);
        }
        let x = DMatrix::from_fn(2, n, |k, j| if k == 0 { 10.0 * a[j] } else { b[j] });
        let raw = RawDataset::new(x).unwrap();
        let (pca, _) = pca_reduce(&raw, 0.05).unwrap();
        assert_eq!(pca.nu, 1);
        assert!((pca.err - 1.0 / 101.0).abs() < 1e-10);
    }

    #[test]
    fn full_basis_has_zero_error_and_reconstructs() {
        let raw = RawDataset::new(gaussian(3, 50, 5) * 3.0).unwrap();
        let (pca, ts) = pca_reduce_full(&raw).unwrap();
        assert_eq!(pca.nu, 3);
        assert!(pca.err < 1e-12);
        let back = pca.reconstruct(ts.eta()).unwrap();
        assert!((back - raw.x()).amax() < 1e-8);
    }

    #[test]
    fn shifted_column_fails_mean_check() {
        let raw = RawDataset::new(gaussian(2, 100, 9)).unwrap();
        let (_, ts) = pca_reduce_full(&raw).unwrap();
        let mut eta = ts.eta().clone();
        eta[(0, 0)] += 1.0;
        let d = validate_normalization(&TrainingSet::new(eta).unwrap());
        assert!(!d.pass);
        assert!(d.mean_norm > MEAN_TOL);
    }

    #[test]
    fn scaled_set_has_known_cov_deviation() {
        let raw = RawDataset::new(gaussian(3, 100, 11)).unwrap();
        let (_, ts) = pca_reduce_full(&raw).unwrap();
        let d = validate_normalization(&TrainingSet::new(ts.eta() * 2.0).unwrap());
        assert!((d.cov_dev - 3.0 * 3f64.sqrt()).abs() < 1e-8);
    }

    #[test]
    fn error_curve_non_increasing() {
        let raw = RawDataset::new(gaussian(6, 80, 13)).unwrap();
        let c = energy_error_curve(&raw);
        for w in c.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
        assert!(c[5].abs() < 1e-12);
    }
}
