//! Gaussian-KDE estimators of Kullback-Leibler divergence, mutual
//! information and entropy from sets of independent realizations, plus the
//! χ normalization used to compare mutual information across sample sizes.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gkde::silverman;
use crate::linalg::exp_in_place_sum;

/// Default cap on the number of realizations fed to the O(N²) estimators.
pub const DEFAULT_SUBSAMPLE_CAP: usize = 20_000;

#[derive(Clone, Debug)]
pub struct SampleSet {
    x: DMatrix<f64>,
    sigmas: Vec<f64>,
    s: f64,
    n_total: usize,
}

impl SampleSet {
    /// Realizations are the columns of `x` (ν × N).
    pub fn new(x: DMatrix<f64>) -> Result<Self> {
        let n_total = x.ncols();
        Self::build(x, n_total)
    }

    /// Keeps a uniform subsample of at most `cap` realizations, drawn without
    /// replacement with a fixed seed. `n_total` still reports the original size.
    pub fn capped(x: DMatrix<f64>, cap: usize, seed: u64) -> Result<Self> {
        let n_total = x.ncols();
        if cap == 0 || n_total <= cap {
            return Self::build(x, n_total);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, n_total, cap).into_vec();
        idx.sort_unstable();
        let sub = DMatrix::from_fn(x.nrows(), cap, |k, j| x[(k, idx[j])]);
        Self::build(sub, n_total)
    }

    fn build(x: DMatrix<f64>, n_total: usize) -> Result<Self> {
        let (nu, n) = x.shape();
        if nu == 0 {
            return Err(Error::InvalidInput("samples have zero dimension".into()));
        }
        if n < 2 {
            return Err(Error::InvalidInput(format!("need at least 2 realizations, found {n}")));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("samples contain non-finite values".into()));
        }
        let mut sigmas = Vec::with_capacity(nu);
        for k in 0..nu {
            let row = x.row(k);
            let m = row.mean();
            let v = row.iter().map(|a| (a - m) * (a - m)).sum::<f64>() / (n as f64 - 1.0);
            if !(v > 0.0) {
                return Err(Error::ZeroVariance(k));
            }
            sigmas.push(v.sqrt());
        }
        Ok(Self { s: silverman(nu, n), x, sigmas, n_total })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn nu(&self) -> usize {
        self.x.nrows()
    }

    /// Number of realizations used by the estimators.
    pub fn n(&self) -> usize {
        self.x.ncols()
    }

    /// Number of realizations before subsampling.
    pub fn n_total(&self) -> usize {
        self.n_total
    }

    pub fn sigmas(&self) -> &[f64] {
        &self.sigmas
    }

    pub fn s(&self) -> f64 {
        self.s
    }

    fn log_sigma_prod(&self) -> f64 {
        self.sigmas.iter().map(|s| s.ln()).sum()
    }

    /// Component-major coordinates divided by s σ_k.
    fn scaled(&self) -> Scaled {
        let (nu, n) = self.x.shape();
        let mut z = vec![0.0; nu * n];
        for k in 0..nu {
            let c = 1.0 / (self.s * self.sigmas[k]);
            for l in 0..n {
                z[k * n + l] = self.x[(k, l)] * c;
            }
        }
        Scaled { z, nu, n, scale: self.sigmas.iter().map(|sg| 1.0 / (self.s * sg)).collect() }
    }
}

struct Scaled {
    z: Vec<f64>,
    nu: usize,
    n: usize,
    scale: Vec<f64>,
}

impl Scaled {
    fn row(&self, k: usize) -> &[f64] {
        &self.z[k * self.n..(k + 1) * self.n]
    }

    /// log Σ_ℓ exp(-½ |q - z_ℓ|²) for a query already in scaled coordinates.
    fn lse(&self, q: &[f64], buf: &mut [f64]) -> f64 {
        buf.iter_mut().for_each(|v| *v = 0.0);
        for (k, &qk) in q.iter().enumerate() {
            for (b, &zl) in buf.iter_mut().zip(self.row(k)) {
                let d = qk - zl;
                *b += d * d;
            }
        }
        let qmin = buf.iter().copied().fold(f64::INFINITY, f64::min);
        buf.iter_mut().for_each(|v| *v = -0.5 * (*v - qmin));
        let sum = exp_in_place_sum(buf);
        sum.ln() - 0.5 * qmin
    }

    /// Query point of another set mapped into this set's scaled coordinates.
    fn map_query(&self, x: &DMatrix<f64>, l: usize, out: &mut [f64]) {
        for k in 0..self.nu {
            out[k] = x[(k, l)] * self.scale[k];
        }
    }
}

/// Averages f(ℓ') over all realizations with a deterministic, index-ordered sum.
fn ordered_mean<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    let parts: Vec<f64> = (0..n).into_par_iter().map(f).collect();
    parts.iter().sum::<f64>() / n as f64
}

/// D̂(p_X ‖ p_Y).
pub fn kl_divergence(px: &SampleSet, py: &SampleSet) -> Result<f64> {
    let nu = px.nu();
    if py.nu() != nu {
        return Err(Error::DimensionMismatch { expected: nu, found: py.nu() });
    }
    let (zx, zy) = (px.scaled(), py.scaled());
    let nx = px.n();
    let avg = ordered_mean(nx, |l| {
        let mut q = vec![0.0; nu];
        let mut bx = vec![0.0; zx.n];
        let mut by = vec![0.0; zy.n];
        zx.map_query(px.x(), l, &mut q);
        let num = zx.lse(&q, &mut bx);
        zy.map_query(px.x(), l, &mut q);
        let den = zy.lse(&q, &mut by);
        num - den
    });
    Ok(nu as f64 * (py.s.ln() - px.s.ln())
        + ((py.n() as f64).ln() - (nx as f64).ln())
        + (py.log_sigma_prod() - px.log_sigma_prod())
        + avg)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct InfoEstimates {
    pub mi: f64,
    pub entropy: f64,
}

/// Î(X) and Ŝ_X, sharing the joint kernel sums.
pub fn mi_and_entropy(px: &SampleSet) -> InfoEstimates {
    let (nu, n) = (px.nu(), px.n());
    let z = px.scaled();
    let ln_n = (n as f64).ln();
    let parts: Vec<(f64, f64)> = (0..n)
        .into_par_iter()
        .map(|l| {
            let mut q = vec![0.0; nu];
            let mut buf = vec![0.0; n];
            for k in 0..nu {
                q[k] = z.row(k)[l];
            }
            let joint = z.lse(&q, &mut buf) - ln_n;
            let mut marg = 0.0;
            if nu > 1 {
                for k in 0..nu {
                    let qk = q[k];
                    for (b, &v) in buf.iter_mut().zip(z.row(k)) {
                        *b = -0.5 * (qk - v) * (qk - v);
                    }
                    let s = exp_in_place_sum(&mut buf);
                    marg += s.ln() - ln_n;
                }
            }
            (joint, marg)
        })
        .collect();
    let joint_avg = parts.iter().map(|p| p.0).sum::<f64>() / n as f64;
    let mi = if nu == 1 { 0.0 } else { parts.iter().map(|p| p.0 - p.1).sum::<f64>() / n as f64 };
    let entropy =
        nu as f64 * (px.s * (2.0 * std::f64::consts::PI).sqrt()).ln() + px.log_sigma_prod() - joint_avg;
    InfoEstimates { mi, entropy }
}

/// Î(X); zero for ν = 1.
pub fn mutual_information(px: &SampleSet) -> f64 {
    if px.nu() == 1 {
        return 0.0;
    }
    mi_and_entropy(px).mi
}

/// Ŝ_X.
pub fn entropy(px: &SampleSet) -> f64 {
    mi_and_entropy(px).entropy
}

/// Î / (χ + log n_samp).
pub fn normalized_mi(i_hat: f64, n_samp: usize, chi: f64) -> Result<f64> {
    let den = chi + (n_samp as f64).ln();
    if !(den > 0.0) {
        return Err(Error::NonPositiveDenominator(den));
    }
    Ok(i_hat / den)
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct ChiSolution {
    pub chi: f64,
    /// χ + log n_d > 0.
    pub valid: bool,
}

/// χ equating Î(H)/(χ + log n_d) with Î_TB/(χ + log n_ar).
pub fn solve_chi(i_h: f64, i_tb_opt: f64, n_d: usize, n_ar: usize) -> Result<ChiSolution> {
    if i_h == i_tb_opt {
        return Err(Error::DegenerateEquation);
    }
    if n_ar <= n_d {
        return Err(Error::InvalidInput(format!("need n_ar > n_d, found {n_ar} <= {n_d}")));
    }
    let (ld, la) = ((n_d as f64).ln(), (n_ar as f64).ln());
    let chi = (i_tb_opt * ld - i_h * la) / (i_h - i_tb_opt);
    Ok(ChiSolution { chi, valid: chi + ld > 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Stream;

    fn gauss(nu: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut s = Stream::new(seed, 5, 0);
        DMatrix::from_fn(nu, n, |_, _| s.normal())
    }

    #[test]
    fn silverman_bandwidth_and_unbiased_sigma() {
        let x = DMatrix::from_row_slice(1, 4, &[1.0, 2.0, 3.0, 4.0]);
        let p = SampleSet::new(x).unwrap();
        assert!((p.sigmas()[0] - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
        assert_eq!(p.s(), (4.0f64 / 12.0).powf(0.2));
    }

    #[test]
    fn kl_of_identical_sets_is_exactly_zero() {
        let p = SampleSet::new(gauss(3, 120, 1)).unwrap();
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_dimension_mismatch() {
        let a = SampleSet::new(gauss(2, 20, 1)).unwrap();
        let b = SampleSet::new(gauss(3, 20, 1)).unwrap();
        assert!(matches!(kl_divergence(&a, &b), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn kl_grows_with_separation() {
        let base = gauss(1, 50, 2);
        let p = SampleSet::new(base.clone()).unwrap();
        let mut last = 0.0;
        for shift in [1.0, 3.0, 6.0] {
            let q = SampleSet::new(gauss(1, 50, 3).add_scalar(shift)).unwrap();
            let d = kl_divergence(&p, &q).unwrap();
            assert!(d > last, "{d} <= {last}");
            last = d;
        }
        assert!(last > 5.0);
    }

    #[test]
    fn kl_matches_direct_mixture_ratio() {
        // Both KDEs are explicit Gaussian mixtures; the estimator is the
        // sample average of log(p̂_X/p̂_Y) over X's own points, which we
        // recompute here term by term from the mixture densities.
        let x = gauss(1, 50, 4);
        let y = gauss(1, 50, 5).add_scalar(2.0) * 1.5;
        let px = SampleSet::new(x.clone()).unwrap();
        let py = SampleSet::new(y.clone()).unwrap();
        let kde = |p: &SampleSet, t: f64| -> f64 {
            let h = p.s() * p.sigmas()[0];
            p.x().iter().map(|&c| (-(t - c) * (t - c) / (2.0 * h * h)).exp()).sum::<f64>()
                / (p.n() as f64 * h * (2.0 * std::f64::consts::PI).sqrt())
        };
        let direct: f64 = x.iter().map(|&t| (kde(&px, t) / kde(&py, t)).ln()).sum::<f64>() / 50.0;
        let est = kl_divergence(&px, &py).unwrap();
        assert!((est - direct).abs() < 1e-10, "{est} vs {direct}");
    }

    #[test]
    fn mi_is_zero_in_one_dimension() {
        let p = SampleSet::new(gauss(1, 40, 6)).unwrap();
        assert_eq!(mutual_information(&p), 0.0);
        assert_eq!(mi_and_entropy(&p).mi, 0.0);
        assert!(entropy(&p).is_finite());
    }

    #[test]
    fn duplicated_component_has_more_information() {
        let a = gauss(1, 300, 7);
        let b = gauss(1, 300, 8);
        let dup = DMatrix::from_fn(2, 300, |_, j| a[(0, j)]);
        let ind = DMatrix::from_fn(2, 300, |k, j| if k == 0 { a[(0, j)] } else { b[(0, j)] });
        let i_dup = mutual_information(&SampleSet::new(dup).unwrap());
        let i_ind = mutual_information(&SampleSet::new(ind).unwrap());
        assert!(i_dup > i_ind + 0.5, "{i_dup} vs {i_ind}");
    }

    #[test]
    fn two_point_entropy_closed_form() {
        let p = SampleSet::new(DMatrix::from_row_slice(1, 2, &[-1.0, 1.0])).unwrap();
        let s = (4.0f64 / 6.0).powf(0.2);
        let sigma = 2f64.sqrt();
        let e = (-0.5 * (2.0 / (s * sigma)).powi(2)).exp();
        let expected = (s * (2.0 * std::f64::consts::PI).sqrt()).ln() + sigma.ln() - ((1.0 + e) / 2.0).ln();
        assert!((entropy(&p) - expected).abs() < 1e-14);
    }

    #[test]
    fn entropy_shift_under_scaling() {
        let x = gauss(2, 200, 9);
        let mut y = x.clone();
        y.row_mut(0).scale_mut(3.0);
        y.row_mut(1).scale_mut(0.25);
        let d = entropy(&SampleSet::new(y.clone()).unwrap()) - entropy(&SampleSet::new(x.clone()).unwrap());
        assert!((d - (3.0f64.ln() + 0.25f64.ln())).abs() < 1e-10);
        let mi_x = mutual_information(&SampleSet::new(x).unwrap());
        let mi_y = mutual_information(&SampleSet::new(y).unwrap());
        assert!((mi_x - mi_y).abs() < 1e-10);
    }

    #[test]
    fn entropy_decreases_with_sample_size() {
        let small = entropy(&SampleSet::new(gauss(1, 100, 10)).unwrap());
        let large = entropy(&SampleSet::new(gauss(1, 10_000, 10)).unwrap());
        assert!(large < small);
    }

    #[test]
    fn capped_subsample_is_reproducible() {
        let x = gauss(2, 500, 11);
        let a = SampleSet::capped(x.clone(), 100, 42).unwrap();
        let b = SampleSet::capped(x, 100, 42).unwrap();
        assert_eq!(a.x(), b.x());
        assert_eq!((a.n(), a.n_total()), (100, 500));
    }

    #[test]
    fn zero_variance_component_rejected() {
        let mut x = gauss(2, 10, 12);
        x.row_mut(1).fill(3.0);
        assert!(matches!(SampleSet::new(x), Err(Error::ZeroVariance(1))));
    }

    #[test]
    fn chi_and_normalization() {
        let c = solve_chi(4.4668, 6.9996, 400, 400_000).unwrap();
        assert!(c.valid);
        assert!((c.chi - 6.191).abs() < 1e-3);
        let h = normalized_mi(4.4668, 400, c.chi).unwrap();
        let tb = normalized_mi(6.9996, 400_000, c.chi).unwrap();
        assert!((h - tb).abs() < 1e-12);
        assert!((h - 0.3666).abs() < 5e-4);
        assert!((normalized_mi(7.0945, 400_000, c.chi).unwrap() - 0.3716).abs() < 5e-4);

        let c3 = solve_chi(24.167, 25.115, 560, 448_000).unwrap();
        assert!((normalized_mi(24.167, 560, c3.chi).unwrap() - 0.1418).abs() < 5e-4);

        assert!(matches!(solve_chi(1.0, 1.0, 10, 100), Err(Error::DegenerateEquation)));
        assert!(matches!(normalized_mi(1.0, 1, -1.0), Err(Error::NonPositiveDenominator(_))));
        assert_eq!(normalized_mi(0.0, 10, 1.0).unwrap(), 0.0);
        let a = normalized_mi(2.0, 10, 1.0).unwrap();
        let b = normalized_mi(2.0, 10, 2.0 + 10f64.ln()).unwrap();
        assert!((a - 2.0 * b).abs() < 1e-15);
    }
}
