//! Small dense helpers shared by several modules.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Column mean of a matrix whose columns are realizations.
pub fn column_mean(x: &DMatrix<f64>) -> DVector<f64> {
    let n = x.ncols() as f64;
    let mut m = DVector::zeros(x.nrows());
    for col in x.column_iter() {
        m += col;
    }
    m / n
}

/// Empirical covariance with the 1/(n-1) estimator.
pub fn covariance(x: &DMatrix<f64>) -> DMatrix<f64> {
    let n = x.ncols();
    let m = column_mean(x);
    let mut c = x.clone();
    for mut col in c.column_iter_mut() {
        col -= &m;
    }
    (&c * c.transpose()) / (n as f64 - 1.0)
}

/// Symmetric eigendecomposition sorted by descending eigenvalue.
///
/// Each eigenvector is signed so that its entry of largest magnitude is positive,
/// which makes the output independent of solver sign conventions.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let vals = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vecs = DMatrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        let mut v = eig.eigenvectors.column(i).into_owned();
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v.neg_mut();
        }
        vecs.set_column(c, &v);
    }
    (vals, vecs)
}

/// Eigenvalues only, sorted descending.
pub fn sym_eigenvalues_desc(a: &DMatrix<f64>) -> Vec<f64> {
    let mut v: Vec<f64> = a.clone().symmetric_eigenvalues().iter().copied().collect();
    v.sort_by(|x, y| y.total_cmp(x));
    v
}

const LN2_HI: f64 = 6.931_471_803_691_238_164_90e-1;
const LN2_LO: f64 = 1.908_214_929_270_587_700_02e-10;
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// e^x for x ≤ 0, branch-free so that loops over slices vectorize.
///
/// Relative error stays within a few ulp of the libm result; arguments below
/// -708 return 0 instead of a subnormal.
#[inline(always)]
pub fn exp_nonpos(x: f64) -> f64 {
    let xc = x.max(-708.0);
    let kf = xc * std::f64::consts::LOG2_E + ROUND_MAGIC;
    let k = kf - ROUND_MAGIC;
    let r = (xc - k * LN2_HI) - k * LN2_LO;
    // Taylor series to degree 13 on |r| ≤ ln2/2
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let ki = (kf.to_bits() as i64).wrapping_sub(ROUND_MAGIC.to_bits() as i64);
    let scale = f64::from_bits((ki.wrapping_add(1023) as u64) << 52);
    let v = p * scale;
    if x < -708.0 {
        0.0
    } else {
        v
    }
}

const EXP_LANES: usize = 8;

#[inline(always)]
pub(crate) fn exp_in_place_sum_generic(v: &mut [f64]) -> f64 {
    let mut acc = [0.0; EXP_LANES];
    let mut chunks = v.chunks_exact_mut(EXP_LANES);
    for c in &mut chunks {
        for (a, x) in acc.iter_mut().zip(c.iter_mut()) {
            *x = exp_nonpos(*x);
            *a += *x;
        }
    }
    let mut tail = 0.0;
    for x in chunks.into_remainder() {
        *x = exp_nonpos(*x);
        tail += *x;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Minimum over 8 interleaved lanes; NaN entries are ignored.
#[inline(always)]
pub(crate) fn min_lanes(v: &[f64]) -> f64 {
    let mut acc = [f64::INFINITY; EXP_LANES];
    let chunks = v.chunks_exact(EXP_LANES);
    let rem = chunks.remainder();
    for c in chunks {
        for (a, &x) in acc.iter_mut().zip(c) {
            *a = if x < *a { x } else { *a };
        }
    }
    let mut m = f64::INFINITY;
    for &x in acc.iter().chain(rem) {
        m = if x < m { x } else { m };
    }
    m
}

/// Dot product with 8 interleaved accumulators, fixed order.
#[inline(always)]
pub(crate) fn dot_lanes(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0; EXP_LANES];
    let ca = a.chunks_exact(EXP_LANES);
    let cb = b.chunks_exact(EXP_LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..EXP_LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// True when the AVX2 and FMA code paths may be used.
#[inline]
pub(crate) fn has_avx2() -> bool {
    #[cfg(target_arch = "x86_64")]
    {
        std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma")
    }
    #[cfg(not(target_arch = "x86_64"))]
    {
        false
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn exp_in_place_sum_avx2(v: &mut [f64]) -> f64 {
    exp_in_place_sum_generic(v)
}

/// Replaces every entry (all ≤ 0) by its exponential and returns the sum.
///
/// The summation order is fixed, so results do not depend on which
/// instruction set is picked at run time.
pub fn exp_in_place_sum(v: &mut [f64]) -> f64 {
    #[cfg(target_arch = "x86_64")]
    {
        if has_avx2() {
            // SAFETY: the required features were detected above.
            return unsafe { exp_in_place_sum_avx2(v) };
        }
    }
    exp_in_place_sum_generic(v)
}

/// Neumaier compensated accumulator.
#[derive(Clone, Copy, Debug, Default)]
pub struct Compensated {
    sum: f64,
    comp: f64,
}

impl Compensated {
    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    #[inline]
    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

/// log(sum(exp(v))) with the max-shift trick.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = v.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}
