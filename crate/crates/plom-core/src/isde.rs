//! Euler integration of the matrix-valued ISDE whose invariant measure is the
//! GKDE measure, started from the training matrix.
//!
//! One step per realization ℓ:
//! Y_μ = Y_{μ-1} + (δt/2) L(Y_{μ-1}) + √δt Γ_μ, with L = ∇ log ξ applied
//! column by column. States are retained at μ = n_s·n, n = 1..N.
//!
//! The noise of step μ for realization ℓ is drawn from the stream addressed by
//! (seed, ℓ, μ), so any realization can be replayed on its own. Statistics are
//! reduced over fixed realization blocks in block order, which keeps results
//! independent of the worker count.

use std::borrow::Cow;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::gkde::GkdeModel;
use crate::rng::Stream;

/// Realizations per reduction block.
pub const BLOCK: usize = 32;
/// Default ceiling for materialized trajectories.
pub const DEFAULT_MEMORY_BUDGET: usize = 1 << 30;

#[derive(Clone, Debug, Serialize)]
pub struct IsdeConfig {
    pub kappa: f64,
    pub delta_t: f64,
    pub n_s: usize,
    pub n_steps: usize,
    pub n_mc: usize,
    pub seed: u64,
    /// Include the drift term (disabled only in diagnostics).
    pub drift: bool,
    /// Include the Wiener increment (disabled only in diagnostics).
    pub noise: bool,
    /// Instants kept in memory; `None` keeps all of them.
    pub retain: Option<Vec<usize>>,
    /// Bytes allowed for materialized states before switching to replay.
    pub memory_budget: usize,
}

impl IsdeConfig {
    /// Δt = ŝ²/κ.
    pub fn from_kappa(model: &GkdeModel, kappa: f64, n_steps: usize, n_mc: usize, seed: u64) -> Self {
        let s_hat = model.bandwidths().s_hat;
        Self {
            kappa,
            delta_t: s_hat * s_hat / kappa,
            n_s: 1,
            n_steps,
            n_mc,
            seed,
            drift: true,
            noise: true,
            retain: None,
            memory_budget: DEFAULT_MEMORY_BUDGET,
        }
    }

    /// Explicit Δt; κ is recorded as ŝ²/Δt.
    pub fn from_delta_t(model: &GkdeModel, delta_t: f64, n_steps: usize, n_mc: usize, seed: u64) -> Self {
        let s_hat = model.bandwidths().s_hat;
        let mut c = Self::from_kappa(model, s_hat * s_hat / delta_t, n_steps, n_mc, seed);
        c.delta_t = delta_t;
        c
    }

    pub fn small_dt(&self) -> f64 {
        self.delta_t / self.n_s as f64
    }

    pub fn horizon(&self) -> f64 {
        self.delta_t * self.n_steps as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.delta_t > 0.0 && self.delta_t.is_finite()) {
            return Err(Error::InvalidInput(format!("delta_t must be positive, got {}", self.delta_t)));
        }
        if self.n_s == 0 || self.n_steps == 0 || self.n_mc == 0 {
            return Err(Error::InvalidInput("n_s, N and n_mc must be positive".into()));
        }
        if let Some(r) = &self.retain {
            if r.iter().any(|&n| n == 0 || n > self.n_steps) {
                return Err(Error::InvalidInput("retained instants must lie in 1..=N".into()));
            }
        }
        Ok(())
    }

    fn retained(&self) -> Vec<usize> {
        match &self.retain {
            Some(r) => {
                let mut r = r.clone();
                r.sort_unstable();
                r.dedup();
                r
            }
            None => (1..=self.n_steps).collect(),
        }
    }
}

/// Integrates single realizations; holds the per-worker scratch buffers.
struct PathRunner<'a> {
    model: &'a GkdeModel,
    cfg: &'a IsdeConfig,
    state: Vec<f64>,
    grad: Vec<f64>,
    noise: Vec<f64>,
    w: Vec<f64>,
}

impl<'a> PathRunner<'a> {
    fn new(model: &'a GkdeModel, cfg: &'a IsdeConfig) -> Self {
        let len = model.nu() * model.n_d();
        Self {
            model,
            cfg,
            state: vec![0.0; len],
            grad: vec![0.0; len],
            noise: vec![0.0; len],
            w: vec![0.0; model.n_d()],
        }
    }

    /// Runs realization `l` and calls `visit(n, state)` at every retained instant.
    fn run(&mut self, l: usize, mut visit: impl FnMut(usize, &[f64])) -> Result<()> {
        let nu = self.model.nu();
        let dt = self.cfg.small_dt();
        let sq = dt.sqrt();
        self.state.copy_from_slice(self.model.training().eta().as_slice());
        let total = self.cfg.n_s * self.cfg.n_steps;
        for mu in 1..=total {
            if self.cfg.drift {
                for (y, g) in self.state.chunks_exact(nu).zip(self.grad.chunks_exact_mut(nu)) {
                    self.model.grad_log_xi_into(y, g, &mut self.w);
                }
            }
            if self.cfg.noise {
                Stream::new(self.cfg.seed, l as u64, mu as u64).fill_normal(&mut self.noise);
            }
            for i in 0..self.state.len() {
                let mut v = self.state[i];
                if self.cfg.drift {
                    v += 0.5 * dt * self.grad[i];
                }
                if self.cfg.noise {
                    v += sq * self.noise[i];
                }
                self.state[i] = v;
            }
            if mu % self.cfg.n_s == 0 {
                let n = mu / self.cfg.n_s;
                if self.state.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite { instant: n });
                }
                visit(n, &self.state);
            }
        }
        Ok(())
    }
}

/// Running first and second moments of every matrix entry (Chan/Welford).
#[derive(Clone)]
struct Moments {
    count: f64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Self { count: 0.0, mean: vec![0.0; len], m2: vec![0.0; len] }
    }

    fn push(&mut self, x: &[f64]) {
        self.count += 1.0;
        let c = self.count;
        for ((m, q), &v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let d = v - *m;
            *m += d / c;
            *q += d * (v - *m);
        }
    }

    fn merge(&mut self, o: &Moments) {
        if o.count == 0.0 {
            return;
        }
        let n = self.count + o.count;
        for i in 0..self.mean.len() {
            let d = o.mean[i] - self.mean[i];
            self.mean[i] += d * o.count / n;
            self.m2[i] += o.m2[i] + d * d * self.count * o.count / n;
        }
        self.count = n;
    }
}

#[derive(Clone, Debug)]
pub struct IsdeTrajectorySet {
    cfg: IsdeConfig,
    nu: usize,
    n_d: usize,
    mean: Vec<DMatrix<f64>>,
    sigma: Vec<DMatrix<f64>>,
    /// (instant, states of every realization laid out realization-major).
    stored: Vec<(usize, Vec<f64>)>,
}

pub fn simulate(model: &GkdeModel, cfg: &IsdeConfig) -> Result<IsdeTrajectorySet> {
    cfg.validate()?;
    let (nu, n_d) = (model.nu(), model.n_d());
    let len = nu * n_d;
    let big_n = cfg.n_steps;
    let retained = cfg.retained();
    let bytes = cfg.n_mc as u128 * retained.len() as u128 * len as u128 * 8;
    let store = bytes <= cfg.memory_budget as u128;
    let slot: Vec<Option<usize>> = (0..=big_n).map(|n| retained.iter().position(|&r| r == n)).collect();

    let mut stored: Vec<(usize, Vec<f64>)> = if store {
        retained.iter().map(|&n| (n, vec![0.0; cfg.n_mc * len])).collect()
    } else {
        Vec::new()
    };
    let mut total: Vec<Moments> = (0..big_n).map(|_| Moments::new(len)).collect();

    let blocks: Vec<(usize, usize)> =
        (0..cfg.n_mc).step_by(BLOCK).map(|l0| (l0, (l0 + BLOCK).min(cfg.n_mc))).collect();
    let chunk = (4 * rayon::current_num_threads()).max(1);
    for group in blocks.chunks(chunk) {
        let results: Vec<Result<(Vec<Moments>, Vec<Vec<f64>>)>> = group
            .par_iter()
            .map(|&(l0, l1)| {
                let mut runner = PathRunner::new(model, cfg);
                let mut mom: Vec<Moments> = (0..big_n).map(|_| Moments::new(len)).collect();
                let mut keep: Vec<Vec<f64>> =
                    if store { vec![vec![0.0; (l1 - l0) * len]; retained.len()] } else { Vec::new() };
                for l in l0..l1 {
                    runner.run(l, |n, st| {
                        mom[n - 1].push(st);
                        if store {
                            if let Some(s) = slot[n] {
                                keep[s][(l - l0) * len..(l - l0 + 1) * len].copy_from_slice(st);
                            }
                        }
                    })?;
                }
                Ok((mom, keep))
            })
            .collect();
        for (res, &(l0, l1)) in results.into_iter().zip(group) {
            let (mom, keep) = res?;
            for (t, m) in total.iter_mut().zip(&mom) {
                t.merge(m);
            }
            for (s, data) in keep.into_iter().enumerate() {
                stored[s].1[l0 * len..l1 * len].copy_from_slice(&data);
            }
        }
    }

    let mut mean = Vec::with_capacity(big_n);
    let mut sigma = Vec::with_capacity(big_n);
    for m in total {
        mean.push(DMatrix::from_vec(nu, n_d, m.mean));
        let c = m.count;
        sigma.push(DMatrix::from_vec(nu, n_d, m.m2.into_iter().map(|q| (q.max(0.0) / c).sqrt()).collect()));
    }
    Ok(IsdeTrajectorySet { cfg: cfg.clone(), nu, n_d, mean, sigma, stored })
}

impl IsdeTrajectorySet {
    pub fn config(&self) -> &IsdeConfig {
        &self.cfg
    }

    pub fn nu(&self) -> usize {
        self.nu
    }

    pub fn n_d(&self) -> usize {
        self.n_d
    }

    pub fn n_mc(&self) -> usize {
        self.cfg.n_mc
    }

    pub fn n_steps(&self) -> usize {
        self.cfg.n_steps
    }

    /// [ȳ_n] for n in 1..=N.
    pub fn mean(&self, n: usize) -> &DMatrix<f64> {
        &self.mean[n - 1]
    }

    /// [σ_n] for n in 1..=N (1/n_MC estimator).
    pub fn sigma(&self, n: usize) -> &DMatrix<f64> {
        &self.sigma[n - 1]
    }

    pub fn is_stored(&self, n: usize) -> bool {
        self.stored.iter().any(|(m, _)| *m == n)
    }

    /// State [y_n^ℓ] if instant n is materialized.
    pub fn state(&self, l: usize, n: usize) -> Option<DMatrix<f64>> {
        let len = self.nu * self.n_d;
        self.stored
            .iter()
            .find(|(m, _)| *m == n)
            .map(|(_, d)| DMatrix::from_column_slice(self.nu, self.n_d, &d[l * len..(l + 1) * len]))
    }

    /// States of realizations l0..l1 at each instant of `ns`, realization-major.
    /// Materialized instants are borrowed; the others are regenerated.
    pub fn block_states<'s>(
        &'s self,
        model: &GkdeModel,
        ns: &[usize],
        l0: usize,
        l1: usize,
    ) -> Result<Vec<Cow<'s, [f64]>>> {
        let len = self.nu * self.n_d;
        if ns.iter().all(|&n| self.is_stored(n)) {
            return Ok(ns
                .iter()
                .map(|&n| {
                    let d = &self.stored.iter().find(|(m, _)| *m == n).unwrap().1;
                    Cow::Borrowed(&d[l0 * len..l1 * len])
                })
                .collect());
        }
        let mut out: Vec<Vec<f64>> = vec![vec![0.0; (l1 - l0) * len]; ns.len()];
        let mut runner = PathRunner::new(model, &self.cfg);
        for l in l0..l1 {
            runner.run(l, |n, st| {
                for (s, &m) in ns.iter().enumerate() {
                    if m == n {
                        out[s][(l - l0) * len..(l - l0 + 1) * len].copy_from_slice(st);
                    }
                }
            })?;
        }
        Ok(out.into_iter().map(Cow::Owned).collect())
    }
}

/// ȳ(n) = ‖[ȳ_n]‖_F/√(ν n_d) and σ̄(n) = ‖[σ_n]‖_F/√(ν n_d) for n = 1..=N.
pub fn convergence_curves(traj: &IsdeTrajectorySet) -> (Vec<f64>, Vec<f64>) {
    let scale = 1.0 / ((traj.nu * traj.n_d) as f64).sqrt();
    let y = traj.mean.iter().map(|m| m.norm() * scale).collect();
    let s = traj.sigma.iter().map(|m| m.norm() * scale).collect();
    (y, s)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_model::TrainingSet;
    use crate::gkde::bandwidths;

    fn small_model() -> GkdeModel {
        let mut s = Stream::new(1, 9, 0);
        let eta = DMatrix::from_fn(2, 12, |_, _| s.normal());
        GkdeModel::new(TrainingSet::normalized(eta).unwrap())
    }

    #[test]
    fn fixed_point_without_noise() {
        let ts = TrainingSet::new(DMatrix::zeros(1, 1)).unwrap();
        let model = GkdeModel::with_bandwidths(ts, bandwidths(1, 100));
        let mut cfg = IsdeConfig::from_kappa(&model, 1.0, 5, 1, 0);
        cfg.noise = false;
        let traj = simulate(&model, &cfg).unwrap();
        for n in 1..=5 {
            assert_eq!(traj.state(0, n).unwrap()[(0, 0)], 0.0);
        }
    }

    #[test]
    fn statistics_match_stored_states() {
        let model = small_model();
        let cfg = IsdeConfig::from_kappa(&model, 4.0, 3, 70, 5);
        let traj = simulate(&model, &cfg).unwrap();
        for n in 1..=3 {
            let mut m = DMatrix::zeros(2, 12);
            for l in 0..70 {
                m += traj.state(l, n).unwrap();
            }
            m /= 70.0;
            let mut v = DMatrix::zeros(2, 12);
            for l in 0..70 {
                let d = traj.state(l, n).unwrap() - &m;
                v += d.component_mul(&d);
            }
            let s = (v / 70.0).map(f64::sqrt);
            assert!((&m - traj.mean(n)).amax() < 1e-12);
            assert!((&s - traj.sigma(n)).amax() < 1e-12);
            assert!(traj.sigma(n).iter().all(|&x| x > 0.0));
        }
    }

    #[test]
    fn replay_reproduces_stored_states_bitwise() {
        let model = small_model();
        let cfg = IsdeConfig::from_kappa(&model, 2.0, 4, 40, 8);
        let traj = simulate(&model, &cfg).unwrap();
        let mut lean = cfg.clone();
        lean.memory_budget = 0;
        let streamed = simulate(&model, &lean).unwrap();
        assert!(!streamed.is_stored(1));
        let a = traj.block_states(&model, &[2, 4], 5, 17).unwrap();
        let b = streamed.block_states(&model, &[2, 4], 5, 17).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.len(), y.len());
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        for n in 1..=4 {
            assert_eq!(traj.mean(n), streamed.mean(n));
            assert_eq!(traj.sigma(n), streamed.sigma(n));
        }
    }

    #[test]
    fn deterministic_across_thread_counts() {
        let model = small_model();
        let cfg = IsdeConfig::from_kappa(&model, 2.0, 3, 100, 4);
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let three = rayon::ThreadPoolBuilder::new().num_threads(3).build().unwrap();
        let a = one.install(|| simulate(&model, &cfg)).unwrap();
        let b = three.install(|| simulate(&model, &cfg)).unwrap();
        for n in 1..=3 {
            assert_eq!(a.mean(n), b.mean(n));
            assert_eq!(a.sigma(n), b.sigma(n));
            assert_eq!(a.state(99, n), b.state(99, n));
        }
    }

    #[test]
    fn pure_random_walk_variance_is_elapsed_time() {
        let model = small_model();
        let mut cfg = IsdeConfig::from_delta_t(&model, 0.01, 5, 100_000, 3);
        cfg.n_s = 2;
        cfg.drift = false;
        cfg.retain = Some(vec![5]);
        let traj = simulate(&model, &cfg).unwrap();
        let t = cfg.horizon();
        for &s in traj.sigma(5).iter() {
            assert!((s * s / t - 1.0).abs() < 0.05);
        }
    }

    #[test]
    fn start_is_training_matrix_without_noise_or_drift() {
        let model = small_model();
        let mut cfg = IsdeConfig::from_kappa(&model, 1.0, 2, 3, 0);
        cfg.noise = false;
        cfg.drift = false;
        let traj = simulate(&model, &cfg).unwrap();
        assert_eq!(&traj.state(2, 2).unwrap(), model.training().eta());
        let (y, s) = convergence_curves(&traj);
        let expected = model.training().eta().norm() / (24f64).sqrt();
        assert!((y[1] - expected).abs() < 1e-14);
        assert_eq!(s[1], 0.0);
    }

    #[test]
    fn huge_step_reports_non_finite() {
        let model = small_model();
        let cfg = IsdeConfig::from_delta_t(&model, 1e300, 2, 2, 0);
        assert!(matches!(simulate(&model, &cfg), Err(Error::NonFinite { .. })));
    }
}
