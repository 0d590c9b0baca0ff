//! End-to-end runs: data, bases, instant selection, learned sets, artifacts.
//!
//! Every random draw is seeded from `RunConfig::seed` through labeled
//! hashing, and every artifact is written in a fixed order, so two runs with
//! the same configuration produce byte-identical trees.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::data_model::{
    pca_reduce, validate_normalization, NormalizationDiagnostics, RawDataset, TrainingSet,
};
use crate::error::{Error, Result};
use crate::gaussian_reference::{exact_rate, run_reference, ReferenceConfig, ReferenceRun, A_MAX};
use crate::gkde::{BandwidthSet, GkdeModel};
use crate::info_metrics::{kl_divergence, mi_and_entropy, SampleSet, DEFAULT_SUBSAMPLE_CAP};
use crate::io::{read_bin, read_csv, write_bin, write_table};
use crate::isde::{convergence_curves, simulate, IsdeConfig};
use crate::kernels::{dmaps_basis, m_opt, transient_basis, transient_connected_matrices, KernelBasis};
use crate::linalg::{column_mean, covariance};
use crate::plom::{constrain, generate, identity_basis, ConstraintMode, LearnedSet, PlomConfig};
use crate::rng::derive_seed;
use crate::selection::{build_report, concentration, span_angle, subspace_angle, SelectionRecord, SelectionReport, DEFAULT_TAU_C};
use crate::synthetic::{self, GeneratorSpec};

pub const SCHEMA_VERSION: u32 = 1;
/// Environment variable that overrides the configured output directory.
pub const OUTPUT_DIR_ENV: &str = "PLOM_OUTPUT_DIR";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InputFormat {
    /// `.bin` files are binary, anything else is CSV.
    #[default]
    Auto,
    Csv,
    Bin,
}

/// Either a matrix file (one realization per column) or a generator spec.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputConfig {
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: InputFormat,
    pub synthetic: Option<GeneratorSpec>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub input: InputConfig,
    /// Relative PCA energy error kept.
    pub eps_pca: f64,
    /// Use the input as the training matrix; it must already be normalized.
    pub skip_pca: bool,
    pub jump_target: f64,
    pub kappa: f64,
    /// Number of simulated instants N.
    pub n_steps: usize,
    pub n_s: usize,
    pub n_mc: usize,
    /// Candidate instants for the transient basis; all of 1..=N when absent.
    pub instants: Option<Vec<usize>>,
    pub tau_c: f64,
    pub mi_cap: usize,
    pub seed: u64,
    pub output: PathBuf,
    /// Sampler settings; its `seed` is replaced by seeds derived from `seed`.
    pub plom: PlomConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: InputConfig::default(),
            eps_pca: 1e-6,
            skip_pca: false,
            jump_target: 0.1,
            kappa: 30.0,
            n_steps: 16,
            n_s: 1,
            n_mc: 1000,
            instants: None,
            tau_c: DEFAULT_TAU_C,
            mi_cap: DEFAULT_SUBSAMPLE_CAP,
            seed: 0,
            output: PathBuf::from("plom-out"),
            plom: PlomConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg = Self::from_toml(&text)?;
        // relative data paths are resolved against the config file
        if let (Some(p), Some(dir)) = (cfg.input.path.as_ref(), path.parent()) {
            if p.is_relative() {
                cfg.input.path = Some(dir.join(p));
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// Output directory after applying the environment override.
    pub fn resolved_output(&self) -> PathBuf {
        match std::env::var_os(OUTPUT_DIR_ENV) {
            Some(v) if !v.is_empty() => PathBuf::from(v),
            _ => self.output.clone(),
        }
    }

    pub fn instant_grid(&self) -> Vec<usize> {
        match &self.instants {
            Some(v) => {
                let mut v = v.clone();
                v.sort_unstable();
                v.dedup();
                v
            }
            None => (1..=self.n_steps).collect(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.input.path, &self.input.synthetic) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(Error::InvalidInput("input needs exactly one of `path` or `synthetic`".into())),
        }
        if !(self.eps_pca > 0.0 && self.eps_pca < 1.0) {
            return Err(Error::InvalidInput(format!("eps_pca must lie in (0,1), got {}", self.eps_pca)));
        }
        if !(self.jump_target > 0.0 && self.jump_target < 1.0) {
            return Err(Error::InvalidInput(format!("jump_target must lie in (0,1), got {}", self.jump_target)));
        }
        if !(self.kappa >= 1.0 && self.kappa.is_finite()) {
            return Err(Error::InvalidInput(format!("kappa must be ≥ 1, got {}", self.kappa)));
        }
        if self.n_steps == 0 || self.n_s == 0 || self.n_mc < 2 {
            return Err(Error::InvalidInput("need N ≥ 1, n_s ≥ 1 and n_mc ≥ 2".into()));
        }
        let grid = self.instant_grid();
        if grid.is_empty() || grid.iter().any(|&n| n == 0 || n > self.n_steps) {
            return Err(Error::InvalidInput(format!("instants must be a non-empty subset of 1..={}", self.n_steps)));
        }
        if !(self.tau_c > 0.0) {
            return Err(Error::InvalidInput("tau_c must be positive".into()));
        }
        if self.mi_cap < 2 {
            return Err(Error::InvalidInput("mi_cap must be at least 2".into()));
        }
        if self.plom.n_mch == 0 {
            return Err(Error::InvalidInput("plom.n_mch must be positive".into()));
        }
        Ok(())
    }
}

/// Seeds handed to each stage, keyed by label.
#[derive(Clone, Debug, Serialize)]
pub struct SeedBook {
    pub master: u64,
    pub derived: BTreeMap<String, u64>,
}

impl SeedBook {
    pub fn new(master: u64) -> Self {
        Self { master, derived: BTreeMap::new() }
    }

    pub fn get(&mut self, label: &str) -> u64 {
        let s = derive_seed(self.master, label);
        self.derived.insert(label.to_string(), s);
        s
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct DataSummary {
    pub n_x: usize,
    pub nu: usize,
    pub n_d: usize,
    pub pca_applied: bool,
    pub pca_err: Option<f64>,
    pub normalization: NormalizationDiagnostics,
    pub bandwidths: BandwidthSet,
}

/// Loads the input and produces the normalized training set.
pub fn load_training(cfg: &RunConfig) -> Result<(TrainingSet, DataSummary)> {
    let x = match (&cfg.input.path, &cfg.input.synthetic) {
        (Some(p), None) => {
            if !p.exists() {
                return Err(Error::InvalidInput(format!("input file {} does not exist", p.display())));
            }
            match cfg.input.format {
                InputFormat::Csv => read_csv(p)?,
                InputFormat::Bin => read_bin(p)?,
                InputFormat::Auto => crate::io::read_matrix(p)?,
            }
        }
        (None, Some(spec)) => synthetic::generate(spec)?.into_eta(),
        _ => return Err(Error::InvalidInput("input needs exactly one of `path` or `synthetic`".into())),
    };
    let n_x = x.nrows();
    let (ts, pca_err) = if cfg.skip_pca {
        let ts = TrainingSet::new(x)?;
        if !validate_normalization(&ts).pass {
            return Err(Error::InvalidInput("skip_pca requires zero-mean, identity-covariance input".into()));
        }
        (ts, None)
    } else {
        let raw = RawDataset::new(x)?;
        let (pca, ts) = pca_reduce(&raw, cfg.eps_pca)?;
        (ts, Some(pca.err))
    };
    let model_bw = crate::gkde::bandwidths(ts.nu(), ts.n_d());
    let summary = DataSummary {
        n_x,
        nu: ts.nu(),
        n_d: ts.n_d(),
        pca_applied: !cfg.skip_pca,
        pca_err,
        normalization: validate_normalization(&ts),
        bandwidths: model_bw,
    };
    Ok((ts, summary))
}

#[derive(Clone, Debug, Serialize)]
pub struct IsdeSummary {
    pub kappa: f64,
    pub delta_t: f64,
    pub n_s: usize,
    pub n_steps: usize,
    pub n_mc: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct InstantBasis {
    pub n: usize,
    pub t: f64,
    /// Angle from the normalized cross-Gram of the two bases.
    pub gamma_deg: f64,
    /// Largest principal angle between the spanned subspaces.
    pub gamma_span_deg: f64,
    pub basis: KernelBasis,
}

/// DMAPS basis, transient bases at the candidate instants and their angles.
#[derive(Clone, Debug, Serialize)]
pub struct BasesOutput {
    pub dmaps: KernelBasis,
    /// Angle of the DMAPS basis with itself: the floor of `gamma_deg` when
    /// the basis columns are correlated.
    pub dmaps_self_angle_deg: f64,
    pub isde: IsdeSummary,
    pub transient: Vec<InstantBasis>,
    pub y_bar: Vec<f64>,
    pub sigma_bar: Vec<f64>,
    pub warnings: Vec<String>,
}

pub fn compute_bases(cfg: &RunConfig, model: &GkdeModel, seeds: &mut SeedBook) -> Result<BasesOutput> {
    let ts = model.training();
    let dmaps = dmaps_basis(ts, cfg.jump_target)?;
    let eps = dmaps.eps_dm.ok_or_else(|| Error::InvalidInput("DMAPS basis without ε".into()))?;
    let grid = cfg.instant_grid();
    let mut icfg = IsdeConfig::from_kappa(model, cfg.kappa, cfg.n_steps, cfg.n_mc, seeds.get("isde"));
    icfg.n_s = cfg.n_s;
    icfg.retain = Some(grid.clone());
    let traj = simulate(model, &icfg)?;
    let kms = transient_connected_matrices(model, &traj, &grid, eps)?;
    let m = m_opt(ts.nu());
    let mut warnings = dmaps.warnings.clone();
    let mut transient = Vec::with_capacity(grid.len());
    for (km, &n) in kms.iter().zip(&grid) {
        let basis = transient_basis(km, m)?;
        warnings.extend(basis.warnings.iter().map(|w| format!("instant {n}: {w}")));
        let (gamma_deg, gamma_span_deg) = if basis.g.ncols() == dmaps.g.ncols() {
            (subspace_angle(&basis.g, &dmaps.g)?, span_angle(&basis.g, &dmaps.g)?)
        } else {
            (f64::NAN, f64::NAN)
        };
        transient.push(InstantBasis { n, t: km.t, gamma_deg, gamma_span_deg, basis });
    }
    let (y_bar, sigma_bar) = convergence_curves(&traj);
    let dmaps_self_angle_deg = subspace_angle(&dmaps.g, &dmaps.g)?;
    Ok(BasesOutput {
        dmaps_self_angle_deg,
        dmaps,
        isde: IsdeSummary {
            kappa: icfg.kappa,
            delta_t: icfg.delta_t,
            n_s: icfg.n_s,
            n_steps: icfg.n_steps,
            n_mc: icfg.n_mc,
        },
        transient,
        y_bar,
        sigma_bar,
        warnings,
    })
}

/// Concentration and information estimates of one learned set.
#[derive(Clone, Debug, Serialize)]
pub struct LearnedMetrics {
    pub d2: f64,
    pub d2_over_nu: f64,
    /// D̂(learned ‖ training).
    pub kl: f64,
    pub mi: f64,
    pub entropy: f64,
    /// Realizations used by the information estimators.
    pub n_samples: usize,
    pub n_ar: usize,
}

pub fn learned_metrics(learned: &LearnedSet, ts: &TrainingSet, training: &SampleSet, cap: usize, seed: u64) -> Result<LearnedMetrics> {
    let nu = ts.nu();
    let d2 = concentration(&learned.matrices(), ts.eta())?;
    let ss = SampleSet::capped(learned.eta_ar.clone(), cap, seed)?;
    let kl = kl_divergence(&ss, training)?;
    let info = mi_and_entropy(&ss);
    Ok(LearnedMetrics {
        d2,
        d2_over_nu: d2 / nu as f64,
        kl,
        mi: if nu == 1 { 0.0 } else { info.mi },
        entropy: info.entropy,
        n_samples: ss.n(),
        n_ar: learned.n_ar(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct RegimeSummary {
    pub name: String,
    pub basis_dim: usize,
    /// Instant of the transient basis (ROTB only).
    pub n: Option<usize>,
    pub metrics: LearnedMetrics,
    pub constraints: ConstraintMode,
    pub converged: bool,
    pub iterations: usize,
    pub final_err: Option<f64>,
    pub mean_norm: f64,
    pub cov_dev: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Provenance {
    pub crate_version: String,
    pub seeds: SeedBook,
    pub mi_cap: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub config: RunConfig,
    pub data: DataSummary,
    pub dmaps: KernelBasisSummary,
    pub dmaps_self_angle_deg: f64,
    pub isde: IsdeSummary,
    pub training_info: TrainingInfo,
    pub selection: SelectionReport,
    /// Instant used for the ROTB regime.
    pub rotb_instant: usize,
    /// True when no instant was admissible and the least-spread one was used.
    pub rotb_fallback: bool,
    pub regimes: Vec<RegimeSummary>,
    pub warnings: Vec<String>,
}

#[derive(Clone, Debug, Serialize)]
pub struct KernelBasisSummary {
    pub m: usize,
    pub eps_dm: Option<f64>,
    pub jump: f64,
    pub leading_eigvals: Vec<f64>,
}

impl KernelBasisSummary {
    fn of(b: &KernelBasis) -> Self {
        Self { m: b.m, eps_dm: b.eps_dm, jump: b.jump, leading_eigvals: b.eigvals.iter().take(b.m + 1).copied().collect() }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TrainingInfo {
    pub mi: f64,
    pub entropy: f64,
    pub n_samples: usize,
}

/// Everything a run produces, before it is written out.
pub struct RunOutput {
    pub record: RunRecord,
    pub bases: BasesOutput,
    pub learned: Vec<(String, LearnedSet)>,
}

const REGIMES: [&str; 3] = ["mcmc", "rodb", "rotb"];

pub fn run_pipeline(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut seeds = SeedBook::new(cfg.seed);
    let (ts, data) = load_training(cfg)?;
    let nu = ts.nu();
    if ts.n_d() <= m_opt(nu) {
        return Err(Error::InvalidInput(format!("need n_d > ν + 1 = {}, found {}", m_opt(nu), ts.n_d())));
    }
    let model = GkdeModel::new(ts.clone());
    let bases = compute_bases(cfg, &model, &mut seeds)?;
    let mut warnings = bases.warnings.clone();

    let training = SampleSet::new(ts.eta().clone())?;
    let train_info = mi_and_entropy(&training);
    let training_info = TrainingInfo {
        mi: if nu == 1 { 0.0 } else { train_info.mi },
        entropy: train_info.entropy,
        n_samples: training.n(),
    };

    let plain = |seed: u64| PlomConfig { seed, constraints: ConstraintMode::None, ..cfg.plom.clone() };

    // unconstrained learned sets along the candidate instants
    let mut records = Vec::with_capacity(bases.transient.len());
    let mut rotb_sets = Vec::with_capacity(bases.transient.len());
    for ib in &bases.transient {
        let seed = seeds.get(&format!("plom/rotb/{}", ib.n));
        let learned = generate(&model, &ib.basis.g, &plain(seed), ConstraintMode::None, &[])?;
        let m = learned_metrics(&learned, &ts, &training, cfg.mi_cap, seeds.get(&format!("mi/rotb/{}", ib.n)))?;
        records.push(SelectionRecord {
            n: ib.n,
            t: ib.t,
            gamma_deg: ib.gamma_deg,
            d2_over_nu: m.d2_over_nu,
            kl: m.kl,
            entropy: m.entropy,
            mi: m.mi,
            admissible: false,
        });
        rotb_sets.push((learned, m));
    }

    let rodb_seed = seeds.get("plom/rodb");
    let rodb_plain = generate(&model, &bases.dmaps.g, &plain(rodb_seed), ConstraintMode::None, &[])?;
    let rodb_metrics = learned_metrics(&rodb_plain, &ts, &training, cfg.mi_cap, seeds.get("mi/rodb"))?;
    let n_samp_ar = rotb_sets.first().map(|(_, m)| m.n_samples).unwrap_or(rodb_metrics.n_samples);
    let selection = build_report(
        records,
        nu,
        cfg.tau_c,
        training_info.mi,
        rodb_metrics.mi,
        training_info.n_samples,
        n_samp_ar,
    )?;
    warnings.extend(selection.warnings.iter().cloned());
    let (rotb_idx, rotb_fallback) = match selection.n_opt {
        Some(n) => (selection.records.iter().position(|r| r.n == n).unwrap_or(0), false),
        None => {
            let idx = selection
                .records
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.d2_over_nu.total_cmp(&b.1.d2_over_nu).then(a.0.cmp(&b.0)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            warnings.push(format!(
                "ROTB uses instant {} with the smallest concentration instead of an admissible one",
                selection.records[idx].n
            ));
            (idx, true)
        }
    };
    let rotb_n = bases.transient[rotb_idx].n;

    let mut regimes = Vec::with_capacity(3);
    let mut learned_sets = Vec::with_capacity(3);
    let mut rotb_sets = rotb_sets;
    let (rotb_plain, rotb_metrics) = rotb_sets.swap_remove(rotb_idx);
    let identity = identity_basis(ts.n_d());
    for name in REGIMES {
        let (g, n) = match name {
            "mcmc" => (&identity, None),
            "rodb" => (&bases.dmaps.g, None),
            _ => (&bases.transient[rotb_idx].basis.g, Some(rotb_n)),
        };
        let seed = match name {
            "mcmc" => seeds.get("plom/mcmc"),
            "rodb" => rodb_seed,
            _ => seeds.get(&format!("plom/rotb/{rotb_n}")),
        };
        let (learned, metrics) = if cfg.plom.constraints == ConstraintMode::None {
            match name {
                "rodb" => (rodb_plain.clone(), rodb_metrics.clone()),
                "rotb" => (rotb_plain.clone(), rotb_metrics.clone()),
                _ => {
                    let l = generate(&model, g, &plain(seed), ConstraintMode::None, &[])?;
                    let m = learned_metrics(&l, &ts, &training, cfg.mi_cap, seeds.get(&format!("mi/{name}")))?;
                    (l, m)
                }
            }
        } else {
            let pc = PlomConfig { seed, ..cfg.plom.clone() };
            let l = constrain(&model, g, &pc)?;
            if !l.converged {
                warnings.push(format!("{name}: constraints stopped at err {:?} after {} iterations", l.err_trace.last().map(|r| r.err), l.i_last));
            }
            let m = learned_metrics(&l, &ts, &training, cfg.mi_cap, seeds.get(&format!("mi/{name}/constrained")))?;
            (l, m)
        };
        let mean_norm = column_mean(&learned.eta_ar).norm();
        let cov_dev = (covariance(&learned.eta_ar) - DMatrix::identity(nu, nu)).norm();
        regimes.push(RegimeSummary {
            name: name.to_string(),
            basis_dim: g.ncols(),
            n,
            metrics,
            constraints: learned.mode,
            converged: learned.converged,
            iterations: learned.i_last,
            final_err: learned.err_trace.last().map(|r| r.err),
            mean_norm,
            cov_dev,
        });
        learned_sets.push((name.to_string(), learned));
    }

    let record = RunRecord {
        schema_version: SCHEMA_VERSION,
        provenance: Provenance {
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
            seeds,
            mi_cap: cfg.mi_cap,
        },
        config: cfg.clone(),
        data,
        dmaps: KernelBasisSummary::of(&bases.dmaps),
        dmaps_self_angle_deg: bases.dmaps_self_angle_deg,
        isde: bases.isde.clone(),
        training_info,
        selection,
        rotb_instant: rotb_n,
        rotb_fallback,
        regimes,
        warnings,
    };
    Ok(RunOutput { record, bases, learned: learned_sets })
}

fn ensure_dirs(out: &Path) -> Result<()> {
    fs::create_dir_all(out.join("curves"))?;
    fs::create_dir_all(out.join("learned"))?;
    Ok(())
}

/// Pretty JSON with a trailing newline, as written to the artifact files.
pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    Ok(text)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, to_json(value)?)?;
    Ok(())
}

fn bases_curves(out: &Path, bases: &BasesOutput) -> Result<()> {
    let curves = out.join("curves");
    let rows: Vec<Vec<f64>> =
        bases.dmaps.eigvals.iter().enumerate().map(|(i, &v)| vec![(i + 1) as f64, v]).collect();
    write_table(&curves.join("dmaps_eigenvalues.csv"), &["beta", "eigenvalue"], &rows)?;
    let mut rows = Vec::new();
    for ib in &bases.transient {
        for (i, &v) in ib.basis.eigvals.iter().enumerate() {
            rows.push(vec![ib.n as f64, ib.t, (i + 1) as f64, v]);
        }
    }
    write_table(&curves.join("transient_eigenvalues.csv"), &["n", "t", "beta", "eigenvalue"], &rows)?;
    let rows: Vec<Vec<f64>> =
        bases.transient.iter().map(|ib| vec![ib.n as f64, ib.t, ib.gamma_deg, ib.gamma_span_deg]).collect();
    write_table(&curves.join("angles.csv"), &["n", "t", "gamma_deg", "gamma_span_deg"], &rows)?;
    let rows: Vec<Vec<f64>> = bases
        .y_bar
        .iter()
        .zip(&bases.sigma_bar)
        .enumerate()
        .map(|(i, (&y, &s))| vec![(i + 1) as f64, y, s])
        .collect();
    write_table(&curves.join("convergence.csv"), &["n", "y_bar", "sigma_bar"], &rows)?;
    Ok(())
}

/// Writes run.json, curves/*.csv and learned/*.bin under `out`.
pub fn write_run(out: &Path, run: &RunOutput) -> Result<()> {
    ensure_dirs(out)?;
    bases_curves(out, &run.bases)?;
    let curves = out.join("curves");
    let rows: Vec<Vec<f64>> = run
        .record
        .selection
        .records
        .iter()
        .map(|r| vec![r.n as f64, r.t, r.gamma_deg, r.d2_over_nu, r.kl, r.entropy, r.mi, f64::from(u8::from(r.admissible))])
        .collect();
    write_table(
        &curves.join("selection.csv"),
        &["n", "t", "gamma_deg", "d2_over_nu", "kl", "entropy", "mi", "admissible"],
        &rows,
    )?;
    for (name, l) in &run.learned {
        write_bin(&out.join("learned").join(format!("{name}.bin")), &l.eta_ar)?;
        if !l.err_trace.is_empty() {
            let rows: Vec<Vec<f64>> = l.err_trace.iter().map(|r| vec![r.i as f64, r.err, r.alpha]).collect();
            write_table(&curves.join(format!("constraints_{name}.csv")), &["i", "err", "alpha"], &rows)?;
        }
    }
    write_json(&out.join("run.json"), &run.record)
}

#[derive(Clone, Debug, Serialize)]
pub struct AngleRow {
    pub n: usize,
    pub t: f64,
    pub gamma_deg: f64,
    pub gamma_span_deg: f64,
}

/// Record written by the `bases` subcommand.
#[derive(Clone, Debug, Serialize)]
pub struct BasesRecord {
    pub schema_version: u32,
    pub provenance: Provenance,
    pub config: RunConfig,
    pub data: DataSummary,
    pub dmaps: KernelBasisSummary,
    pub dmaps_self_angle_deg: f64,
    pub isde: IsdeSummary,
    pub angles: Vec<AngleRow>,
    pub warnings: Vec<String>,
}

pub fn run_bases(cfg: &RunConfig) -> Result<(BasesRecord, BasesOutput)> {
    cfg.validate()?;
    let mut seeds = SeedBook::new(cfg.seed);
    let (ts, data) = load_training(cfg)?;
    let model = GkdeModel::new(ts);
    let bases = compute_bases(cfg, &model, &mut seeds)?;
    let record = BasesRecord {
        schema_version: SCHEMA_VERSION,
        provenance: Provenance { crate_version: env!("CARGO_PKG_VERSION").to_string(), seeds, mi_cap: cfg.mi_cap },
        config: cfg.clone(),
        data,
        dmaps: KernelBasisSummary::of(&bases.dmaps),
        dmaps_self_angle_deg: bases.dmaps_self_angle_deg,
        isde: bases.isde.clone(),
        angles: bases
            .transient
            .iter()
            .map(|ib| AngleRow { n: ib.n, t: ib.t, gamma_deg: ib.gamma_deg, gamma_span_deg: ib.gamma_span_deg })
            .collect(),
        warnings: bases.warnings.clone(),
    };
    Ok((record, bases))
}

/// Writes bases.json, the eigenvalue and angle curves and the basis matrices.
pub fn write_bases(out: &Path, record: &BasesRecord, bases: &BasesOutput) -> Result<()> {
    ensure_dirs(out)?;
    bases_curves(out, bases)?;
    fs::create_dir_all(out.join("bases"))?;
    write_bin(&out.join("bases").join("dmaps.bin"), &bases.dmaps.g)?;
    for ib in &bases.transient {
        write_bin(&out.join("bases").join(format!("transient_{}.bin", ib.n)), &ib.basis.g)?;
    }
    write_json(&out.join("bases.json"), record)
}

/// One row per α of the Gaussian-reference comparison.
#[derive(Clone, Debug, Serialize)]
pub struct ReferenceRow {
    pub alpha: usize,
    pub lambda_hat: Option<f64>,
    pub exact: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReferenceEntry {
    pub run: ReferenceRun,
    pub table: Vec<ReferenceRow>,
}

#[derive(Clone, Debug, Serialize)]
pub struct ReferenceRecord {
    pub schema_version: u32,
    pub crate_version: String,
    pub runs: Vec<ReferenceEntry>,
}

/// Gaussian reference over a grid of n_d values.
pub fn run_reference_grid(cfgs: &[ReferenceConfig]) -> Result<ReferenceRecord> {
    let mut runs = Vec::with_capacity(cfgs.len());
    for c in cfgs {
        let run = run_reference(c)?.run;
        let lam = &run.spectrum.lambda_hat;
        let table = (0..=A_MAX)
            .map(|alpha| ReferenceRow { alpha, lambda_hat: lam.get(alpha).copied(), exact: exact_rate(alpha) })
            .collect();
        runs.push(ReferenceEntry { run, table });
    }
    Ok(ReferenceRecord { schema_version: SCHEMA_VERSION, crate_version: env!("CARGO_PKG_VERSION").to_string(), runs })
}

pub fn write_reference(out: &Path, rec: &ReferenceRecord) -> Result<()> {
    fs::create_dir_all(out.join("curves"))?;
    let mut lam = Vec::new();
    let mut conv = Vec::new();
    let mut err = Vec::new();
    for e in &rec.runs {
        let nd = e.run.config.n_d as f64;
        for r in &e.table {
            lam.push(vec![nd, r.alpha as f64, r.lambda_hat.unwrap_or(f64::NAN), r.exact]);
        }
        for (i, (&y, &s)) in e.run.y_bar.iter().zip(&e.run.sigma_bar).enumerate() {
            conv.push(vec![nd, (i + 1) as f64, y, s]);
        }
        err.push(vec![nd, e.run.spectrum.err_lambda]);
    }
    let curves = out.join("curves");
    write_table(&curves.join("reference_lambda.csv"), &["n_d", "alpha", "lambda_hat", "exact"], &lam)?;
    write_table(&curves.join("reference_convergence.csv"), &["n_d", "n", "y_bar", "sigma_bar"], &conv)?;
    write_table(&curves.join("reference_err.csv"), &["n_d", "err_lambda"], &err)?;
    write_json(&out.join("reference.json"), rec)
}

#[derive(Clone, Debug, Serialize)]
pub struct SampleInfo {
    pub nu: usize,
    pub n: usize,
    pub n_total: usize,
    pub mi: f64,
    pub entropy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct MetricsRecord {
    pub schema_version: u32,
    pub a: SampleInfo,
    pub b: SampleInfo,
    /// D̂(a ‖ b).
    pub kl_ab: f64,
    /// D̂(b ‖ a).
    pub kl_ba: f64,
}

/// Information metrics of two sample matrices (realizations as columns).
pub fn run_metrics(a: DMatrix<f64>, b: DMatrix<f64>, cap: usize, seed: u64) -> Result<MetricsRecord> {
    let sa = SampleSet::capped(a, cap, derive_seed(seed, "metrics/a"))?;
    let sb = SampleSet::capped(b, cap, derive_seed(seed, "metrics/b"))?;
    let info = |s: &SampleSet| {
        let e = mi_and_entropy(s);
        SampleInfo {
            nu: s.nu(),
            n: s.n(),
            n_total: s.n_total(),
            mi: if s.nu() == 1 { 0.0 } else { e.mi },
            entropy: e.entropy,
        }
    };
    Ok(MetricsRecord {
        schema_version: SCHEMA_VERSION,
        kl_ab: kl_divergence(&sa, &sb)?,
        kl_ba: kl_divergence(&sb, &sa)?,
        a: info(&sa),
        b: info(&sb),
    })
}
