//! `plom`: config-driven runs, basis and reference diagnostics, sampling and
//! information metrics.
//!
//! Exit status 0 on success, 1 on input errors, 2 on numerical failures. On
//! failure a JSON error record is printed to stderr and, when possible,
//! written to `error.json` in the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;

use plom_core::error::Error;
use plom_core::gaussian_reference::{ReferenceConfig, REFERENCE_DT};
use plom_core::gkde::GkdeModel;
use plom_core::info_metrics::SampleSet;
use plom_core::io::{read_bin, read_matrix, write_bin, write_csv, write_table};
use plom_core::pipeline::{
    learned_metrics, load_training, run_bases, run_metrics, run_pipeline, run_reference_grid, write_bases,
    write_json, write_reference, write_run, DataSummary, LearnedMetrics, RunConfig, SeedBook, OUTPUT_DIR_ENV,
    SCHEMA_VERSION,
};
use plom_core::plom::{constrain, generate, identity_basis, ConstraintMode, PlomConfig, TraceRow};
use plom_core::synthetic::{self, GeneratorKind, GeneratorSpec};

#[derive(Parser)]
#[command(name = "plom", version, about = "Probabilistic learning on manifolds with DMAPS and transient bases")]
struct Cli {
    /// Cap on worker threads (all cores by default).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Full pipeline from a TOML config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        o: Overrides,
    },
    /// Stop after the DMAPS and transient bases and their angles.
    Bases {
        config: Option<PathBuf>,
        #[command(flatten)]
        o: Overrides,
    },
    /// Gaussian reference: estimated versus exact spectrum.
    Reference {
        /// Training-set sizes; repeat or separate with commas.
        #[arg(long = "nd", value_delimiter = ',', default_value = "1200")]
        nd: Vec<usize>,
        /// Trajectories per training point (n_d when absent).
        #[arg(long)]
        n_mc: Option<usize>,
        #[arg(long, default_value_t = REFERENCE_DT)]
        delta_t: f64,
        /// Last simulated instant N.
        #[arg(long, default_value_t = 2)]
        steps: usize,
        /// Instant of the spectrum estimate.
        #[arg(long, default_value_t = 2)]
        t_index: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// KL divergence, mutual information and entropy of two sample files.
    Metrics {
        a: PathBuf,
        b: PathBuf,
        /// Subsample cap for the estimators.
        #[arg(long, default_value_t = plom_core::info_metrics::DEFAULT_SUBSAMPLE_CAP)]
        cap: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write metrics.json here.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Learned set for a given basis file (`identity` for the plain MCMC).
    Plom {
        config: Option<PathBuf>,
        /// Basis matrix n_d × m in the binary format, or `identity`.
        #[arg(long)]
        basis: String,
        #[command(flatten)]
        o: Overrides,
    },
    /// Writes a synthetic dataset described by a TOML spec or a preset.
    Gen {
        spec: Option<PathBuf>,
        #[arg(long, value_enum)]
        preset: Option<Preset>,
        #[arg(long)]
        seed: Option<u64>,
        /// Destination; `.bin` selects the binary format, anything else CSV.
        #[arg(long, short)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Preset {
    /// ν = 9, n_d = 400 multiconnected patches.
    Appli1,
    /// Degree-6 chaos expansion, 8 extracted terms.
    Appli2,
    /// Latent low-dimensional structure in a larger ambient space.
    Appli3,
    /// ν = 1, n_d = 1200 standard Gaussian.
    Gaussian,
}

impl Preset {
    fn spec(self, seed: u64) -> GeneratorSpec {
        match self {
            Preset::Appli1 => GeneratorSpec::appli1(seed),
            Preset::Appli2 => GeneratorSpec::appli2(seed),
            Preset::Appli3 => GeneratorSpec::new(GeneratorKind::high_dim(), 20, 400, seed),
            Preset::Gaussian => GeneratorSpec::new(GeneratorKind::Gaussian, 1, 1200, seed),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    None,
    Diagonal,
    Full,
}

/// Flags that override config-file values.
#[derive(clap::Args)]
struct Overrides {
    /// Training data file (one realization per column).
    #[arg(long, conflicts_with = "preset")]
    input: Option<PathBuf>,
    /// Synthetic training data instead of a file.
    #[arg(long, value_enum)]
    preset: Option<Preset>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    kappa: Option<f64>,
    /// Number of simulated instants N.
    #[arg(long)]
    steps: Option<usize>,
    /// Single candidate instant; also sets N to it.
    #[arg(long = "n", conflicts_with = "instants")]
    single: Option<usize>,
    /// Candidate instants, comma separated.
    #[arg(long, value_delimiter = ',')]
    instants: Option<Vec<usize>>,
    #[arg(long)]
    n_mc: Option<usize>,
    #[arg(long)]
    jump: Option<f64>,
    #[arg(long)]
    tau_c: Option<f64>,
    #[arg(long)]
    n_mch: Option<usize>,
    #[arg(long, value_enum)]
    constraints: Option<ModeArg>,
    #[arg(long)]
    skip_pca: bool,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) {
        if let Some(p) = &self.input {
            cfg.input.path = Some(p.clone());
            cfg.input.synthetic = None;
        }
        if let Some(p) = self.preset {
            cfg.input.path = None;
            cfg.input.synthetic = Some(p.spec(self.seed.unwrap_or(cfg.seed)));
        }
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.kappa {
            cfg.kappa = v;
        }
        if let Some(v) = self.steps {
            cfg.n_steps = v;
        }
        if let Some(n) = self.single {
            cfg.n_steps = n;
            cfg.instants = Some(vec![n]);
        }
        if let Some(v) = &self.instants {
            cfg.instants = Some(v.clone());
            if self.steps.is_none() {
                cfg.n_steps = v.iter().copied().max().unwrap_or(cfg.n_steps).max(cfg.n_steps);
            }
        }
        if let Some(v) = self.n_mc {
            cfg.n_mc = v;
        }
        if let Some(v) = self.jump {
            cfg.jump_target = v;
        }
        if let Some(v) = self.tau_c {
            cfg.tau_c = v;
        }
        if let Some(v) = self.n_mch {
            cfg.plom.n_mch = v;
        }
        if let Some(m) = self.constraints {
            cfg.plom.constraints = match m {
                ModeArg::None => ConstraintMode::None,
                ModeArg::Diagonal => ConstraintMode::Diagonal,
                ModeArg::Full => ConstraintMode::Full,
            };
        }
        if self.skip_pca {
            cfg.skip_pca = true;
        }
    }
}

/// Flag, then environment, then config file.
fn output_dir(flag: Option<&PathBuf>, file: &Path) -> PathBuf {
    if let Some(p) = flag {
        return p.clone();
    }
    match std::env::var_os(OUTPUT_DIR_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => file.to_path_buf(),
    }
}

fn load_config(path: Option<&PathBuf>, o: &Overrides) -> Result<(RunConfig, PathBuf), Error> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    o.apply(&mut cfg);
    let out = output_dir(o.output.as_ref(), &cfg.output);
    cfg.output = out.clone();
    Ok((cfg, out))
}

#[derive(Serialize)]
struct ErrorRecord {
    schema_version: u32,
    status: &'static str,
    kind: &'static str,
    message: String,
}

fn fail(e: &Error, out: Option<&Path>) -> ExitCode {
    let input = e.is_input_error();
    let rec = ErrorRecord {
        schema_version: SCHEMA_VERSION,
        status: if input { "input-error" } else { "numerical-failure" },
        kind: e.kind(),
        message: e.to_string(),
    };
    if let Ok(s) = serde_json::to_string(&rec) {
        eprintln!("{s}");
    }
    if let Some(dir) = out {
        if fs::create_dir_all(dir).is_ok() {
            let _ = write_json(&dir.join("error.json"), &rec);
        }
    }
    ExitCode::from(if input { 1 } else { 2 })
}

fn cmd_run(config: &PathBuf, o: &Overrides) -> (Result<(), Error>, Option<PathBuf>) {
    let (cfg, out) = match load_config(Some(config), o) {
        Ok(v) => v,
        Err(e) => return (Err(e), None),
    };
    let res = (|| {
        let run = run_pipeline(&cfg)?;
        write_run(&out, &run)?;
        let r = &run.record;
        println!("output: {}", out.display());
        println!("nu = {}, n_d = {}", r.data.nu, r.data.n_d);
        println!("n\tgamma_deg\td2/nu\tkl\tmi\tadmissible");
        for s in &r.selection.records {
            println!("{}\t{:.4}\t{:.6}\t{:.6}\t{:.6}\t{}", s.n, s.gamma_deg, s.d2_over_nu, s.kl, s.mi, s.admissible);
        }
        match r.selection.n_opt {
            Some(n) => println!("n_opt = {n}"),
            None => println!("n_opt: none admissible, ROTB uses n = {}", r.rotb_instant),
        }
        for g in &r.regimes {
            println!(
                "{}: d2/nu = {:.6}, kl = {:.6}, mi = {:.6}, converged = {}",
                g.name, g.metrics.d2_over_nu, g.metrics.kl, g.metrics.mi, g.converged
            );
        }
        for w in &r.warnings {
            eprintln!("warning: {w}");
        }
        Ok(())
    })();
    (res, Some(out))
}

fn cmd_bases(config: Option<&PathBuf>, o: &Overrides) -> (Result<(), Error>, Option<PathBuf>) {
    let (cfg, out) = match load_config(config, o) {
        Ok(v) => v,
        Err(e) => return (Err(e), None),
    };
    let res = (|| {
        let (rec, bases) = run_bases(&cfg)?;
        write_bases(&out, &rec, &bases)?;
        println!("output: {}", out.display());
        println!("eps_dm = {:?}, m = {}, kappa = {}, delta_t = {:.6e}", rec.dmaps.eps_dm, rec.dmaps.m, rec.isde.kappa, rec.isde.delta_t);
        println!("DMAPS self angle = {:.4} deg", rec.dmaps_self_angle_deg);
        println!("n\tt\tgamma_deg\tgamma_span_deg");
        for a in &rec.angles {
            println!("{}\t{:.6e}\t{:.6}\t{:.6}", a.n, a.t, a.gamma_deg, a.gamma_span_deg);
        }
        for w in &rec.warnings {
            eprintln!("warning: {w}");
        }
        Ok(())
    })();
    (res, Some(out))
}

#[allow(clippy::too_many_arguments)]
fn cmd_reference(
    nd: &[usize],
    n_mc: Option<usize>,
    delta_t: f64,
    steps: usize,
    t_index: usize,
    seed: u64,
    output: Option<&PathBuf>,
) -> (Result<(), Error>, Option<PathBuf>) {
    let out = output_dir(output, Path::new("plom-reference"));
    let res = (|| {
        let cfgs: Vec<ReferenceConfig> = nd
            .iter()
            .map(|&n| ReferenceConfig { n_mc: n_mc.unwrap_or(n), delta_t, n_steps: steps, t_index, ..ReferenceConfig::new(n, seed) })
            .collect();
        let rec = run_reference_grid(&cfgs)?;
        write_reference(&out, &rec)?;
        println!("output: {}", out.display());
        for e in &rec.runs {
            println!("n_d = {}: err_lambda = {:.6}", e.run.config.n_d, e.run.spectrum.err_lambda);
            println!("alpha\tlambda_hat\texact");
            for r in &e.table {
                let v = r.lambda_hat.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into());
                println!("{}\t{}\t{}", r.alpha, v, r.exact);
            }
        }
        Ok(())
    })();
    (res, Some(out))
}

fn cmd_metrics(a: &Path, b: &Path, cap: usize, seed: u64, output: Option<&PathBuf>) -> Result<(), Error> {
    let rec = run_metrics(read_matrix(a)?, read_matrix(b)?, cap, seed)?;
    let text = serde_json::to_string_pretty(&rec).map_err(|e| Error::Parse(e.to_string()))?;
    println!("{text}");
    if let Some(dir) = output {
        fs::create_dir_all(dir)?;
        write_json(&dir.join("metrics.json"), &rec)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct PlomRecord {
    schema_version: u32,
    seeds: SeedBook,
    data: DataSummary,
    basis: String,
    basis_dim: usize,
    plom: PlomConfig,
    metrics: LearnedMetrics,
    converged: bool,
    iterations: usize,
    trace: Vec<TraceRow>,
}

fn cmd_plom(config: Option<&PathBuf>, basis: &str, o: &Overrides) -> (Result<(), Error>, Option<PathBuf>) {
    let (cfg, out) = match load_config(config, o) {
        Ok(v) => v,
        Err(e) => return (Err(e), None),
    };
    let res = (|| {
        cfg.validate()?;
        let (ts, data) = load_training(&cfg)?;
        let g = if basis == "identity" { identity_basis(ts.n_d()) } else { read_bin(Path::new(basis))? };
        if g.nrows() != ts.n_d() {
            return Err(Error::DimensionMismatch { expected: ts.n_d(), found: g.nrows() });
        }
        let mut seeds = SeedBook::new(cfg.seed);
        let pc = PlomConfig { seed: seeds.get("plom"), ..cfg.plom.clone() };
        let model = GkdeModel::new(ts.clone());
        let learned = if pc.constraints == ConstraintMode::None {
            generate(&model, &g, &pc, ConstraintMode::None, &[])?
        } else {
            constrain(&model, &g, &pc)?
        };
        let training = SampleSet::new(ts.eta().clone())?;
        let metrics = learned_metrics(&learned, &ts, &training, cfg.mi_cap, seeds.get("mi"))?;
        fs::create_dir_all(out.join("learned"))?;
        write_bin(&out.join("learned").join("learned.bin"), &learned.eta_ar)?;
        if !learned.err_trace.is_empty() {
            fs::create_dir_all(out.join("curves"))?;
            let rows: Vec<Vec<f64>> = learned.err_trace.iter().map(|r| vec![r.i as f64, r.err, r.alpha]).collect();
            write_table(&out.join("curves").join("constraints.csv"), &["i", "err", "alpha"], &rows)?;
        }
        println!("output: {}", out.display());
        println!("d2/nu = {:.6}, kl = {:.6}, mi = {:.6}", metrics.d2_over_nu, metrics.kl, metrics.mi);
        let rec = PlomRecord {
            schema_version: SCHEMA_VERSION,
            seeds,
            data,
            basis: basis.to_string(),
            basis_dim: g.ncols(),
            plom: pc,
            metrics,
            converged: learned.converged,
            iterations: learned.i_last,
            trace: learned.err_trace,
        };
        write_json(&out.join("plom.json"), &rec)
    })();
    (res, Some(out))
}

fn cmd_gen(spec: Option<&PathBuf>, preset: Option<Preset>, seed: Option<u64>, out: &Path) -> Result<(), Error> {
    let mut spec = match (spec, preset) {
        (Some(p), None) => {
            let text = fs::read_to_string(p)?;
            toml::from_str::<GeneratorSpec>(&text).map_err(|e| Error::Parse(e.to_string()))?
        }
        (None, Some(p)) => p.spec(0),
        _ => return Err(Error::InvalidInput("give either a spec file or --preset".into())),
    };
    if let Some(s) = seed {
        spec.seed = s;
    }
    let eta = synthetic::generate(&spec)?.into_eta();
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    match out.extension().and_then(|e| e.to_str()) {
        Some("bin") => write_bin(out, &eta)?,
        _ => write_csv(out, &eta)?,
    }
    println!("wrote {} ({} x {})", out.display(), eta.nrows(), eta.ncols());
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            return fail(&Error::InvalidInput("--threads must be positive".into()), None);
        }
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let (res, out) = match &cli.cmd {
        Cmd::Run { config, o } => cmd_run(config, o),
        Cmd::Bases { config, o } => cmd_bases(config.as_ref(), o),
        Cmd::Reference { nd, n_mc, delta_t, steps, t_index, seed, output } => {
            cmd_reference(nd, *n_mc, *delta_t, *steps, *t_index, *seed, output.as_ref())
        }
        Cmd::Metrics { a, b, cap, seed, output } => (cmd_metrics(a, b, *cap, *seed, output.as_ref()), output.clone()),
        Cmd::Plom { config, basis, o } => cmd_plom(config.as_ref(), basis, o),
        Cmd::Gen { spec, preset, seed, out } => (cmd_gen(spec.as_ref(), *preset, *seed, out), None),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e, out.as_deref()),
    }
}
