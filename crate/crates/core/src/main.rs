use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use riesz::basis::BasisConfig;
use riesz::bench::{run_grid, to_csv, BenchmarkCase};
use riesz::data::Dataset;
use riesz::eif::{one_step_estimate, EstimatorSettings};
use riesz::mlp::MlpConfig;
use riesz::nuisance::{FamilyChoice, NuisanceSettings};
use riesz::riesz::{fit_representers, Ridge, RieszMethod, RieszSettings};
use riesz::sim::{truth_oracle, Dgp, DgpAppendix, DgpDiscrete};
use riesz::spec::{builtin_spec, parse_spec, EstimandSpec};
use riesz::verify::{run_checks, CheckName, VerifyOptions};
use riesz::{Error, Result};

#[derive(Parser)]
#[command(name = "riesz", version, about = "Debiased estimation of nested-regression estimands via Riesz regression")]
struct Cli {
    /// Worker threads (default 1; `benchmark` defaults to all cores).
    #[arg(long, global = true, env = "RIESZ_THREADS")]
    threads: Option<usize>,

    /// Directory that relative output paths are written under.
    #[arg(long, global = true, env = "RIESZ_OUT_DIR")]
    out_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset (CSV plus schema sidecar).
    Simulate(SimulateArgs),
    /// Cross-fit one-step estimate with influence-function inference.
    Estimate(EstimateArgs),
    /// Fit the Riesz representers of an estimand on a dataset.
    Fit(FitArgs),
    /// Run the numerical identity checks.
    Verify(VerifyArgs),
    /// Monte Carlo benchmark table.
    Benchmark(BenchmarkArgs),
    /// Ground-truth value of an estimand under a known DGP.
    Truth(TruthArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum DgpKind {
    Appendix,
    Discrete,
}

#[derive(Args)]
struct DgpArgs {
    /// Built-in data-generating process.
    #[arg(long, value_enum, default_value = "appendix")]
    dgp: DgpKind,
    /// JSON file overriding the DGP parameters (takes precedence over --dgp).
    #[arg(long)]
    dgp_file: Option<PathBuf>,
}

impl DgpArgs {
    fn load(&self) -> Result<Dgp> {
        let dgp = match &self.dgp_file {
            Some(p) => serde_json::from_str(&read(p)?)?,
            None => match self.dgp {
                DgpKind::Appendix => Dgp::Appendix(DgpAppendix::default()),
                DgpKind::Discrete => Dgp::Discrete(DgpDiscrete::default()),
            },
        };
        dgp.validate()?;
        Ok(dgp)
    }
}

#[derive(Args)]
struct SpecArgs {
    /// Built-in estimand: mean_treated, ate, att_control_mean, nde.
    #[arg(long, conflicts_with = "spec")]
    builtin: Option<String>,
    /// Estimand document (JSON).
    #[arg(long)]
    spec: Option<PathBuf>,
}

impl SpecArgs {
    fn load(&self) -> Result<EstimandSpec> {
        match (&self.builtin, &self.spec) {
            (Some(name), None) => builtin_spec(name),
            (None, Some(path)) => parse_spec(&read(path)?),
            _ => Err(Error::Usage("exactly one of --builtin or --spec is required".into())),
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodKind {
    Sieve,
    Mlp,
}

#[derive(Clone, Copy, ValueEnum)]
enum FamilyKind {
    Auto,
    LeastSquares,
    Logistic,
}

#[derive(Args)]
struct MethodArgs {
    #[arg(long, value_enum, default_value = "sieve")]
    method: MethodKind,
    /// Polynomial degree of real-valued columns in both bases.
    #[arg(long, default_value_t = 1)]
    degree: u32,
    /// Override the representer basis degree.
    #[arg(long)]
    alpha_degree: Option<u32>,
    /// Override the regression basis degree.
    #[arg(long)]
    q_degree: Option<u32>,
    /// Use an intercept-only representer basis.
    #[arg(long)]
    alpha_intercept_only: bool,
    /// Use an intercept-only regression basis.
    #[arg(long)]
    q_intercept_only: bool,
    /// Ridge penalty: `auto` or a number >= 0.
    #[arg(long, default_value = "auto")]
    ridge: String,
    #[arg(long, value_enum, default_value = "auto")]
    family: FamilyKind,
    /// Clip |alpha| at this bound.
    #[arg(long)]
    clip: Option<f64>,
    #[arg(long, default_value_t = 500)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-2)]
    learning_rate: f64,
    #[arg(long, default_value_t = 4)]
    width: usize,
    #[arg(long, default_value_t = 2)]
    hidden_layers: usize,
    /// Mini-batch size (default full batch).
    #[arg(long)]
    batch_size: Option<usize>,
}

impl MethodArgs {
    fn ridge(&self) -> Result<Ridge> {
        if self.ridge == "auto" {
            return Ok(Ridge::Auto);
        }
        match self.ridge.parse::<f64>() {
            Ok(l) if l >= 0.0 && l.is_finite() => Ok(Ridge::Fixed(l)),
            _ => Err(Error::Usage(format!("--ridge must be `auto` or a number >= 0, got `{}`", self.ridge))),
        }
    }

    fn basis(&self, degree: Option<u32>, intercept_only: bool) -> Result<BasisConfig> {
        let degree = degree.unwrap_or(self.degree);
        if degree == 0 {
            return Err(Error::Usage("basis degree must be at least 1".into()));
        }
        Ok(if intercept_only {
            BasisConfig::intercept_only()
        } else {
            BasisConfig::with_degree(degree)
        })
    }

    fn riesz(&self, seed: u64) -> Result<RieszSettings> {
        let method = match self.method {
            MethodKind::Sieve => RieszMethod::Sieve,
            MethodKind::Mlp => {
                let cfg = MlpConfig {
                    hidden_layers: self.hidden_layers,
                    width: self.width,
                    learning_rate: self.learning_rate,
                    epochs: self.epochs,
                    batch_size: self.batch_size,
                    seed,
                    ..Default::default()
                };
                cfg.validate()?;
                RieszMethod::Mlp(cfg)
            }
        };
        if let Some(c) = self.clip {
            if !(c > 0.0) {
                return Err(Error::Usage("--clip must be positive".into()));
            }
        }
        Ok(RieszSettings {
            method,
            basis: self.basis(self.alpha_degree, self.alpha_intercept_only)?,
            ridge: self.ridge()?,
            clip: self.clip,
        })
    }

    fn nuisance(&self) -> Result<NuisanceSettings> {
        Ok(NuisanceSettings {
            basis: self.basis(self.q_degree, self.q_intercept_only)?,
            ridge: self.ridge()?,
            family: match self.family {
                FamilyKind::Auto => FamilyChoice::Auto,
                FamilyKind::LeastSquares => FamilyChoice::LeastSquares,
                FamilyKind::Logistic => FamilyChoice::Logistic,
            },
        })
    }

    fn estimator(&self, folds: usize, min_fold_rows: usize, level: f64, seed: u64) -> Result<EstimatorSettings> {
        let s = EstimatorSettings {
            riesz: self.riesz(seed)?,
            nuisance: self.nuisance()?,
            folds,
            min_fold_rows,
            level,
            seed,
        };
        s.validate()?;
        Ok(s)
    }
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    dgp: DgpArgs,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    seed: u64,
    /// Output CSV path; the schema is written next to it.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EstimateArgs {
    /// Input CSV (with `<stem>.schema.json` alongside).
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    method: MethodArgs,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 50)]
    min_fold_rows: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    #[arg(long)]
    seed: u64,
    /// Report path (JSON); printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    spec: SpecArgs,
    /// Contrast value to fit when the estimand has a contrast (default: first arm).
    #[arg(long)]
    arm: Option<f64>,
    #[command(flatten)]
    method: MethodArgs,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct VerifyArgs {
    /// Checks to run (default: all). Repeatable.
    #[arg(long = "check")]
    checks: Vec<String>,
    #[arg(long, default_value_t = 2000)]
    n: usize,
    #[arg(long)]
    seed: u64,
    #[arg(long, hide = true)]
    inject_sign_flip: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    /// The NDE and double-robustness cases.
    Acceptance,
    /// One small case per built-in.
    Smoke,
}

#[derive(Args)]
struct BenchmarkArgs {
    /// Named grid; otherwise a single case from the flags below.
    #[arg(long, value_enum)]
    grid: Option<Grid>,
    #[command(flatten)]
    dgp: DgpArgs,
    #[command(flatten)]
    spec: SpecArgs,
    #[command(flatten)]
    method: MethodArgs,
    #[arg(long, default_value_t = 1000)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    replicates: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long, default_value_t = 50)]
    min_fold_rows: usize,
    #[arg(long, default_value_t = 0.95)]
    level: f64,
    /// Known target value (default: truth oracle).
    #[arg(long)]
    truth: Option<f64>,
    #[arg(long)]
    seed: u64,
    /// Leave out the runtime column.
    #[arg(long)]
    no_runtime: bool,
    /// Table path (CSV); printed to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TruthArgs {
    #[command(flatten)]
    dgp: DgpArgs,
    #[command(flatten)]
    spec: SpecArgs,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path)
        .map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("cannot read {}: {e}", path.display()))))
}

struct Output {
    dir: Option<PathBuf>,
}

impl Output {
    fn resolve(&self, path: &Path) -> PathBuf {
        match &self.dir {
            Some(d) if path.is_relative() => d.join(path),
            _ => path.to_path_buf(),
        }
    }

    fn prepare(&self, path: &Path) -> Result<PathBuf> {
        let p = self.resolve(path);
        if let Some(parent) = p.parent() {
            if !parent.as_os_str().is_empty() {
                fs::create_dir_all(parent)?;
            }
        }
        Ok(p)
    }

    /// Writes `text` to `path`, or prints it when no path is given.
    fn emit(&self, path: Option<&Path>, text: &str) -> Result<()> {
        match path {
            Some(p) => {
                let p = self.prepare(p)?;
                fs::write(&p, text)?;
                eprintln!("wrote {}", p.display());
            }
            None => {
                let mut stdout = std::io::stdout().lock();
                match stdout.write_all(text.as_bytes()).and_then(|_| stdout.flush()) {
                    Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => std::process::exit(0),
                    r => r?,
                }
            }
        }
        Ok(())
    }
}

fn simulate(args: &SimulateArgs, out: &Output) -> Result<()> {
    if args.n == 0 {
        return Err(Error::Usage("--n must be at least 1".into()));
    }
    let dgp = args.dgp.load()?;
    let data = dgp.simulate(args.n, args.seed)?;
    let path = out.prepare(&args.out)?;
    let sidecar = data.write(&path)?;
    println!("dgp: {}", dgp.name());
    println!("n: {}", data.n_rows());
    println!("seed: {}", args.seed);
    for (j, col) in data.schema.columns.iter().enumerate() {
        println!("mean {}: {:.6}", col.name, data.mean(j));
    }
    println!("data: {}", path.display());
    println!("schema: {}", sidecar.display());
    Ok(())
}

fn estimate(args: &EstimateArgs, out: &Output) -> Result<()> {
    let spec = args.spec.load()?;
    let data = Dataset::read(&args.data)?;
    let settings = args.method.estimator(args.folds, args.min_fold_rows, args.level, args.seed)?;
    let report = one_step_estimate(&spec, &data, &settings)?;
    eprintln!(
        "{}: theta_hat = {:.6}, se = {:.6}, {:.0}% CI [{:.6}, {:.6}], plug-in = {:.6}",
        report.estimand,
        report.theta_hat,
        report.std_error,
        100.0 * report.ci.level,
        report.ci.lo,
        report.ci.hi,
        report.plug_in
    );
    out.emit(args.out.as_deref(), &report.to_document())
}

fn fit(args: &FitArgs, out: &Output) -> Result<()> {
    let spec = args.spec.load()?;
    let arm = match (&spec.contrast, args.arm) {
        (Some(c), None) => spec.resolve(c.values[0]),
        (Some(_), Some(v)) => spec.resolve(v),
        (None, Some(_)) => return Err(Error::Usage("--arm needs an estimand with a contrast".into())),
        (None, None) => spec,
    };
    let data = Dataset::read(&args.data)?;
    let bound = arm.bind(&data.schema)?;
    let fits = fit_representers(&bound, &data, &args.method.riesz(args.seed)?)?;
    for (k, f) in (1..).zip(&fits) {
        eprintln!("alpha_{k}: fitted Riesz loss {:.6}", f.fitted_loss);
    }
    out.emit(args.out.as_deref(), &(serde_json::to_string_pretty(&fits)? + "\n"))
}

fn verify(args: &VerifyArgs, out: &Output) -> Result<bool> {
    let checks = if args.checks.is_empty() {
        CheckName::ALL.to_vec()
    } else {
        args.checks.iter().map(|c| c.parse()).collect::<Result<Vec<CheckName>>>()?
    };
    if args.n < 100 {
        return Err(Error::Usage("--n must be at least 100".into()));
    }
    let options = VerifyOptions {
        n: args.n,
        seed: args.seed,
        inject_sign_flip: args.inject_sign_flip,
    };
    let report = run_checks(&checks, &options)?;
    for c in &report.checks {
        println!(
            "{} {:<15} residual {:.3e} (tolerance {:.0e})",
            if c.passed { "PASS" } else { "FAIL" },
            c.name.as_str(),
            c.residual,
            c.tolerance
        );
        for (label, r) in &c.cases {
            println!("       {label:<28} {r:.3e}");
        }
    }
    if let Some(p) = &args.out {
        out.emit(Some(p), &report.to_document())?;
    }
    Ok(report.passed)
}

fn benchmark_cases(args: &BenchmarkArgs) -> Result<Vec<BenchmarkCase>> {
    let base = |spec: EstimandSpec, dgp: Dgp, n: usize, settings: EstimatorSettings| BenchmarkCase {
        dgp,
        spec,
        settings,
        n,
        replicates: args.replicates,
        seed: args.seed,
        truth: None,
    };
    let settings = args
        .method
        .estimator(args.folds, args.min_fold_rows, args.level, args.seed)?;
    match args.grid {
        None => {
            let mut c = base(args.spec.load()?, args.dgp.load()?, args.n, settings);
            c.truth = args.truth;
            Ok(vec![c])
        }
        Some(Grid::Smoke) => {
            let discrete = Dgp::Discrete(DgpDiscrete::default());
            let appendix = Dgp::Appendix(DgpAppendix::default());
            Ok(["mean_treated", "ate", "att_control_mean", "nde"]
                .iter()
                .map(|name| {
                    let dgp = if *name == "nde" { appendix.clone() } else { discrete.clone() };
                    Ok(base(builtin_spec(name)?, dgp, args.n, settings.clone()))
                })
                .collect::<Result<Vec<_>>>()?)
        }
        Some(Grid::Acceptance) => {
            let discrete = Dgp::Discrete(DgpDiscrete::default());
            let appendix = Dgp::Appendix(DgpAppendix::default());
            let with_bases = |alpha: BasisConfig, q: BasisConfig| {
                let mut s = settings.clone();
                s.riesz.basis = alpha;
                s.nuisance.basis = q;
                s
            };
            let saturated = BasisConfig::default();
            let intercept = BasisConfig::intercept_only();
            Ok(vec![
                base(builtin_spec("nde")?, appendix, 5000, settings.clone()),
                base(builtin_spec("ate")?, discrete.clone(), 20000, with_bases(saturated, intercept)),
                base(builtin_spec("ate")?, discrete, 20000, with_bases(intercept, saturated)),
            ])
        }
    }
}

fn benchmark(args: &BenchmarkArgs, out: &Output) -> Result<()> {
    let rows = run_grid(&benchmark_cases(args)?)?;
    out.emit(args.out.as_deref(), &to_csv(&rows, !args.no_runtime))
}

fn truth(args: &TruthArgs, out: &Output) -> Result<()> {
    let spec = args.spec.load()?;
    let dgp = args.dgp.load()?;
    let report = truth_oracle(&spec, &dgp)?;
    eprintln!("{}: theta = {:.15}", report.spec, report.theta);
    out.emit(args.out.as_deref(), &(serde_json::to_string_pretty(&report)? + "\n"))
}

fn run(cli: Cli) -> Result<bool> {
    let default_threads = match cli.command {
        Command::Benchmark(_) => 0,
        _ => 1,
    };
    let threads = cli.threads.unwrap_or(default_threads);
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::Usage(format!("cannot start thread pool: {e}")))?;
    let out = Output { dir: cli.out_dir };
    match &cli.command {
        Command::Simulate(a) => simulate(a, &out)?,
        Command::Estimate(a) => estimate(a, &out)?,
        Command::Fit(a) => fit(a, &out)?,
        Command::Verify(a) => return verify(a, &out),
        Command::Benchmark(a) => benchmark(a, &out)?,
        Command::Truth(a) => truth(a, &out)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("error: one or more checks failed");
            ExitCode::from(riesz::error::Category::Numerical.exit_code() as u8)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.category().exit_code() as u8)
        }
    }
}
