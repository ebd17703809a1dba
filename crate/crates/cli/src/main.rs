use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use robust_lsem::experiments::{run_experiment, simulated_model, ExperimentConfig, ExperimentMode};
use robust_lsem::generators::{
    gen_model2_instance, sample_observations, GenerativeConfig, Model2Config,
};
use robust_lsem::io::{
    read_graph, read_matrix, write_graph, write_json, write_matrix_csv, RecoverOutput,
};
use robust_lsem::lsem::sample_covariance;
use robust_lsem::recovery::{recover_all, RecoveryConfig, RowForm};
use robust_lsem::reduction::{reduce, verify_reduction};
use robust_lsem::rng::derive_seed;
use robust_lsem::robustness::{
    check_assumptions, condition_bound, estimate_condition_number, eta_bound, theorem_premise,
    AssumptionThresholds, ConditionConfig,
};
use robust_lsem::{Covariance, Error, ErrorClass, MixedGraph, ParamSet};

const EXIT_VALIDATION: u8 = 1;
const EXIT_NUMERICAL: u8 = 2;
const EXIT_USAGE: u8 = 64;

#[derive(Parser)]
#[command(
    name = "lsem",
    version,
    about = "Parameter recovery and robustness analysis for linear SEMs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a random instance and write graph, parameters and covariance.
    Generate(GenerateArgs),
    /// Recover edge weights from a covariance matrix.
    Recover(RecoverArgs),
    /// Estimate the condition number under entrywise perturbations.
    Condition(ConditionArgs),
    /// Check bow-freeness, the three assumptions and the premise.
    Check(CheckArgs),
    /// Reduce a bow-free graph to a layered one.
    Reduce(ReduceArgs),
    /// Run a seeded experiment and write its report.
    Experiment(ExperimentArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    /// Degree-bounded graph, uniform weights and spherical-vector noise.
    Model2,
    /// Random graph with weights in [-range, range] and SDD noise.
    Sdd,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, value_enum, default_value = "sdd")]
    kind: Kind,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, default_value_t = 0.3)]
    p: f64,
    #[arg(long, default_value_t = 1.0)]
    range: f64,
    /// Sphere dimension for model2; defaults to the minimum for (k, n).
    #[arg(long)]
    d: Option<usize>,
    /// Also write this many Gaussian observations to data.csv.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    seed: u64,
    #[arg(long, env = "LSEM_OUT_DIR")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct InputArgs {
    #[arg(long)]
    graph: PathBuf,
    /// Covariance matrix, CSV or JSON.
    #[arg(long, required_unless_present = "data", conflicts_with = "data")]
    sigma: Option<PathBuf>,
    /// Observations (rows) to estimate the covariance from.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Scale each observation to unit norm before estimating.
    #[arg(long, requires = "data")]
    normalize: bool,
}

impl InputArgs {
    fn load(&self) -> robust_lsem::Result<(MixedGraph, Covariance)> {
        let g = read_graph(&self.graph)?;
        let sigma = match (&self.sigma, &self.data) {
            (Some(p), _) => Covariance::exact(read_matrix(p)?),
            (None, Some(p)) => sample_covariance(&read_matrix(p)?, self.normalize)?,
            (None, None) => unreachable!("clap requires one of --sigma and --data"),
        };
        Ok((g, sigma))
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum RowFormArg {
    Transformed,
    HalfTrek,
}

#[derive(Args)]
struct RecoverArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, value_enum, default_value = "transformed")]
    row_form: RowFormArg,
    #[arg(long, default_value_t = 1e-10)]
    sing_tol: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConditionArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Perturbation levels; repeat or separate with commas.
    #[arg(long, value_delimiter = ',', default_value = "1e-8")]
    gamma: Vec<f64>,
    /// Degree bound in γ/√k; defaults to the graph's.
    #[arg(long)]
    k: Option<usize>,
    /// Put one entry exactly on the perturbation bound.
    #[arg(long)]
    tight: bool,
    /// Reject γ ≥ n⁻⁴ instead of flagging it.
    #[arg(long)]
    formal: bool,
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-trial ratios as CSV.
    #[arg(long)]
    ratios_csv: Option<PathBuf>,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    input: InputArgs,
    /// Edge weights (CSV or JSON); recovered from the covariance when absent.
    #[arg(long)]
    lambda: Option<PathBuf>,
    #[arg(long)]
    kappa_max: Option<f64>,
    #[arg(long, default_value_t = 1.0)]
    alpha_max: f64,
    #[arg(long, default_value_t = 1.0)]
    beta_max: f64,
    /// Also solve for η and the condition bound at this γ.
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReduceArgs {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long)]
    sigma: PathBuf,
    #[arg(long, env = "LSEM_OUT_DIR")]
    out_dir: PathBuf,
    /// Run the structural and numerical checks and add them to the manifest.
    #[arg(long)]
    verify: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    GeneStyle,
    Simulated,
    AssumptionSurvey,
}

#[derive(Args)]
struct ExperimentArgs {
    /// Full configuration as JSON; the other flags are ignored when given.
    #[arg(long, conflicts_with = "mode")]
    config: Option<PathBuf>,
    #[arg(long, value_enum, required_unless_present = "config")]
    mode: Option<ModeArg>,
    #[arg(long, required_unless_present = "config")]
    seed: Option<u64>,
    #[arg(long, value_delimiter = ',', default_value = "0.2")]
    p: Vec<f64>,
    #[arg(long, default_value_t = 2)]
    k: usize,
    #[arg(long, value_delimiter = ',', default_value = "20")]
    n: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "1")]
    range: Vec<f64>,
    #[arg(long, default_value_t = 0.1)]
    noise_eps: f64,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long, default_value_t = 10)]
    graphs: usize,
    #[arg(long, default_value_t = 0)]
    first_graph: usize,
    #[arg(long, default_value_t = 10)]
    runs: usize,
    #[arg(long, default_value_t = 50)]
    samples: usize,
    #[arg(long)]
    no_normalize: bool,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Mean condition number per cell as CSV.
    #[arg(long)]
    plot_csv: Option<PathBuf>,
}

impl ExperimentArgs {
    fn config(&self) -> robust_lsem::Result<ExperimentConfig> {
        if let Some(path) = &self.config {
            return Ok(serde_json::from_str(&fs::read_to_string(path)?)?);
        }
        let mode = match self.mode.expect("clap requires --mode") {
            ModeArg::GeneStyle => ExperimentMode::GeneStyle,
            ModeArg::Simulated => ExperimentMode::Simulated,
            ModeArg::AssumptionSurvey => ExperimentMode::AssumptionSurvey,
        };
        Ok(ExperimentConfig {
            mode,
            dataset_path: self
                .dataset
                .as_ref()
                .map(|p| p.to_string_lossy().into_owned()),
            p: self.p.clone(),
            k: self.k,
            n: self.n.clone(),
            range: self.range.clone(),
            noise_eps: self.noise_eps,
            gamma: self.gamma,
            graphs: self.graphs,
            first_graph: self.first_graph,
            runs_per_graph: self.runs,
            samples: self.samples,
            normalize: !self.no_normalize,
            seed: self.seed.expect("clap requires --seed"),
        })
    }
}

/// Writes to `out`, else to `$LSEM_OUT_DIR/name`, else to stdout.
fn emit(out: Option<&Path>, name: &str, text: &str) -> robust_lsem::Result<()> {
    let target = out
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os("LSEM_OUT_DIR").map(|d| PathBuf::from(d).join(name)));
    match target {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            fs::write(&path, text)?;
        }
        None => print!("{text}"),
    }
    Ok(())
}

fn pretty(v: &Value) -> robust_lsem::Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

fn generate(a: &GenerateArgs) -> robust_lsem::Result<()> {
    fs::create_dir_all(&a.out_dir)?;
    let (graph, params, sigma, extra): (MixedGraph, ParamSet, Covariance, Value) = match a.kind {
        Kind::Model2 => {
            let mut generative = GenerativeConfig::standard(a.n, a.k, a.seed);
            if let Some(d) = a.d {
                generative.d = d;
            }
            let cfg = Model2Config::new(generative, a.p);
            let inst = gen_model2_instance(&cfg)?;
            (
                inst.graph,
                inst.params,
                inst.sigma,
                json!({"model2": cfg, "omega_retries": inst.omega_retries}),
            )
        }
        Kind::Sdd => {
            let (g, p, s) = simulated_model(a.n, a.p, a.range, a.seed)?;
            (g, p, s, json!({"p": a.p, "range": a.range}))
        }
    };
    write_graph(&a.out_dir.join("graph.json"), &graph)?;
    write_json(&a.out_dir.join("params.json"), &params)?;
    write_matrix_csv(&a.out_dir.join("sigma.csv"), &sigma.sigma)?;
    if let Some(m) = a.samples {
        let x = sample_observations(&sigma, m, derive_seed(a.seed, &[99]))?;
        write_matrix_csv(&a.out_dir.join("data.csv"), &x)?;
    }
    let kind = match a.kind {
        Kind::Model2 => "model2",
        Kind::Sdd => "sdd",
    };
    let manifest = json!({
        "kind": kind,
        "n": a.n,
        "k": a.k,
        "seed": a.seed,
        "samples": a.samples,
        "config": extra,
    });
    write_json(&a.out_dir.join("manifest.json"), &manifest)
}

fn recover(a: &RecoverArgs) -> robust_lsem::Result<()> {
    let (g, sigma) = a.input.load()?;
    let cfg = RecoveryConfig {
        sing_tol: a.sing_tol,
        row_form: match a.row_form {
            RowFormArg::Transformed => RowForm::Transformed,
            RowFormArg::HalfTrek => RowForm::HalfTrek,
        },
        ..RecoveryConfig::default()
    };
    let res = recover_all(&g, &sigma, &cfg)?;
    emit(
        a.out.as_deref(),
        "lambda.json",
        &pretty(&json!(RecoverOutput::from(&res)))?,
    )
}

fn condition(a: &ConditionArgs) -> robust_lsem::Result<()> {
    let (g, sigma) = a.input.load()?;
    let cfg = ConditionConfig {
        trials: a.trials,
        gammas: a.gamma.clone(),
        seed: a.seed,
        k: a.k,
        enforce_tight: a.tight,
        formal: a.formal,
    };
    let recovery = RecoveryConfig::default();
    let est = estimate_condition_number(&g, &sigma, &cfg, &recovery)?;
    let lambda = recover_all(&g, &sigma, &recovery)?.lambda_hat;
    let profile = check_assumptions(&g, &sigma, &lambda, &AssumptionThresholds::default())?;
    let premise = theorem_premise(&profile);
    let k = a.k.unwrap_or_else(|| g.max_degree_k()).max(1);
    let gamma = a.gamma.iter().copied().fold(0.0, f64::max);
    let (eta, bound) = match eta_bound(&profile, g.n(), k, gamma) {
        Ok(c) => (json!(c), json!(condition_bound(&c, &profile, g.n(), k))),
        Err(e) => (json!({"error": e.to_string()}), Value::Null),
    };
    let report = json!({
        "kappa_hat": est.kappa_hat,
        "gamma_grid": est.gamma_grid,
        "trials": est.trials,
        "failures": est.failures,
        "outside_model": est.outside_model,
        "profile": profile,
        "premise": premise,
        "eta": eta,
        "bound": bound,
    });
    if let Some(path) = &a.ratios_csv {
        let mut csv = String::from("gamma,trial,ratio\n");
        for t in &est.trials {
            let r = t.ratio.map_or(String::new(), |r| format!("{r:?}"));
            csv.push_str(&format!("{:?},{},{r}\n", t.gamma, t.trial));
        }
        fs::write(path, csv)?;
    }
    emit(a.out.as_deref(), "condition.json", &pretty(&report)?)
}

fn check(a: &CheckArgs) -> robust_lsem::Result<()> {
    let (g, sigma) = a.input.load()?;
    g.validate_bow_free().into_result()?;
    let lambda = match &a.lambda {
        Some(p) => {
            let l = read_matrix(p)?;
            robust_lsem::lsem::check_lambda_pattern(&g, &l)?;
            l
        }
        None => recover_all(&g, &sigma, &RecoveryConfig::default())?.lambda_hat,
    };
    let thresholds = AssumptionThresholds {
        kappa_max: a.kappa_max.unwrap_or(f64::INFINITY),
        alpha_max: a.alpha_max,
        beta_max: a.beta_max,
        weight_floor: None,
    };
    let profile = check_assumptions(&g, &sigma, &lambda, &thresholds)?;
    let premise = theorem_premise(&profile);
    let k = g.max_degree_k().max(1);
    let (eta, bound) = match a.gamma.map(|gamma| eta_bound(&profile, g.n(), k, gamma)) {
        Some(Ok(c)) => (json!(c), json!(condition_bound(&c, &profile, g.n(), k))),
        Some(Err(e)) => (json!({"error": e.to_string()}), Value::Null),
        None => (Value::Null, Value::Null),
    };
    let report = json!({
        "bow_free": true,
        "layered": g.check_k_layered()?,
        "k": k,
        "profile": profile,
        "passes_all": profile.passes_all(),
        "premise": premise,
        "eta": eta,
        "bound": bound,
    });
    emit(a.out.as_deref(), "check.json", &pretty(&report)?)
}

fn reduce_cmd(a: &ReduceArgs) -> robust_lsem::Result<()> {
    let g = read_graph(&a.graph)?;
    let sigma = Covariance::exact(read_matrix(&a.sigma)?);
    let out = reduce(&g, &sigma)?;
    fs::create_dir_all(&a.out_dir)?;
    write_graph(&a.out_dir.join("graph.json"), &out.graph.g_prime)?;
    write_matrix_csv(&a.out_dir.join("sigma.csv"), &out.sigma_prime.sigma)?;
    let verification = if a.verify {
        Some(verify_reduction(&g, &sigma, &out, 1e-8)?)
    } else {
        None
    };
    let manifest = json!({
        "n": g.n(),
        "n_prime": out.graph.g_prime.n(),
        "r": out.graph.r,
        "layers": out.graph.k_layers,
        "gadgets": out.graph.gadgets,
        "literal_cross_check": out.literal_cross_check,
        "verification": verification,
    });
    write_json(&a.out_dir.join("manifest.json"), &manifest)?;
    match verification {
        Some(v) if !v.passed() => Err(Error::Pattern(
            "reduction failed verification; see manifest.json".into(),
        )),
        _ => Ok(()),
    }
}

fn experiment(a: &ExperimentArgs) -> robust_lsem::Result<()> {
    let cfg = a.config()?;
    let start = Instant::now();
    let report = run_experiment(&cfg)?;
    eprintln!(
        "experiment finished in {:.2}s",
        start.elapsed().as_secs_f64()
    );
    if let Some(path) = &a.plot_csv {
        fs::write(path, report.plot_csv())?;
    }
    emit(a.out.as_deref(), "report.json", &report.to_json()?)
}

fn run(cli: &Cli) -> robust_lsem::Result<()> {
    match &cli.command {
        Command::Generate(a) => generate(a),
        Command::Recover(a) => recover(a),
        Command::Condition(a) => condition(a),
        Command::Check(a) => check(a),
        Command::Reduce(a) => reduce_cmd(a),
        Command::Experiment(a) => experiment(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e.class() {
                ErrorClass::Numerical => ExitCode::from(EXIT_NUMERICAL),
                ErrorClass::Validation | ErrorClass::Io => ExitCode::from(EXIT_VALIDATION),
            }
        }
    }
}
