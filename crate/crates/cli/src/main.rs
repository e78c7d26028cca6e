use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use simplex_em::io::{read_container, read_header, read_manifest, write_container, Dtype, Manifest};
use simplex_em::mle::{fit_dirichlet, FitOptions, MmAlgorithm, WeightedSample};
use simplex_em::model::{ClassProportions, DirichletParams, FeatureSet};
use simplex_em::solvers::Method;
use simplex_em::tasks::{
    generate_synthetic_mixture, query_size_sweep, run_benchmark, shots_sweep, write_reports,
    BenchmarkConfig, BenchmarkReport, EvalMode, FewShotProtocol, Protocol, ZeroShotProtocol,
};
use simplex_em::Matrix;

#[derive(Debug, Parser, Serialize)]
#[command(name = "simplex-em", version, about = "Transductive clustering of probability vectors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "subcommand", rename_all = "kebab-case")]
enum Command {
    /// Sample a labeled Dirichlet mixture into a container.
    Synth(SynthArgs),
    /// Fit one Dirichlet to a set of simplex points.
    FitDirichlet(FitArgs),
    /// Zero-shot benchmark of one method.
    Cluster(ClusterArgs),
    /// Few-shot benchmark of one method.
    Fewshot(FewshotArgs),
    /// Zero-shot benchmark of several methods on the same tasks.
    Benchmark(BenchmarkArgs),
    /// Print the header and manifest of a container.
    Inspect(InspectArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
enum AlgoArg {
    Quadratic,
    Minka,
}

#[derive(Debug, Args, Serialize)]
struct SynthArgs {
    /// Number of components; checked against the rows of --alpha.
    #[arg(long)]
    classes: Option<usize>,
    /// Component parameters, rows separated by ';' and entries by ','.
    #[arg(long)]
    alpha: String,
    /// Mixing proportions, comma separated; uniform when omitted.
    #[arg(long)]
    proportions: Option<String>,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = DtypeArg::F64)]
    dtype: DtypeArg,
    #[arg(long, default_value = "synthetic")]
    dataset: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct FitArgs {
    /// Container whose rows are fitted.
    #[arg(long, conflicts_with = "data", required_unless_present = "data")]
    input: Option<PathBuf>,
    /// Only rows with this label.
    #[arg(long, requires = "input")]
    class: Option<usize>,
    /// Inline points, same grammar as --alpha.
    #[arg(long)]
    data: Option<String>,
    /// Starting point; all ones when omitted.
    #[arg(long)]
    init: Option<String>,
    #[arg(long, value_enum, default_value_t = AlgoArg::Quadratic)]
    algo: AlgoArg,
    #[arg(long, default_value_t = simplex_em::mle::DEFAULT_EPS)]
    eps: f64,
    #[arg(long, default_value_t = simplex_em::mle::DEFAULT_MAX_ITER)]
    max_iter: usize,
    /// JSON output file; standard output when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct SolverArgs {
    #[arg(long, default_value_t = Method::HardEmDirichlet)]
    method: Method,
    /// Multiplier on the protocol's lambda.
    #[arg(long, default_value_t = 1.0)]
    lambda_scale: f64,
    /// Drop the entropic barrier; assignments become hard.
    #[arg(long)]
    no_barrier: bool,
    /// Drop the partition-complexity term.
    #[arg(long)]
    no_mdl: bool,
    #[arg(long)]
    max_outer_iter: Option<usize>,
    /// Task-level threads; every core when omitted.
    #[arg(long)]
    workers: Option<usize>,
    /// Labeled probability container aligned with --input, used to
    /// initialize and evaluate raw-embedding features.
    #[arg(long)]
    init: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
struct ZeroShotArgs {
    #[arg(long, default_value_t = 75)]
    query_size: usize,
    /// Sweep over several query sizes instead of --query-size.
    #[arg(long, value_delimiter = ',')]
    query_sizes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 3)]
    min_classes: usize,
    #[arg(long, default_value_t = 10)]
    max_classes: usize,
    #[arg(long, default_value_t = 1000)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Map clusters to the argmax of their mean instead of the injective matching.
    #[arg(long)]
    no_matching: bool,
}

#[derive(Debug, Args, Serialize)]
struct ClusterArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    #[command(flatten)]
    protocol: ZeroShotArgs,
    /// Output prefix for the .csv and .json reports.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct FewshotArgs {
    #[arg(long)]
    input: PathBuf,
    #[command(flatten)]
    solver: SolverArgs,
    /// One or more shot counts, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "4")]
    shots: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    k_eff: usize,
    #[arg(long, default_value_t = 75)]
    query_size: usize,
    #[arg(long, default_value_t = 1000)]
    tasks: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct BenchmarkArgs {
    #[arg(long)]
    input: PathBuf,
    /// Methods to compare, comma separated; all when omitted.
    #[arg(long, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    #[arg(long, default_value_t = 1.0)]
    lambda_scale: f64,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    init: Option<PathBuf>,
    #[command(flatten)]
    protocol: ZeroShotArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
struct InspectArgs {
    #[arg(long)]
    input: PathBuf,
}

fn parse_rows(spec: &str) -> Result<Vec<Vec<f64>>> {
    let rows: Vec<Vec<f64>> = spec
        .split(';')
        .map(|row| {
            row.split(',')
                .map(|v| {
                    let x: f64 = v.trim().parse().with_context(|| format!("not a number: {v:?}"))?;
                    ensure!(x > 0.0 && x.is_finite(), "entries must be positive and finite, got {x}");
                    Ok(x)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    ensure!(!rows.is_empty() && !rows[0].is_empty(), "empty matrix");
    ensure!(rows.iter().all(|r| r.len() == rows[0].len()), "rows have different lengths");
    Ok(rows)
}

fn parse_vector(spec: &str) -> Result<Vec<f64>> {
    let mut rows = parse_rows(spec)?;
    ensure!(rows.len() == 1, "expected a single comma-separated row");
    Ok(rows.remove(0))
}

fn check_workers(workers: Option<usize>) -> Result<()> {
    ensure!(workers != Some(0), "--workers must be at least 1");
    Ok(())
}

fn check_lambda_scale(scale: f64) -> Result<()> {
    ensure!(scale >= 0.0 && scale.is_finite(), "--lambda-scale must be nonnegative, got {scale}");
    Ok(())
}

fn load_features(input: &Path, init: Option<&Path>) -> Result<(FeatureSet, Option<FeatureSet>)> {
    let (features, _) = read_container(input).with_context(|| format!("reading {}", input.display()))?;
    let init = match init {
        Some(p) => Some(read_container(p).with_context(|| format!("reading {}", p.display()))?.0),
        None => None,
    };
    Ok((features, init))
}

fn benchmark_config(args: &SolverArgs, no_matching: bool) -> Result<BenchmarkConfig> {
    check_workers(args.workers)?;
    check_lambda_scale(args.lambda_scale)?;
    let mut config = BenchmarkConfig::new(args.method);
    config.lambda_scale = args.lambda_scale;
    config.workers = args.workers;
    if args.no_barrier {
        config.solver.use_barrier = false;
    }
    if args.no_mdl {
        config.solver.use_mdl = false;
    }
    if let Some(n) = args.max_outer_iter {
        config.solver.max_outer_iter = n;
    }
    if no_matching {
        config.eval_mode = Some(EvalMode::ArgmaxOnly);
    }
    config.solver.validate()?;
    Ok(config)
}

fn zero_shot_protocol(args: &ZeroShotArgs) -> ZeroShotProtocol {
    ZeroShotProtocol {
        query_size: args.query_size,
        min_eff_classes: args.min_classes,
        max_eff_classes: args.max_classes,
        n_tasks: args.tasks,
        seed: args.seed,
    }
}

fn summarize(reports: &[BenchmarkReport]) {
    for r in reports {
        let first = r.records.first();
        eprintln!(
            "{:<18} query {:>4} shots {:>3} tasks {:>5} accuracy {:.4} mean seconds {:.4}",
            r.method_name,
            first.map_or(0, |x| x.query_size),
            first.map_or(0, |x| x.shots),
            r.records.len(),
            r.mean_accuracy,
            r.mean_task_seconds,
        );
    }
}

fn finish(out: &Path, reports: &[BenchmarkReport]) -> Result<()> {
    summarize(reports);
    write_reports(out, reports).with_context(|| format!("writing reports to {}", out.display()))
}

fn synth(args: &SynthArgs) -> Result<()> {
    ensure!(args.n > 0, "--n must be at least 1");
    let rows = parse_rows(&args.alpha)?;
    let k = rows.len();
    if let Some(c) = args.classes {
        ensure!(c == k, "--classes {c} but --alpha has {k} rows");
    }
    ensure!(rows[0].len() == k, "each --alpha row needs {k} entries, one per class");
    let pi = match &args.proportions {
        Some(s) => parse_vector(s)?,
        None => vec![1.0 / k as f64; k],
    };
    ensure!(pi.len() == k, "--proportions needs {k} entries");
    let params = DirichletParams::new(Matrix::from_rows(&rows).context("ragged --alpha")?)?;
    let features = generate_synthetic_mixture(&params, &ClassProportions { pi }, args.n, args.seed)?;
    let manifest = Manifest {
        dataset: args.dataset.clone(),
        class_names: (0..k).map(|c| format!("class_{c}")).collect(),
        temperature: None,
        encoder: "synthetic-dirichlet".to_string(),
        prompt_template: String::new(),
        created_at: chrono::Utc::now().to_rfc3339(),
    };
    let dtype = match args.dtype {
        DtypeArg::F32 => Dtype::F32,
        DtypeArg::F64 => Dtype::F64,
    };
    write_container(&features, &manifest, &args.out, dtype)
        .with_context(|| format!("writing {}", args.out.display()))?;
    eprintln!("wrote {} samples of dimension {k} to {}", args.n, args.out.display());
    Ok(())
}

fn fit(args: &FitArgs) -> Result<()> {
    ensure!(args.eps > 0.0, "--eps must be positive, got {}", args.eps);
    ensure!(args.max_iter > 0, "--max-iter must be at least 1");
    let points = match (&args.input, &args.data) {
        (Some(path), _) => {
            let (features, _) = read_container(path).with_context(|| format!("reading {}", path.display()))?;
            features.require_probabilities()?;
            let selected: Vec<usize> = match args.class {
                Some(c) => {
                    let labels = features.labels().context("--class needs a labeled container")?;
                    (0..features.n_samples()).filter(|&i| labels[i] == c).collect()
                }
                None => (0..features.n_samples()).collect(),
            };
            ensure!(!selected.is_empty(), "no rows selected");
            features.rows().select_rows(&selected)
        }
        (None, Some(spec)) => Matrix::from_rows(&parse_rows(spec)?).context("ragged --data")?,
        (None, None) => bail!("one of --input or --data is required"),
    };
    let data = WeightedSample::from_points(&points)?;
    let init = match &args.init {
        Some(s) => parse_vector(s)?,
        None => vec![1.0; data.dim()],
    };
    let options = FitOptions {
        eps: args.eps,
        max_iter: args.max_iter,
        algorithm: match args.algo {
            AlgoArg::Quadratic => MmAlgorithm::Quadratic,
            AlgoArg::Minka => MmAlgorithm::Minka,
        },
        record_trajectory: false,
    };
    let start = std::time::Instant::now();
    let (alpha, report) = fit_dirichlet(&init, &data, &options)?;
    let seconds = start.elapsed().as_secs_f64();
    let output = serde_json::json!({
        "alpha": alpha,
        "report": report,
        "seconds": seconds,
        "n_points": points.rows(),
        "options": options,
    });
    match &args.out {
        Some(path) => {
            let file = File::create(path).with_context(|| format!("creating {}", path.display()))?;
            serde_json::to_writer_pretty(BufWriter::new(file), &output)?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            serde_json::to_writer_pretty(&mut lock, &output)?;
            writeln!(lock)?;
        }
    }
    eprintln!(
        "{} iterations, converged {}, objective {:.12e}",
        report.iterations, report.converged, report.final_objective
    );
    Ok(())
}

fn cluster(args: &ClusterArgs) -> Result<()> {
    let config = benchmark_config(&args.solver, args.protocol.no_matching)?;
    let (features, init) = load_features(&args.input, args.solver.init.as_deref())?;
    let protocol = zero_shot_protocol(&args.protocol);
    let reports = match &args.protocol.query_sizes {
        Some(sizes) => query_size_sweep(&features, &protocol, sizes, &config, init.as_ref())?,
        None => vec![run_benchmark(&features, &Protocol::ZeroShot(protocol), &config, init.as_ref())?],
    };
    finish(&args.out, &reports)
}

fn fewshot(args: &FewshotArgs) -> Result<()> {
    ensure!(!args.shots.is_empty(), "--shots needs at least one value");
    let config = benchmark_config(&args.solver, false)?;
    let (features, init) = load_features(&args.input, args.solver.init.as_deref())?;
    let k = features.n_classes();
    ensure!(
        args.k_eff >= 1 && args.k_eff <= k,
        "--k-eff must lie in 1..={k}, got {}",
        args.k_eff
    );
    let protocol = FewShotProtocol {
        shots: args.shots[0],
        k_eff: args.k_eff,
        query_size: args.query_size,
        n_tasks: args.tasks,
        seed: args.seed,
    };
    let reports = shots_sweep(&features, &protocol, &args.shots, &config, init.as_ref())?;
    finish(&args.out, &reports)
}

fn benchmark(args: &BenchmarkArgs) -> Result<()> {
    check_workers(args.workers)?;
    check_lambda_scale(args.lambda_scale)?;
    let (features, init) = load_features(&args.input, args.init.as_deref())?;
    let methods = args.methods.clone().unwrap_or_else(|| Method::ALL.to_vec());
    let protocol = zero_shot_protocol(&args.protocol);
    let sizes = args
        .protocol
        .query_sizes
        .clone()
        .unwrap_or_else(|| vec![args.protocol.query_size]);
    let mut reports = Vec::new();
    for method in methods {
        let mut config = BenchmarkConfig::new(method);
        config.lambda_scale = args.lambda_scale;
        config.workers = args.workers;
        if args.protocol.no_matching {
            config.eval_mode = Some(EvalMode::ArgmaxOnly);
        }
        reports.extend(query_size_sweep(&features, &protocol, &sizes, &config, init.as_ref())?);
    }
    finish(&args.out, &reports)
}

fn inspect(args: &InspectArgs) -> Result<()> {
    let header = read_header(&args.input).with_context(|| format!("reading {}", args.input.display()))?;
    let manifest = read_manifest(&args.input)?;
    let (features, _) = read_container(&args.input)?;
    let counts = features.labels().map(|labels| {
        let mut counts = vec![0usize; features.n_classes()];
        labels.iter().for_each(|&l| counts[l] += 1);
        counts
    });
    let output = serde_json::json!({
        "header": header,
        "manifest": manifest,
        "kind": features.kind(),
        "n_classes": features.n_classes(),
        "label_counts": counts,
    });
    println!("{}", serde_json::to_string_pretty(&output)?);
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    eprintln!("{}", serde_json::to_string(cli)?);
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::FitDirichlet(a) => fit(a),
        Command::Cluster(a) => cluster(a),
        Command::Fewshot(a) => fewshot(a),
        Command::Benchmark(a) => benchmark(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
