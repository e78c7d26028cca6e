//! Episode sampling, synthetic data, evaluation and the benchmark harness.
//!
//! Every episode draws from its own `ChaCha8Rng` stream, seeded with a
//! SplitMix64 mix of the protocol seed and the task index, so a task can be
//! replayed from `(seed, task_index)` alone and results do not depend on the
//! number of workers.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Gamma;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{argmax_assignment, cluster_profiles, match_clusters};
use crate::matrix::Matrix;
use crate::model::{ClassProportions, DirichletParams, FeatureSet, TaskInstance};
use crate::solvers::{few_shot_lambda, solve, zero_shot_lambda, Method, SolverConfig, SolverResult};

pub const MAX_RETRIES: usize = 100;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ZeroShotProtocol {
    pub query_size: usize,
    pub min_eff_classes: usize,
    /// Clamped to the number of classes of the dataset.
    pub max_eff_classes: usize,
    pub n_tasks: usize,
    pub seed: u64,
}

impl Default for ZeroShotProtocol {
    fn default() -> Self {
        Self {
            query_size: 75,
            min_eff_classes: 3,
            max_eff_classes: 10,
            n_tasks: 1000,
            seed: 0,
        }
    }
}

impl ZeroShotProtocol {
    /// Effective-class range for a dataset with `n_classes` classes.
    pub fn class_range(&self, n_classes: usize) -> Result<(usize, usize)> {
        let max = self.max_eff_classes.min(n_classes);
        if self.min_eff_classes == 0 || self.min_eff_classes > max {
            return Err(Error::invalid(format!(
                "effective classes [{}, {}] do not fit {n_classes} classes",
                self.min_eff_classes, self.max_eff_classes
            )));
        }
        if self.query_size == 0 {
            return Err(Error::invalid("query_size must be at least 1"));
        }
        Ok((self.min_eff_classes, max))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FewShotProtocol {
    pub shots: usize,
    pub k_eff: usize,
    pub query_size: usize,
    pub n_tasks: usize,
    pub seed: u64,
}

impl Default for FewShotProtocol {
    fn default() -> Self {
        Self {
            shots: 4,
            k_eff: 5,
            query_size: 75,
            n_tasks: 1000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "protocol", rename_all = "snake_case")]
pub enum Protocol {
    ZeroShot(ZeroShotProtocol),
    FewShot(FewShotProtocol),
}

impl Protocol {
    pub fn n_tasks(&self) -> usize {
        match self {
            Protocol::ZeroShot(p) => p.n_tasks,
            Protocol::FewShot(p) => p.n_tasks,
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Protocol::ZeroShot(p) => p.seed,
            Protocol::FewShot(p) => p.seed,
        }
    }

    pub fn sample(&self, features: &FeatureSet, task_index: usize) -> Result<TaskInstance> {
        match self {
            Protocol::ZeroShot(p) => sample_zero_shot_task(features, p, task_index),
            Protocol::FewShot(p) => sample_few_shot_task(features, p, task_index),
        }
    }

    /// `λ` prescribed for `task`, before any user scale.
    pub fn lambda(&self, task: &TaskInstance) -> f64 {
        match self {
            Protocol::ZeroShot(_) => zero_shot_lambda(task.n_classes, task.n_query()),
            Protocol::FewShot(p) => few_shot_lambda(p.k_eff, task.n_classes, task.n_query()),
        }
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Seed of the stream for task `task_index` under protocol seed `seed`.
pub fn task_seed(seed: u64, task_index: usize) -> u64 {
    splitmix64(splitmix64(seed) ^ task_index as u64)
}

pub fn task_rng(seed: u64, task_index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(task_seed(seed, task_index))
}

fn samples_by_class(features: &FeatureSet) -> Result<Vec<Vec<usize>>> {
    let labels = features.require_labels()?;
    let mut by_class = vec![Vec::new(); features.n_classes()];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l].push(i);
    }
    Ok(by_class)
}

/// Zero-shot episode: a uniform effective-class count, that many distinct
/// classes, then `query_size` samples drawn uniformly from their union.
pub fn sample_zero_shot_task(
    features: &FeatureSet,
    protocol: &ZeroShotProtocol,
    task_index: usize,
) -> Result<TaskInstance> {
    let k = features.n_classes();
    let (min, max) = protocol.class_range(k)?;
    let by_class = samples_by_class(features)?;
    let mut rng = task_rng(protocol.seed, task_index);
    for _ in 0..MAX_RETRIES {
        let k_eff = rng.random_range(min..=max);
        let mut classes = sample(&mut rng, k, k_eff).into_vec();
        classes.sort_unstable();
        if classes.iter().any(|&c| by_class[c].is_empty()) {
            continue;
        }
        let pool: Vec<usize> = classes.iter().flat_map(|&c| by_class[c].iter().copied()).collect();
        if pool.len() < protocol.query_size {
            continue;
        }
        let query = sample(&mut rng, pool.len(), protocol.query_size)
            .into_iter()
            .map(|j| pool[j])
            .collect();
        return TaskInstance::zero_shot(query, k);
    }
    Err(Error::invalid(format!(
        "no feasible zero-shot class draw for task {task_index} after {MAX_RETRIES} attempts"
    )))
}

/// Few-shot episode: `shots` support samples from every class, and a query
/// set drawn from `k_eff` random classes among the remaining samples.
pub fn sample_few_shot_task(
    features: &FeatureSet,
    protocol: &FewShotProtocol,
    task_index: usize,
) -> Result<TaskInstance> {
    let k = features.n_classes();
    if protocol.k_eff == 0 || protocol.k_eff > k {
        return Err(Error::invalid(format!("k_eff = {} with {k} classes", protocol.k_eff)));
    }
    if protocol.query_size == 0 {
        return Err(Error::invalid("query_size must be at least 1"));
    }
    let by_class = samples_by_class(features)?;
    let mut rng = task_rng(protocol.seed, task_index);

    let mut support = Vec::with_capacity(k * protocol.shots);
    let mut support_labels = Vec::with_capacity(k * protocol.shots);
    let mut remaining = Vec::with_capacity(k);
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < protocol.shots {
            return Err(Error::InsufficientSamples {
                class: c,
                needed: protocol.shots,
                available: members.len(),
            });
        }
        let mut chosen = vec![false; members.len()];
        for j in sample(&mut rng, members.len(), protocol.shots) {
            chosen[j] = true;
            support.push(members[j]);
            support_labels.push(c);
        }
        remaining.push(
            members
                .iter()
                .zip(&chosen)
                .filter(|(_, &used)| !used)
                .map(|(&i, _)| i)
                .collect::<Vec<_>>(),
        );
    }

    let mut last_short = None;
    for _ in 0..MAX_RETRIES {
        let mut classes = sample(&mut rng, k, protocol.k_eff).into_vec();
        classes.sort_unstable();
        if let Some(&c) = classes.iter().find(|&&c| remaining[c].is_empty()) {
            last_short = Some((c, 0));
            continue;
        }
        let pool: Vec<usize> = classes.iter().flat_map(|&c| remaining[c].iter().copied()).collect();
        if pool.len() < protocol.query_size {
            last_short = Some((classes[0], pool.len()));
            continue;
        }
        let query = sample(&mut rng, pool.len(), protocol.query_size)
            .into_iter()
            .map(|j| pool[j])
            .collect();
        return TaskInstance::new(support, support_labels, query, k);
    }
    let (class, available) = last_short.unwrap_or((0, 0));
    Err(Error::InsufficientSamples {
        class,
        needed: protocol.query_size,
        available,
    })
}

/// Labeled samples from a Dirichlet mixture.
pub fn generate_synthetic_mixture(
    alphas: &DirichletParams,
    proportions: &ClassProportions,
    n: usize,
    seed: u64,
) -> Result<FeatureSet> {
    let k = alphas.n_components();
    if proportions.pi.len() != k {
        return Err(Error::dim(format!(
            "{k} components, {} proportions",
            proportions.pi.len()
        )));
    }
    let picker = WeightedIndex::new(&proportions.pi)
        .map_err(|e| Error::invalid(format!("invalid proportions: {e}")))?;
    let gammas: Vec<Vec<Gamma<f64>>> = (0..k)
        .map(|c| {
            alphas
                .alpha(c)
                .iter()
                .map(|&a| Gamma::new(a, 1.0).map_err(|e| Error::invalid(format!("alpha {a}: {e}"))))
                .collect()
        })
        .collect::<Result<_>>()?;
    let dim = alphas.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Matrix::zeros(n, dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = picker.sample(&mut rng);
        labels.push(c);
        let row = rows.row_mut(i);
        loop {
            let mut total = 0.0;
            for (v, g) in row.iter_mut().zip(&gammas[c]) {
                *v = g.sample(&mut rng);
                total += *v;
            }
            if total > 0.0 {
                row.iter_mut().for_each(|v| *v /= total);
                break;
            }
        }
    }
    let fs = FeatureSet::probabilities(rows, Some(labels))?;
    if fs.n_classes() != k {
        return Err(Error::dim("components must match the simplex dimension"));
    }
    Ok(fs)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    /// Clusters mapped to classes by the injective assignment.
    Matched,
    /// Clusters mapped to the argmax of their mean probability.
    ArgmaxOnly,
    /// Row argmax of `u` read directly as the class.
    Supervised,
}

/// Query accuracy of `result`. Cluster profiles are computed from
/// `features`, which must hold labeled probability vectors.
pub fn evaluate_task(
    result: &SolverResult,
    features: &FeatureSet,
    task: &TaskInstance,
    mode: EvalMode,
) -> Result<f64> {
    let labels = features.require_labels()?;
    task.check_against(features)?;
    let clusters = result.assignment.query_argmax();
    if clusters.len() != task.n_query() {
        return Err(Error::dim("assignment does not match the task"));
    }
    let predicted: Vec<Option<usize>> = match mode {
        EvalMode::Supervised => clusters.iter().map(|&c| Some(c)).collect(),
        EvalMode::Matched | EvalMode::ArgmaxOnly => {
            features.require_probabilities()?;
            let profile = cluster_profiles(features, task, &result.assignment)?;
            let map = if mode == EvalMode::Matched {
                match_clusters(&profile)?
            } else {
                argmax_assignment(&profile)
            };
            clusters.iter().map(|&c| map.class_of(c)).collect()
        }
    };
    let correct = predicted
        .iter()
        .zip(&task.query_indices)
        .filter(|(p, &i)| **p == Some(labels[i]))
        .count();
    Ok(correct as f64 / task.n_query() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkConfig {
    pub method: Method,
    /// Template for every task; `lambda` is overwritten per task.
    pub solver: SolverConfig,
    /// Multiplier on the protocol's `λ`.
    pub lambda_scale: f64,
    /// Defaults to matched for zero-shot and supervised for few-shot.
    pub eval_mode: Option<EvalMode>,
    /// Worker threads; `None` uses every available core.
    pub workers: Option<usize>,
}

impl BenchmarkConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            solver: SolverConfig::for_method(method, 0.0),
            lambda_scale: 1.0,
            eval_mode: None,
            workers: None,
        }
    }
}

/// One CSV row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskRecord {
    pub task_index: usize,
    pub seed: u64,
    pub method: String,
    pub accuracy: f64,
    pub seconds: f64,
    pub query_size: usize,
    pub shots: usize,
    pub k_eff: usize,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub method_name: String,
    pub mean_accuracy: f64,
    pub per_task_accuracies: Vec<f64>,
    pub mean_task_seconds: f64,
    pub config_echo: serde_json::Value,
    pub records: Vec<TaskRecord>,
}

/// Solves `protocol.n_tasks()` episodes and aggregates their accuracy.
///
/// `init`, when given, holds labeled probability vectors aligned with
/// `features`; it seeds the assignments and is used for cluster profiles.
/// It is required for raw-embedding features.
pub fn run_benchmark(
    features: &FeatureSet,
    protocol: &Protocol,
    config: &BenchmarkConfig,
    init: Option<&FeatureSet>,
) -> Result<BenchmarkReport> {
    if !(config.lambda_scale >= 0.0 && config.lambda_scale.is_finite()) {
        return Err(Error::invalid("lambda scale must be nonnegative"));
    }
    config.solver.validate()?;
    if let Some(init) = init {
        if init.n_samples() != features.n_samples() {
            return Err(Error::dim("initial probabilities do not align with the features"));
        }
    }
    let eval_features = init.unwrap_or(features);
    let mode = config.eval_mode.unwrap_or(match protocol {
        Protocol::ZeroShot(_) => EvalMode::Matched,
        Protocol::FewShot(_) => EvalMode::Supervised,
    });
    let shots = match protocol {
        Protocol::ZeroShot(_) => 0,
        Protocol::FewShot(p) => p.shots,
    };
    let seed = protocol.seed();

    let run_one = |task_index: usize| -> Result<TaskRecord> {
        let wrap = |source: Error| Error::Task {
            task_index,
            seed,
            source: Box::new(source),
        };
        let task = protocol.sample(features, task_index).map_err(wrap)?;
        let lambda = config.lambda_scale * protocol.lambda(&task);
        let solver = SolverConfig {
            lambda,
            ..config.solver.clone()
        };
        let start = Instant::now();
        let result = solve(config.method, features, &task, &solver, init.map(|f| f.rows())).map_err(wrap)?;
        let seconds = start.elapsed().as_secs_f64();
        let accuracy = evaluate_task(&result, eval_features, &task, mode).map_err(wrap)?;
        let labels = eval_features.require_labels().map_err(wrap)?;
        let mut classes: Vec<usize> = task.query_indices.iter().map(|&i| labels[i]).collect();
        classes.sort_unstable();
        classes.dedup();
        Ok(TaskRecord {
            task_index,
            seed,
            method: config.method.name().to_string(),
            accuracy,
            seconds,
            query_size: task.n_query(),
            shots,
            k_eff: classes.len(),
            lambda,
        })
    };

    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = config.workers {
        builder = builder.num_threads(w.max(1));
    }
    let pool = builder
        .build()
        .map_err(|e| Error::invalid(format!("worker pool: {e}")))?;
    let outcomes: Vec<Result<TaskRecord>> =
        pool.install(|| (0..protocol.n_tasks()).into_par_iter().map(run_one).collect());
    let records = outcomes.into_iter().collect::<Result<Vec<_>>>()?;

    let n = records.len().max(1) as f64;
    let per_task_accuracies: Vec<f64> = records.iter().map(|r| r.accuracy).collect();
    let mean_accuracy = per_task_accuracies.iter().sum::<f64>() / n;
    let mean_task_seconds = records.iter().map(|r| r.seconds).sum::<f64>() / n;
    let config_echo = serde_json::json!({
        "protocol": protocol,
        "config": config,
        "eval_mode": mode,
        "raw_with_init": init.is_some(),
    });
    Ok(BenchmarkReport {
        method_name: config.method.name().to_string(),
        mean_accuracy,
        per_task_accuracies,
        mean_task_seconds,
        config_echo,
        records,
    })
}

/// One report per query size, all else fixed.
pub fn query_size_sweep(
    features: &FeatureSet,
    protocol: &ZeroShotProtocol,
    sizes: &[usize],
    config: &BenchmarkConfig,
    init: Option<&FeatureSet>,
) -> Result<Vec<BenchmarkReport>> {
    sizes
        .iter()
        .map(|&query_size| {
            let p = Protocol::ZeroShot(ZeroShotProtocol {
                query_size,
                ..protocol.clone()
            });
            run_benchmark(features, &p, config, init)
        })
        .collect()
}

/// One report per shot count, all else fixed.
pub fn shots_sweep(
    features: &FeatureSet,
    protocol: &FewShotProtocol,
    shots: &[usize],
    config: &BenchmarkConfig,
    init: Option<&FeatureSet>,
) -> Result<Vec<BenchmarkReport>> {
    shots
        .iter()
        .map(|&s| {
            let p = Protocol::FewShot(FewShotProtocol {
                shots: s,
                ..protocol.clone()
            });
            run_benchmark(features, &p, config, init)
        })
        .collect()
}

/// Writes the records of every report as CSV, one row per task.
pub fn write_csv<W: Write>(writer: W, reports: &[BenchmarkReport]) -> Result<()> {
    let mut out = csv::Writer::from_writer(writer);
    for r in reports.iter().flat_map(|r| &r.records) {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}

/// Writes `<prefix>.csv` and `<prefix>.json`.
pub fn write_reports(prefix: &Path, reports: &[BenchmarkReport]) -> Result<()> {
    let csv_path = prefix.with_extension("csv");
    write_csv(std::fs::File::create(csv_path)?, reports)?;
    let json = std::fs::File::create(prefix.with_extension("json"))?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(json), reports)?;
    Ok(())
}
