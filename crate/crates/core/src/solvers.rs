//! Transductive clustering solvers.
//!
//! [`em_dirichlet`] is the block majorization-minimization scheme for the
//! regularized objective `−L + Φ + λΨ` with Dirichlet class densities. Each
//! outer iteration fits every `α_k` by the closed-form MM on the current
//! soft assignment, refreshes the query proportions `π`, then updates every
//! query row as `softmax(ln p(z_n | α_k) + (λ/|Q|) ln π_k)` (or its argmax in
//! hard mode). Support rows stay pinned to their labels throughout.
//!
//! The Gaussian and K-means baselines share the initialization and the
//! support pinning; [`em_dirichlet_mixture_reference`] is a textbook EM for
//! a Dirichlet mixture, kept to cross-check the main solver.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{argmax, relative_squared_change, softmax_in_place, Matrix};
use crate::mle::{fit_dirichlet, FitOptions, WeightedSample};
use crate::model::{
    log_density_from_logs, log_normalizer, objective_from_logs, task_log_features, ClassProportions,
    ContentKind, DirichletParams, FeatureSet, ObjectiveBreakdown, SoftAssignment, TaskInstance,
    LOG_FLOOR,
};

/// Floor on `π_k` before taking its logarithm.
pub const PROPORTION_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    EmDirichlet,
    HardEmDirichlet,
    HardKmeans,
    SoftKmeans,
    EmGaussianId,
    EmGaussianDiag,
    HardKlKmeans,
}

impl Method {
    pub const ALL: [Method; 7] = [
        Method::EmDirichlet,
        Method::HardEmDirichlet,
        Method::HardKmeans,
        Method::SoftKmeans,
        Method::EmGaussianId,
        Method::EmGaussianDiag,
        Method::HardKlKmeans,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::EmDirichlet => "em-dirichlet",
            Method::HardEmDirichlet => "hard-em-dirichlet",
            Method::HardKmeans => "hard-kmeans",
            Method::SoftKmeans => "soft-kmeans",
            Method::EmGaussianId => "em-gaussian-id",
            Method::EmGaussianDiag => "em-gaussian-diag",
            Method::HardKlKmeans => "hard-kl-kmeans",
        }
    }

    /// Whether the method carries the MDL term and hence a `λ`.
    pub fn uses_lambda(self) -> bool {
        matches!(
            self,
            Method::EmDirichlet | Method::HardEmDirichlet | Method::EmGaussianId | Method::EmGaussianDiag
        )
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Covariance {
    Identity,
    Diagonal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub lambda: f64,
    pub max_outer_iter: usize,
    /// Outer stop on the relative squared change of the component parameters.
    pub outer_eps: f64,
    pub hard_assignments: bool,
    /// Without the barrier the assignment step becomes a linear program and
    /// the assignments are hard.
    pub use_barrier: bool,
    /// Without the MDL term `λ` is treated as zero.
    pub use_mdl: bool,
    /// Budget of the per-class Dirichlet fit inside each outer iteration.
    pub inner: FitOptions,
    /// Soft K-means stiffness.
    pub stiffness: f64,
    /// Per-dimension variance floor for diagonal Gaussians.
    pub variance_floor: f64,
    pub record_history: bool,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda: 0.0,
            max_outer_iter: 1000,
            outer_eps: 1e-13,
            hard_assignments: false,
            use_barrier: true,
            use_mdl: true,
            inner: FitOptions::default(),
            stiffness: 1.0,
            variance_floor: 1e-6,
            record_history: false,
        }
    }
}

impl SolverConfig {
    /// Defaults for `method`, with hard mode switched on where the name says so.
    pub fn for_method(method: Method, lambda: f64) -> Self {
        Self {
            lambda,
            hard_assignments: matches!(
                method,
                Method::HardEmDirichlet | Method::HardKmeans | Method::HardKlKmeans
            ),
            use_barrier: !matches!(method, Method::HardEmDirichlet),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be nonnegative, got {}", self.lambda)));
        }
        if !(self.outer_eps > 0.0) {
            return Err(Error::invalid("outer_eps must be positive"));
        }
        if !(self.inner.eps > 0.0) {
            return Err(Error::invalid("inner eps must be positive"));
        }
        if !(self.stiffness > 0.0) {
            return Err(Error::invalid("stiffness must be positive"));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::invalid("variance floor must be positive"));
        }
        Ok(())
    }

    pub fn is_hard(&self) -> bool {
        self.hard_assignments || !self.use_barrier
    }

    pub fn effective_lambda(&self) -> f64 {
        if self.use_mdl {
            self.lambda
        } else {
            0.0
        }
    }
}

/// Zero-shot `λ = (5/K)|Q|`.
pub fn zero_shot_lambda(n_classes: usize, query_size: usize) -> f64 {
    5.0 / n_classes as f64 * query_size as f64
}

/// Few-shot `λ = (k_eff/K)|Q|`.
pub fn few_shot_lambda(k_eff: usize, n_classes: usize, query_size: usize) -> f64 {
    k_eff as f64 / n_classes as f64 * query_size as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ComponentParams {
    Dirichlet(DirichletParams),
    Centroids { means: Matrix },
    Gaussian { means: Matrix, variances: Matrix },
}

/// One outer iterate, recorded when `record_history` is set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Iterate {
    pub assignment: Matrix,
    pub proportions: Vec<f64>,
    pub params: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverResult {
    pub assignment: SoftAssignment,
    pub params: ComponentParams,
    pub proportions: ClassProportions,
    /// Objective at the initial point and after every outer iteration
    /// (Dirichlet solvers only).
    pub objective_trace: Vec<ObjectiveBreakdown>,
    pub outer_iterations: usize,
    pub converged: bool,
    pub history: Option<Vec<Iterate>>,
}

impl SolverResult {
    pub fn alphas(&self) -> Option<&DirichletParams> {
        match &self.params {
            ComponentParams::Dirichlet(a) => Some(a),
            _ => None,
        }
    }
}

/// Dispatches to the solver for `method`.
///
/// `init` optionally supplies probability vectors for every sample of
/// `features` (same row indexing) used as the initial query assignment; it
/// is required when `features` holds raw embeddings.
pub fn solve(
    method: Method,
    features: &FeatureSet,
    task: &TaskInstance,
    config: &SolverConfig,
    init: Option<&Matrix>,
) -> Result<SolverResult> {
    match method {
        Method::EmDirichlet | Method::HardEmDirichlet => em_dirichlet(features, task, config, init),
        Method::HardKmeans => hard_kmeans(features, task, config, init),
        Method::SoftKmeans => soft_kmeans(features, task, config, init),
        Method::EmGaussianId => em_gaussian(features, task, config, Covariance::Identity, init),
        Method::EmGaussianDiag => em_gaussian(features, task, config, Covariance::Diagonal, init),
        Method::HardKlKmeans => hard_kl_kmeans(features, task, config, init),
    }
}

fn initial_assignment(
    features: &FeatureSet,
    task: &TaskInstance,
    init: Option<&Matrix>,
) -> Result<SoftAssignment> {
    let k = task.n_classes;
    let source = match init {
        Some(m) => {
            if m.rows() != features.n_samples() || m.cols() != k {
                return Err(Error::dim(format!(
                    "initial probabilities are {}x{}, expected {}x{k}",
                    m.rows(),
                    m.cols(),
                    features.n_samples()
                )));
            }
            m
        }
        None => match features.kind() {
            ContentKind::SimplexProbabilities => features.rows(),
            ContentKind::RawEmbeddings => {
                return Err(Error::invalid(
                    "raw embeddings need initial probabilities for the assignment",
                ))
            }
        },
    };
    let mut query = source.select_rows(&task.query_indices);
    // tolerate float drift in stored probabilities
    for q in 0..query.rows() {
        let row = query.row_mut(q);
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|v| *v /= s);
        }
    }
    SoftAssignment::new(task, query)
}

fn prepare(
    features: &FeatureSet,
    task: &TaskInstance,
    config: &SolverConfig,
) -> Result<()> {
    config.validate()?;
    task.check_against(features)
}

/// `ln p(z_n | α_k)` for every task row and class.
fn dirichlet_log_densities(log_z: &Matrix, alphas: &DirichletParams) -> Matrix {
    let k = alphas.n_components();
    let norms: Vec<f64> = (0..k).map(|c| log_normalizer(alphas.alpha(c))).collect();
    let mut out = Matrix::zeros(log_z.rows(), k);
    for r in 0..log_z.rows() {
        for c in 0..k {
            out.set(r, c, log_density_from_logs(log_z.row(r), alphas.alpha(c), norms[c]));
        }
    }
    out
}

/// Writes `softmax(log_density + (λ/|Q|) ln π)` (or its one-hot argmax) into
/// every query row. `log_density` is indexed by task row.
fn assign_queries(
    u: &mut SoftAssignment,
    log_density: &Matrix,
    proportions: &ClassProportions,
    lambda: f64,
    hard: bool,
) {
    let n_support = u.n_support();
    let scale = lambda / u.n_query() as f64;
    let bias: Vec<f64> = proportions
        .pi
        .iter()
        .map(|&p| scale * p.max(PROPORTION_FLOOR).ln())
        .collect();
    for q in 0..u.n_query() {
        let row = u.query_row_mut(q);
        for ((dst, &ld), &b) in row.iter_mut().zip(log_density.row(n_support + q)).zip(&bias) {
            *dst = ld + b;
        }
        if hard {
            let best = argmax(row);
            row.iter_mut().enumerate().for_each(|(c, v)| *v = if c == best { 1.0 } else { 0.0 });
        } else {
            softmax_in_place(row);
        }
    }
}

/// Assignment step for fixed Dirichlet parameters and proportions.
pub fn update_assignments(
    features: &FeatureSet,
    task: &TaskInstance,
    alphas: &DirichletParams,
    proportions: &ClassProportions,
    config: &SolverConfig,
) -> Result<SoftAssignment> {
    prepare(features, task, config)?;
    features.require_probabilities()?;
    if alphas.n_components() != task.n_classes || proportions.pi.len() != task.n_classes {
        return Err(Error::dim("parameters do not match the task's class count"));
    }
    let log_z = task_log_features(features, task);
    let log_density = dirichlet_log_densities(&log_z, alphas);
    let uniform = Matrix::filled(task.n_query(), task.n_classes, 1.0 / task.n_classes as f64);
    let mut u = SoftAssignment::new(task, uniform)?;
    assign_queries(
        &mut u,
        &log_density,
        proportions,
        config.effective_lambda(),
        config.is_hard(),
    );
    Ok(u)
}

/// Query proportions `π_k = mean_{n∈Q} u_{n,k}`.
pub fn update_proportions(u: &SoftAssignment) -> Result<ClassProportions> {
    ClassProportions::from_assignment(u)
}

fn fit_all_classes(
    alphas: &mut DirichletParams,
    u: &SoftAssignment,
    log_z: &Matrix,
    inner: &FitOptions,
) -> Result<()> {
    for k in 0..alphas.n_components() {
        let data = WeightedSample::new(log_z, &u.weights(k))?;
        if data.is_empty() {
            continue;
        }
        let (alpha, _) = fit_dirichlet(alphas.alpha(k), &data, inner)?;
        alphas.set_alpha(k, &alpha);
    }
    Ok(())
}

/// EM-Dirichlet (soft) or Hard EM-Dirichlet, depending on `config`.
pub fn em_dirichlet(
    features: &FeatureSet,
    task: &TaskInstance,
    config: &SolverConfig,
    init: Option<&Matrix>,
) -> Result<SolverResult> {
    prepare(features, task, config)?;
    features.require_probabilities()?;
    let k = task.n_classes;
    let lambda = config.effective_lambda();
    let hard = config.is_hard();
    let include_barrier = !hard;
    let log_z = task_log_features(features, task);

    let mut u = initial_assignment(features, task, init)?;
    let mut alphas = DirichletParams::uniform(k, features.dim());
    let mut proportions = update_proportions(&u)?;
    let mut trace = vec![objective_from_logs(&u, &alphas, &log_z, lambda, include_barrier)?];
    let mut history = config.record_history.then(Vec::new);
    let mut iterations = 0;
    let mut converged = false;

    while iterations < config.max_outer_iter {
        let previous = alphas.as_matrix().clone();
        fit_all_classes(&mut alphas, &u, &log_z, &config.inner)?;
        proportions = update_proportions(&u)?;
        let log_density = dirichlet_log_densities(&log_z, &alphas);
        assign_queries(&mut u, &log_density, &proportions, lambda, hard);
        iterations += 1;
        trace.push(objective_from_logs(&u, &alphas, &log_z, lambda, include_barrier)?);
        if let Some(h) = history.as_mut() {
            h.push(Iterate {
                assignment: u.matrix().clone(),
                proportions: proportions.pi.clone(),
                params: alphas.as_matrix().clone(),
            });
        }
        if relative_squared_change(alphas.as_matrix().as_slice(), previous.as_slice()) <= config.outer_eps {
            converged = true;
            break;
        }
    }

    Ok(SolverResult {
        assignment: u,
        params: ComponentParams::Dirichlet(alphas),
        proportions,
        objective_trace: trace,
        outer_iterations: iterations,
        converged,
        history,
    })
}

/// How the reference EM starts.
#[derive(Debug, Clone, PartialEq)]
pub enum ReferenceInit {
    /// Initial query responsibilities; `α` warm-starts at `1`.
    Responsibilities(Matrix),
    /// Initial mixture parameters; the first E-step produces the responsibilities.
    Parameters {
        alphas: DirichletParams,
        proportions: ClassProportions,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureEmResult {
    pub result: SolverResult,
    /// Mixture log-likelihood `Σ_n ln Σ_k π_k p(z_n | α_k)` after every M-step.
    pub log_likelihood_trace: Vec<f64>,
}

/// Textbook EM for a Dirichlet mixture on a zero-shot task.
pub fn em_dirichlet_mixture_reference(
    features: &FeatureSet,
    task: &TaskInstance,
    init: &ReferenceInit,
    max_iter: usize,
    inner: &FitOptions,
) -> Result<MixtureEmResult> {
    task.check_against(features)?;
    features.require_probabilities()?;
    if task.n_support() > 0 {
        return Err(Error::invalid("the reference EM handles unsupervised tasks only"));
    }
    let k = task.n_classes;
    let log_z = task_log_features(features, task);
    let n = task.n_query();

    let (mut resp, mut alphas) = match init {
        ReferenceInit::Responsibilities(m) => {
            if m.rows() != n || m.cols() != k {
                return Err(Error::dim("initial responsibilities do not match the task"));
            }
            (m.clone(), DirichletParams::uniform(k, features.dim()))
        }
        ReferenceInit::Parameters { alphas, proportions } => {
            if alphas.n_components() != k || proportions.pi.len() != k {
                return Err(Error::dim("initial parameters do not match the task"));
            }
            let (r, _) = e_step(&log_z, alphas, &proportions.pi);
            (r, alphas.clone())
        }
    };
    let mut pi = vec![1.0 / k as f64; k];
    let mut ll_trace = Vec::new();
    let mut history = Vec::new();

    for _ in 0..max_iter {
        // M-step: mixing weights are mean responsibilities, α_k the weighted MLE.
        for (c, p) in pi.iter_mut().enumerate() {
            *p = (0..n).map(|i| resp.get(i, c)).sum::<f64>() / n as f64;
        }
        for c in 0..k {
            let weights = resp.column(c);
            let data = WeightedSample::new(&log_z, &weights)?;
            if data.is_empty() {
                continue;
            }
            let (alpha, _) = fit_dirichlet(alphas.alpha(c), &data, inner)?;
            alphas.set_alpha(c, &alpha);
        }
        // E-step
        let (r, ll) = e_step(&log_z, &alphas, &pi);
        resp = r;
        ll_trace.push(ll);
        history.push(Iterate {
            assignment: resp.clone(),
            proportions: pi.clone(),
            params: alphas.as_matrix().clone(),
        });
    }

    let assignment = SoftAssignment::new(task, resp)?;
    let proportions = ClassProportions { pi };
    Ok(MixtureEmResult {
        result: SolverResult {
            assignment,
            params: ComponentParams::Dirichlet(alphas),
            proportions,
            objective_trace: Vec::new(),
            outer_iterations: max_iter,
            converged: false,
            history: Some(history),
        },
        log_likelihood_trace: ll_trace,
    })
}

/// Responsibilities `π_k p_k / Σ_j π_j p_j` and the mixture log-likelihood.
fn e_step(log_z: &Matrix, alphas: &DirichletParams, pi: &[f64]) -> (Matrix, f64) {
    let k = pi.len();
    let norms: Vec<f64> = (0..k).map(|c| log_normalizer(alphas.alpha(c))).collect();
    let mut resp = Matrix::zeros(log_z.rows(), k);
    let mut ll = 0.0;
    for i in 0..log_z.rows() {
        let logs: Vec<f64> = (0..k)
            .map(|c| log_density_from_logs(log_z.row(i), alphas.alpha(c), norms[c]))
            .collect();
        let shift = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let weighted: Vec<f64> = logs.iter().zip(pi).map(|(l, p)| p * (l - shift).exp()).collect();
        let total: f64 = weighted.iter().sum();
        for (c, w) in weighted.iter().enumerate() {
            resp.set(i, c, w / total);
        }
        ll += shift + total.ln();
    }
    (resp, ll)
}

/// Weighted means of `points` (task rows) under each column of `u`.
/// Clusters with no mass keep their previous mean.
fn weighted_means(points: &Matrix, u: &SoftAssignment, previous: Option<&Matrix>) -> Matrix {
    let k = u.n_classes();
    let d = points.cols();
    let mut means = Matrix::zeros(k, d);
    let mut mass = vec![0.0; k];
    for (row_u, row_x) in u.matrix().iter_rows().zip(points.iter_rows()) {
        for c in 0..k {
            let w = row_u[c];
            if w == 0.0 {
                continue;
            }
            mass[c] += w;
            for (m, x) in means.row_mut(c).iter_mut().zip(row_x) {
                *m += w * x;
            }
        }
    }
    for c in 0..k {
        if mass[c] > 0.0 {
            means.row_mut(c).iter_mut().for_each(|m| *m /= mass[c]);
        } else if let Some(prev) = previous {
            means.row_mut(c).copy_from_slice(prev.row(c));
        }
    }
    means
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Shared loop for the centroid methods: `score(point, centroid)` is a
/// log-affinity (higher is closer); `soft` turns scores into a softmax row.
fn centroid_loop(
    points: &Matrix,
    mut u: SoftAssignment,
    config: &SolverConfig,
    soft: bool,
    score: impl Fn(&[f64], &[f64]) -> f64,
) -> Result<SolverResult> {
    let n_support = u.n_support();
    let k = u.n_classes();
    let mut means = weighted_means(points, &u, None);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < config.max_outer_iter {
        for q in 0..u.n_query() {
            let x = points.row(n_support + q);
            let row = u.query_row_mut(q);
            for c in 0..k {
                row[c] = score(x, means.row(c));
            }
            if soft {
                softmax_in_place(row);
            } else {
                let best = argmax(row);
                row.iter_mut().enumerate().for_each(|(c, v)| *v = if c == best { 1.0 } else { 0.0 });
            }
        }
        iterations += 1;
        let next = weighted_means(points, &u, Some(&means));
        let change = relative_squared_change(next.as_slice(), means.as_slice());
        means = next;
        if change <= config.outer_eps {
            converged = true;
            break;
        }
    }
    let proportions = update_proportions(&u)?;
    Ok(SolverResult {
        assignment: u,
        params: ComponentParams::Centroids { means },
        proportions,
        objective_trace: Vec::new(),
        outer_iterations: iterations,
        converged,
        history: None,
    })
}

fn task_points(features: &FeatureSet, task: &TaskInstance) -> Matrix {
    features.rows().select_rows(&task.row_indices())
}

/// Hard K-means with squared Euclidean distance.
pub fn hard_kmeans(
    features: &FeatureSet,
    task: &TaskInstance,
    config: &SolverConfig,
    init: Option<&Matrix>,
) -> Result<SolverResult> {
    prepare(features, task, config)?;
    let u = initial_assignment(features, task, init)?;
    centroid_loop(&task_points(features, task), u, config, false, |x, m| {
        -squared_distance(x, m)
    })
}

/// Soft K-means: `u_{n,k} ∝ exp(−stiffness · ‖x_n − m_k‖²)`.
pub fn soft_kmeans(
    features: &FeatureSet,
    task: &TaskInstance,
    config: &SolverConfig,
    init: Option<&Matrix>,
) -> Result<SolverResult> {
    prepare(features, task, config)?;
    let u = initial_assignment(features, task, init)?;
    let beta = config.stiffness;
    centroid_loop(&task_points(features, task), u, config, true, move |x, m| {
        -beta * squared_distance(x, m)
    })
}

/// Hard K-means under `KL(z_n ‖ m_k)` with arithmetic-mean centroids.
pub fn hard_kl_kmeans(
    features: &FeatureSet,
    task: &TaskInstance,
    config: &SolverConfig,
    init: Option<&Matrix>,
) -> Result<SolverResult> {
    prepare(features, task, config)?;
    features.require_probabilities()?;
    let u = initial_assignment(features, task, init)?;
    centroid_loop(&task_points(features, task), u, config, false, |z, m| {
        -z.iter()
            .zip(m)
            .filter(|(&zi, _)| zi > 0.0)
            .map(|(&zi, &mi)| zi * (zi.ln() - mi.max(LOG_FLOOR).ln()))
            .sum::<f64>()
    })
}

/// Gaussian mixture EM with the MDL-biased assignment step.
pub fn em_gaussian(
    features: &FeatureSet,
    task: &TaskInstance,
    config: &SolverConfig,
    covariance: Covariance,
    init: Option<&Matrix>,
) -> Result<SolverResult> {
    prepare(features, task, config)?;
    let points = task_points(features, task);
    let k = task.n_classes;
    let d = points.cols();
    let lambda = config.effective_lambda();
    let hard = config.is_hard();
    let mut u = initial_assignment(features, task, init)?;
    let mut means: Option<Matrix> = None;
    let mut variances = Matrix::filled(k, d, 1.0);
    let mut proportions = update_proportions(&u)?;
    let mut iterations = 0;
    let mut converged = false;
    let ln_2pi = (2.0 * std::f64::consts::PI).ln();

    while iterations < config.max_outer_iter {
        let next_means = weighted_means(&points, &u, means.as_ref());
        if covariance == Covariance::Diagonal {
            variances = weighted_variances(&points, &u, &next_means, &variances, config.variance_floor);
        }
        proportions = update_proportions(&u)?;
        let mut log_density = Matrix::zeros(points.rows(), k);
        for r in 0..points.rows() {
            for c in 0..k {
                let mut ld = 0.0;
                for ((x, m), v) in points.row(r).iter().zip(next_means.row(c)).zip(variances.row(c)) {
                    ld -= 0.5 * ((x - m) * (x - m) / v + v.ln() + ln_2pi);
                }
                log_density.set(r, c, ld);
            }
        }
        assign_queries(&mut u, &log_density, &proportions, lambda, hard);
        iterations += 1;
        let change = match &means {
            Some(prev) => relative_squared_change(next_means.as_slice(), prev.as_slice()),
            None => f64::INFINITY,
        };
        means = Some(next_means);
        if change <= config.outer_eps {
            converged = true;
            break;
        }
    }
    let means = means.unwrap_or_else(|| weighted_means(&points, &u, None));
    Ok(SolverResult {
        assignment: u,
        params: ComponentParams::Gaussian { means, variances },
        proportions,
        objective_trace: Vec::new(),
        outer_iterations: iterations,
        converged,
        history: None,
    })
}

fn weighted_variances(
    points: &Matrix,
    u: &SoftAssignment,
    means: &Matrix,
    previous: &Matrix,
    floor: f64,
) -> Matrix {
    let k = u.n_classes();
    let mut var = Matrix::zeros(k, points.cols());
    let mut mass = vec![0.0; k];
    for (row_u, row_x) in u.matrix().iter_rows().zip(points.iter_rows()) {
        for c in 0..k {
            let w = row_u[c];
            if w == 0.0 {
                continue;
            }
            mass[c] += w;
            for ((v, x), m) in var.row_mut(c).iter_mut().zip(row_x).zip(means.row(c)) {
                *v += w * (x - m) * (x - m);
            }
        }
    }
    for c in 0..k {
        if mass[c] > 0.0 {
            var.row_mut(c).iter_mut().for_each(|v| *v = (*v / mass[c]).max(floor));
        } else {
            var.row_mut(c).copy_from_slice(previous.row(c));
        }
    }
    var
}
