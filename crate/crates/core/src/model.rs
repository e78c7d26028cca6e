//! Domain types shared by every solver, the Dirichlet log-density, and the
//! three terms of the regularized clustering objective: data fit `−L`, the
//! entropic barrier `Φ`, and the partition-complexity penalty `Ψ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::specfun::ln_gamma_pos;

/// Floor applied to feature coordinates before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-12;

/// Row-sum tolerance for probability feature sets.
pub const SIMPLEX_TOL: f64 = 1e-6;

/// Row-sum tolerance for assignment matrices and proportions.
pub const ASSIGNMENT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContentKind {
    /// Rows are points of the probability simplex, one coordinate per class.
    SimplexProbabilities,
    /// Rows are unconstrained embedding vectors.
    RawEmbeddings,
}

/// An immutable, validated collection of feature vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    kind: ContentKind,
    rows: Matrix,
    labels: Option<Vec<usize>>,
    n_classes: usize,
    class_names: Option<Vec<String>>,
}

impl FeatureSet {
    /// Probability features: the class count equals the row dimension.
    pub fn probabilities(rows: Matrix, labels: Option<Vec<usize>>) -> Result<Self> {
        Self::with_tolerance(ContentKind::SimplexProbabilities, rows, labels, None, None, SIMPLEX_TOL)
    }

    /// Raw embeddings; `n_classes` is the size of the label space.
    pub fn embeddings(rows: Matrix, labels: Option<Vec<usize>>, n_classes: usize) -> Result<Self> {
        Self::with_tolerance(
            ContentKind::RawEmbeddings,
            rows,
            labels,
            Some(n_classes),
            None,
            SIMPLEX_TOL,
        )
    }

    pub(crate) fn with_tolerance(
        kind: ContentKind,
        rows: Matrix,
        labels: Option<Vec<usize>>,
        n_classes: Option<usize>,
        class_names: Option<Vec<String>>,
        tol: f64,
    ) -> Result<Self> {
        if rows.cols() == 0 {
            return Err(Error::invalid("feature dimension must be positive"));
        }
        if rows.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("features contain non-finite values"));
        }
        let n_classes = match kind {
            ContentKind::SimplexProbabilities => {
                if let Some(k) = n_classes {
                    if k != rows.cols() {
                        return Err(Error::dim(format!(
                            "probability features have dimension {} but {k} classes",
                            rows.cols()
                        )));
                    }
                }
                for (i, row) in rows.iter_rows().enumerate() {
                    let sum: f64 = row.iter().sum();
                    if row.iter().any(|&v| v < 0.0) || (sum - 1.0).abs() > tol {
                        return Err(Error::RowSum { row: i, sum });
                    }
                }
                rows.cols()
            }
            ContentKind::RawEmbeddings => n_classes
                .or_else(|| class_names.as_ref().map(Vec::len))
                .or_else(|| labels.as_ref().map(|l| l.iter().max().map_or(0, |m| m + 1)))
                .ok_or_else(|| Error::invalid("raw embeddings need a class count"))?,
        };
        if let Some(labels) = &labels {
            if labels.len() != rows.rows() {
                return Err(Error::dim(format!(
                    "{} labels for {} samples",
                    labels.len(),
                    rows.rows()
                )));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
                return Err(Error::invalid(format!(
                    "label {bad} outside [0, {n_classes})"
                )));
            }
        }
        if let Some(names) = &class_names {
            if names.len() != n_classes {
                return Err(Error::dim(format!(
                    "{} class names for {n_classes} classes",
                    names.len()
                )));
            }
        }
        Ok(Self {
            kind,
            rows,
            labels,
            n_classes,
            class_names,
        })
    }

    pub fn with_class_names(self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.n_classes {
            return Err(Error::dim(format!(
                "{} class names for {} classes",
                names.len(),
                self.n_classes
            )));
        }
        Ok(Self {
            class_names: Some(names),
            ..self
        })
    }

    pub fn kind(&self) -> ContentKind {
        self.kind
    }

    pub fn n_samples(&self) -> usize {
        self.rows.rows()
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn rows(&self) -> &Matrix {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.rows.row(i)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn require_probabilities(&self) -> Result<()> {
        match self.kind {
            ContentKind::SimplexProbabilities => Ok(()),
            ContentKind::RawEmbeddings => Err(Error::invalid(
                "this operation needs simplex probability features",
            )),
        }
    }

    pub fn require_labels(&self) -> Result<&[usize]> {
        self.labels()
            .ok_or_else(|| Error::invalid("feature set has no labels"))
    }
}

/// One episode: labelled support rows and unlabelled query rows.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TaskInstance {
    pub support_indices: Vec<usize>,
    /// Class of each support sample; the one-hot label vector is implied.
    pub support_labels: Vec<usize>,
    pub query_indices: Vec<usize>,
    pub n_classes: usize,
}

impl TaskInstance {
    pub fn zero_shot(query_indices: Vec<usize>, n_classes: usize) -> Result<Self> {
        Self::new(Vec::new(), Vec::new(), query_indices, n_classes)
    }

    pub fn new(
        support_indices: Vec<usize>,
        support_labels: Vec<usize>,
        query_indices: Vec<usize>,
        n_classes: usize,
    ) -> Result<Self> {
        let task = Self {
            support_indices,
            support_labels,
            query_indices,
            n_classes,
        };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.query_indices.is_empty() {
            return Err(Error::EmptyQuery);
        }
        if self.support_indices.len() != self.support_labels.len() {
            return Err(Error::dim("support indices and labels differ in length"));
        }
        if let Some(&l) = self.support_labels.iter().find(|&&l| l >= self.n_classes) {
            return Err(Error::invalid(format!("support label {l} out of range")));
        }
        let mut seen = std::collections::HashSet::new();
        for &i in self.support_indices.iter().chain(&self.query_indices) {
            if !seen.insert(i) {
                return Err(Error::invalid(format!("sample {i} appears twice in the task")));
            }
        }
        Ok(())
    }

    pub(crate) fn check_against(&self, features: &FeatureSet) -> Result<()> {
        self.validate()?;
        let n = features.n_samples();
        if let Some(i) = self.rows().find(|&i| i >= n) {
            return Err(Error::dim(format!("task index {i} beyond {n} samples")));
        }
        if self.n_classes != features.n_classes() {
            return Err(Error::dim(format!(
                "task has {} classes, features have {}",
                self.n_classes,
                features.n_classes()
            )));
        }
        Ok(())
    }

    pub fn n_support(&self) -> usize {
        self.support_indices.len()
    }

    pub fn n_query(&self) -> usize {
        self.query_indices.len()
    }

    pub fn n_rows(&self) -> usize {
        self.n_support() + self.n_query()
    }

    /// Feature indices in assignment-row order: support first, then query.
    pub fn rows(&self) -> impl Iterator<Item = usize> + '_ {
        self.support_indices.iter().chain(&self.query_indices).copied()
    }

    pub fn row_indices(&self) -> Vec<usize> {
        self.rows().collect()
    }
}

/// Per-class Dirichlet parameters; row `k` is `α_k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirichletParams {
    alphas: Matrix,
}

impl DirichletParams {
    pub fn new(alphas: Matrix) -> Result<Self> {
        if alphas.as_slice().iter().any(|&a| !(a > 0.0 && a.is_finite())) {
            return Err(Error::invalid("Dirichlet parameters must be positive and finite"));
        }
        Ok(Self { alphas })
    }

    /// Every `α_k = 1`, the flat density on the simplex.
    pub fn uniform(n_classes: usize, dim: usize) -> Self {
        Self {
            alphas: Matrix::filled(n_classes, dim, 1.0),
        }
    }

    pub fn n_components(&self) -> usize {
        self.alphas.rows()
    }

    pub fn dim(&self) -> usize {
        self.alphas.cols()
    }

    pub fn alpha(&self, k: usize) -> &[f64] {
        self.alphas.row(k)
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.alphas
    }

    pub(crate) fn set_alpha(&mut self, k: usize, alpha: &[f64]) {
        self.alphas.row_mut(k).copy_from_slice(alpha);
    }
}

/// Row-stochastic assignment over the rows of a task (support then query).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftAssignment {
    u: Matrix,
    n_support: usize,
}

impl SoftAssignment {
    /// Support rows are set to their one-hot labels; `query_rows` must hold
    /// one simplex row per query sample.
    pub fn new(task: &TaskInstance, query_rows: Matrix) -> Result<Self> {
        if query_rows.rows() != task.n_query() || query_rows.cols() != task.n_classes {
            return Err(Error::dim(format!(
                "query assignment is {}x{}, task needs {}x{}",
                query_rows.rows(),
                query_rows.cols(),
                task.n_query(),
                task.n_classes
            )));
        }
        for (i, row) in query_rows.iter_rows().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0 || !v.is_finite()) || (sum - 1.0).abs() > ASSIGNMENT_TOL {
                return Err(Error::RowSum { row: i, sum });
            }
        }
        let k = task.n_classes;
        let mut u = Matrix::zeros(task.n_rows(), k);
        for (r, &label) in task.support_labels.iter().enumerate() {
            u.set(r, label, 1.0);
        }
        for (q, row) in query_rows.iter_rows().enumerate() {
            u.row_mut(task.n_support() + q).copy_from_slice(row);
        }
        Ok(Self {
            u,
            n_support: task.n_support(),
        })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.u
    }

    pub fn n_support(&self) -> usize {
        self.n_support
    }

    pub fn n_query(&self) -> usize {
        self.u.rows() - self.n_support
    }

    pub fn n_classes(&self) -> usize {
        self.u.cols()
    }

    pub fn query_row(&self, q: usize) -> &[f64] {
        self.u.row(self.n_support + q)
    }

    pub(crate) fn query_row_mut(&mut self, q: usize) -> &mut [f64] {
        self.u.row_mut(self.n_support + q)
    }

    pub fn query_rows(&self) -> impl Iterator<Item = &[f64]> {
        self.u.iter_rows().skip(self.n_support)
    }

    /// Column `k` of the full matrix: the per-sample weights for class `k`.
    pub fn weights(&self, k: usize) -> Vec<f64> {
        self.u.column(k)
    }

    /// Hard cluster of each query row (row argmax, lowest index on ties).
    pub fn query_argmax(&self) -> Vec<usize> {
        self.query_rows().map(crate::matrix::argmax).collect()
    }
}

/// Class proportions over the query set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassProportions {
    pub pi: Vec<f64>,
}

impl ClassProportions {
    /// Mean query assignment per class.
    pub fn from_assignment(u: &SoftAssignment) -> Result<Self> {
        let n_query = u.n_query();
        if n_query == 0 {
            return Err(Error::EmptyQuery);
        }
        let mut pi = vec![0.0; u.n_classes()];
        for row in u.query_rows() {
            for (p, v) in pi.iter_mut().zip(row) {
                *p += v;
            }
        }
        let inv = 1.0 / n_query as f64;
        pi.iter_mut().for_each(|p| *p *= inv);
        Ok(Self { pi })
    }
}

/// Values of the objective terms for one iterate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveBreakdown {
    /// `−L`.
    pub neg_log_likelihood: f64,
    /// `Φ`; zero when the barrier is excluded from the objective.
    pub barrier: f64,
    /// `Ψ`, reported even when `lambda` is zero.
    pub mdl: f64,
    pub lambda: f64,
    pub total: f64,
}

/// `ln Γ(Σα) − Σ ln Γ(α_i)`, the log of the inverse multivariate beta.
pub fn log_normalizer(alpha: &[f64]) -> f64 {
    let sum: f64 = alpha.iter().sum();
    ln_gamma_pos(sum) - alpha.iter().map(|&a| ln_gamma_pos(a)).sum::<f64>()
}

/// Clamped logarithms of a feature row.
pub fn clamped_logs(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| v.max(LOG_FLOOR).ln()).collect()
}

/// Log-density from pre-clamped log features and a precomputed normalizer.
pub(crate) fn log_density_from_logs(log_z: &[f64], alpha: &[f64], log_norm: f64) -> f64 {
    log_norm
        + log_z
            .iter()
            .zip(alpha)
            .map(|(lz, a)| (a - 1.0) * lz)
            .sum::<f64>()
}

fn check_alpha(alpha: &[f64]) -> Result<()> {
    if alpha.iter().all(|&a| a > 0.0 && a.is_finite()) {
        Ok(())
    } else {
        Err(Error::invalid("Dirichlet parameters must be positive and finite"))
    }
}

/// `ln p(z | α)` for the Dirichlet density, with `z` floored at [`LOG_FLOOR`].
pub fn dirichlet_log_density(z: &[f64], alpha: &[f64]) -> Result<f64> {
    if z.len() != alpha.len() {
        return Err(Error::dim(format!(
            "point has {} coordinates, parameter has {}",
            z.len(),
            alpha.len()
        )));
    }
    check_alpha(alpha)?;
    Ok(log_density_from_logs(&clamped_logs(z), alpha, log_normalizer(alpha)))
}

/// Clamped log features for the rows of a task, in assignment-row order.
pub fn task_log_features(features: &FeatureSet, task: &TaskInstance) -> Matrix {
    let k = features.dim();
    let mut out = Matrix::zeros(task.n_rows(), k);
    for (r, i) in task.rows().enumerate() {
        for (dst, &v) in out.row_mut(r).iter_mut().zip(features.row(i)) {
            *dst = v.max(LOG_FLOOR).ln();
        }
    }
    out
}

fn check_shapes(
    u: &SoftAssignment,
    alphas: &DirichletParams,
    features: &FeatureSet,
    task: &TaskInstance,
) -> Result<()> {
    task.check_against(features)?;
    if u.matrix().rows() != task.n_rows() || u.n_support() != task.n_support() {
        return Err(Error::dim("assignment rows do not match the task"));
    }
    if u.n_classes() != alphas.n_components() || alphas.dim() != features.dim() {
        return Err(Error::dim(format!(
            "{} assignment columns, {}x{} Dirichlet parameters, {}-dim features",
            u.n_classes(),
            alphas.n_components(),
            alphas.dim(),
            features.dim()
        )));
    }
    Ok(())
}

/// `L = Σ_n Σ_k u_{n,k} ln p(z_n | α_k)` over support and query rows.
pub fn log_likelihood(
    u: &SoftAssignment,
    alphas: &DirichletParams,
    features: &FeatureSet,
    task: &TaskInstance,
) -> Result<f64> {
    check_shapes(u, alphas, features, task)?;
    let log_z = task_log_features(features, task);
    Ok(log_likelihood_from_logs(u.matrix(), alphas, &log_z))
}

pub(crate) fn log_likelihood_from_logs(u: &Matrix, alphas: &DirichletParams, log_z: &Matrix) -> f64 {
    let norms: Vec<f64> = (0..alphas.n_components())
        .map(|k| log_normalizer(alphas.alpha(k)))
        .collect();
    let mut total = 0.0;
    for (row_u, row_lz) in u.iter_rows().zip(log_z.iter_rows()) {
        for (k, &w) in row_u.iter().enumerate() {
            if w != 0.0 {
                total += w * log_density_from_logs(row_lz, alphas.alpha(k), norms[k]);
            }
        }
    }
    total
}

fn entropy_term(v: f64) -> f64 {
    if v == 0.0 {
        0.0
    } else {
        v * v.ln()
    }
}

/// `Φ = Σ_n Σ_k u_{n,k} ln u_{n,k}`, with `0 ln 0 = 0`.
pub fn barrier(u: &SoftAssignment) -> Result<f64> {
    barrier_of(u.matrix())
}

pub(crate) fn barrier_of(u: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    for &v in u.as_slice() {
        if v < 0.0 {
            return Err(Error::Domain {
                function: "barrier",
                value: v,
            });
        }
        total += entropy_term(v);
    }
    Ok(total)
}

/// Partition complexity `Ψ = −Σ_k π_k ln π_k` of the query proportions.
pub fn partition_complexity(u: &SoftAssignment) -> Result<(f64, ClassProportions)> {
    let props = ClassProportions::from_assignment(u)?;
    let psi = -props.pi.iter().map(|&p| entropy_term(p)).sum::<f64>();
    Ok((psi, props))
}

/// Full objective `−L + Φ + λΨ`.
pub fn objective(
    u: &SoftAssignment,
    alphas: &DirichletParams,
    features: &FeatureSet,
    task: &TaskInstance,
    lambda: f64,
) -> Result<ObjectiveBreakdown> {
    check_shapes(u, alphas, features, task)?;
    let log_z = task_log_features(features, task);
    objective_from_logs(u, alphas, &log_z, lambda, true)
}

pub(crate) fn objective_from_logs(
    u: &SoftAssignment,
    alphas: &DirichletParams,
    log_z: &Matrix,
    lambda: f64,
    include_barrier: bool,
) -> Result<ObjectiveBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::invalid(format!("lambda must be nonnegative, got {lambda}")));
    }
    let neg_log_likelihood = -log_likelihood_from_logs(u.matrix(), alphas, log_z);
    let barrier = if include_barrier { barrier(u)? } else { 0.0 };
    let (mdl, _) = partition_complexity(u)?;
    Ok(ObjectiveBreakdown {
        neg_log_likelihood,
        barrier,
        mdl,
        lambda,
        total: neg_log_likelihood + barrier + lambda * mdl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn naive_ln_gamma(x: f64) -> f64 {
        crate::specfun::ln_gamma(x).unwrap()
    }

    fn small_task() -> (FeatureSet, TaskInstance) {
        let rows = Matrix::from_rows(&[
            vec![0.6, 0.3, 0.1],
            vec![0.2, 0.5, 0.3],
            vec![0.1, 0.1, 0.8],
            vec![0.3, 0.3, 0.4],
        ])
        .unwrap();
        let fs = FeatureSet::probabilities(rows, Some(vec![0, 1, 2, 2])).unwrap();
        let task = TaskInstance::new(vec![0], vec![0], vec![1, 2, 3], 3).unwrap();
        (fs, task)
    }

    #[test]
    fn uniform_density_is_log_factorial() {
        let v = dirichlet_log_density(&[0.2, 0.3, 0.5], &[1.0, 1.0, 1.0]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn beta_two_two_at_half() {
        let v = dirichlet_log_density(&[0.5, 0.5], &[2.0, 2.0]).unwrap();
        assert!((v - 1.5f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn density_matches_direct_formula() {
        // Γ(20) / (Γ(10) Γ(5) Γ(5)) · 0.6⁹ 0.3⁴ 0.1⁴ evaluated with exact factorials.
        let fact = |n: u64| (1..=n).map(|i| i as f64).product::<f64>();
        let coef = fact(19) / (fact(9) * fact(4) * fact(4));
        let expect = (coef * 0.6f64.powi(9) * 0.3f64.powi(4) * 0.1f64.powi(4)).ln();
        let v = dirichlet_log_density(&[0.6, 0.3, 0.1], &[10.0, 5.0, 5.0]).unwrap();
        assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
    }

    #[test]
    fn density_errors() {
        assert!(dirichlet_log_density(&[0.5, 0.5], &[1.0, 1.0, 1.0]).is_err());
        assert!(dirichlet_log_density(&[0.5, 0.5], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn density_clamps_zero_coordinates() {
        let v = dirichlet_log_density(&[1.0, 0.0], &[2.0, 2.0]).unwrap();
        assert!(v.is_finite());
    }

    #[test]
    fn density_integrates_to_one_on_segment() {
        for alpha in [[2.0, 3.0], [1.5, 4.5], [7.0, 2.5]] {
            let n = 200_000;
            let h = 1.0 / n as f64;
            let mut integral = 0.0;
            for i in 0..=n {
                let x = i as f64 * h;
                let w = if i == 0 || i == n { 0.5 } else { 1.0 };
                let d = if x == 0.0 || x == 1.0 {
                    0.0
                } else {
                    dirichlet_log_density(&[x, 1.0 - x], &alpha).unwrap().exp()
                };
                integral += w * d * h;
            }
            // the simplex in R² has length √2 but the density is w.r.t. the first coordinate
            assert!((integral - 1.0).abs() < 1e-4, "{alpha:?}: {integral}");
        }
    }

    #[test]
    fn likelihood_single_query_one_hot() {
        let (fs, _) = small_task();
        let task = TaskInstance::zero_shot(vec![0], 3).unwrap();
        let u = SoftAssignment::new(&task, Matrix::from_rows(&[vec![0.0, 1.0, 0.0]]).unwrap()).unwrap();
        let mut a = Matrix::filled(3, 3, 1.0);
        a.row_mut(1).copy_from_slice(&[10.0, 5.0, 5.0]);
        let alphas = DirichletParams::new(a).unwrap();
        let l = log_likelihood(&u, &alphas, &fs, &task).unwrap();
        let expect = dirichlet_log_density(fs.row(0), &[10.0, 5.0, 5.0]).unwrap();
        assert!((l - expect).abs() < 1e-12);
    }

    #[test]
    fn likelihood_flat_alphas() {
        let (fs, task) = small_task();
        let q = Matrix::from_rows(&[vec![0.2, 0.3, 0.5], vec![1.0, 0.0, 0.0], vec![0.3, 0.3, 0.4]]).unwrap();
        let u = SoftAssignment::new(&task, q).unwrap();
        let l = log_likelihood(&u, &DirichletParams::uniform(3, 3), &fs, &task).unwrap();
        assert!((l - 4.0 * 2f64.ln()).abs() < 1e-12);
    }

    /// Double loop straight from the definition, with its own normalizer.
    fn naive_likelihood(u: &SoftAssignment, alphas: &DirichletParams, fs: &FeatureSet, task: &TaskInstance) -> f64 {
        let mut total = 0.0;
        for (r, i) in task.rows().enumerate() {
            for k in 0..alphas.n_components() {
                let a = alphas.alpha(k);
                let mut ld = naive_ln_gamma(a.iter().sum());
                for (j, &aj) in a.iter().enumerate() {
                    ld += (aj - 1.0) * fs.row(i)[j].max(LOG_FLOOR).ln() - naive_ln_gamma(aj);
                }
                total += u.matrix().get(r, k) * ld;
            }
        }
        total
    }

    fn random_setup(seed: u64, n: usize, k: usize) -> (FeatureSet, TaskInstance, SoftAssignment, DirichletParams) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let simplex_row = |rng: &mut rand_chacha::ChaCha8Rng| {
            let mut v: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            v
        };
        let rows: Vec<Vec<f64>> = (0..n).map(|_| simplex_row(&mut rng)).collect();
        let fs = FeatureSet::probabilities(Matrix::from_rows(&rows).unwrap(), None).unwrap();
        let n_support = n / 3;
        let support: Vec<usize> = (0..n_support).collect();
        let labels: Vec<usize> = (0..n_support).map(|i| i % k).collect();
        let task = TaskInstance::new(support, labels, (n_support..n).collect(), k).unwrap();
        let q: Vec<Vec<f64>> = (0..task.n_query()).map(|_| simplex_row(&mut rng)).collect();
        let u = SoftAssignment::new(&task, Matrix::from_rows(&q).unwrap()).unwrap();
        let a: Vec<f64> = (0..k * k).map(|_| rng.random::<f64>() * 10.0 + 0.1).collect();
        let alphas = DirichletParams::new(Matrix::from_vec(k, k, a).unwrap()).unwrap();
        (fs, task, u, alphas)
    }

    #[test]
    fn likelihood_matches_naive_double_loop() {
        let (fs, task, u, alphas) = random_setup(11, 10, 4);
        let l = log_likelihood(&u, &alphas, &fs, &task).unwrap();
        assert!((l - naive_likelihood(&u, &alphas, &fs, &task)).abs() < 1e-10);
    }

    #[test]
    fn barrier_values() {
        let task = TaskInstance::zero_shot(vec![0, 1, 2], 2).unwrap();
        let one_hot = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(barrier(&SoftAssignment::new(&task, one_hot).unwrap()).unwrap(), 0.0);
        let mixed = Matrix::from_rows(&[vec![0.25, 0.75], vec![0.5, 0.5], vec![1.0, 0.0]]).unwrap();
        let phi = barrier(&SoftAssignment::new(&task, mixed).unwrap()).unwrap();
        let expect = 0.25 * 0.25f64.ln() + 0.75 * 0.75f64.ln() + 0.5f64.ln();
        assert!((phi - expect).abs() < 1e-12);

        let single = TaskInstance::zero_shot(vec![0], 4).unwrap();
        let uniform = Matrix::filled(1, 4, 0.25);
        let phi = barrier(&SoftAssignment::new(&single, uniform).unwrap()).unwrap();
        assert!((phi + 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn barrier_rejects_negative_entries() {
        let m = Matrix::from_rows(&[vec![-0.1, 1.1]]).unwrap();
        assert!(barrier_of(&m).is_err());
    }

    #[test]
    fn psi_values() {
        let task = TaskInstance::zero_shot(vec![0, 1, 2, 3], 3).unwrap();
        let all_one = Matrix::from_rows(&vec![vec![0.0, 1.0, 0.0]; 4]).unwrap();
        let (psi, props) = partition_complexity(&SoftAssignment::new(&task, all_one).unwrap()).unwrap();
        assert_eq!(psi, 0.0);
        assert_eq!(props.pi, vec![0.0, 1.0, 0.0]);

        let uniform = Matrix::filled(4, 3, 1.0 / 3.0);
        let (psi, _) = partition_complexity(&SoftAssignment::new(&task, uniform).unwrap()).unwrap();
        assert!((psi - 3f64.ln()).abs() < 1e-12);

        let mixed = Matrix::from_rows(&[
            vec![0.5, 0.5, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.2, 0.2, 0.6],
            vec![0.1, 0.7, 0.2],
        ])
        .unwrap();
        let (psi, props) = partition_complexity(&SoftAssignment::new(&task, mixed).unwrap()).unwrap();
        let pi: [f64; 3] = [1.8 / 4.0, 1.4 / 4.0, 0.8 / 4.0];
        let expect: f64 = -pi.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((psi - expect).abs() < 1e-12);
        for (a, b) in props.pi.iter().zip(pi) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn objective_identity_and_oracle() {
        let (fs, task, u, alphas) = random_setup(5, 9, 3);
        let lambda = 2.5;
        let ob = objective(&u, &alphas, &fs, &task, lambda).unwrap();
        assert!((ob.total - (ob.neg_log_likelihood + ob.barrier + lambda * ob.mdl)).abs() < 1e-9);

        let nll = -naive_likelihood(&u, &alphas, &fs, &task);
        let phi: f64 = u.matrix().as_slice().iter().map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 }).sum();
        let mut pi = [0.0; 3];
        for row in u.query_rows() {
            for k in 0..3 {
                pi[k] += row[k] / task.n_query() as f64;
            }
        }
        let psi: f64 = -pi.iter().map(|p| p * p.ln()).sum::<f64>();
        assert!((ob.total - (nll + phi + lambda * psi)).abs() < 1e-9);
    }

    #[test]
    fn objective_one_hot_without_mdl_is_nll() {
        let (fs, task) = small_task();
        let q = Matrix::from_rows(&[vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]]).unwrap();
        let u = SoftAssignment::new(&task, q).unwrap();
        let alphas = DirichletParams::new(Matrix::filled(3, 3, 2.0)).unwrap();
        let ob = objective(&u, &alphas, &fs, &task, 0.0).unwrap();
        assert_eq!(ob.barrier, 0.0);
        assert_eq!(ob.total, ob.neg_log_likelihood);
    }

    #[test]
    fn support_rows_are_pinned_one_hot() {
        let (_, task) = small_task();
        let q = Matrix::filled(3, 3, 1.0 / 3.0);
        let u = SoftAssignment::new(&task, q).unwrap();
        assert_eq!(u.matrix().row(0), &[1.0, 0.0, 0.0]);
        assert!(SoftAssignment::new(&task, Matrix::filled(3, 3, 0.3)).is_err());
    }

    #[test]
    fn feature_set_validation() {
        let bad = Matrix::from_rows(&[vec![0.5, 0.4]]).unwrap();
        assert!(matches!(FeatureSet::probabilities(bad, None), Err(Error::RowSum { .. })));
        let ok = Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap();
        assert!(FeatureSet::probabilities(ok.clone(), Some(vec![2])).is_err());
        assert!(FeatureSet::probabilities(ok, Some(vec![1])).is_ok());
    }

    #[test]
    fn task_validation() {
        assert!(matches!(TaskInstance::zero_shot(vec![], 3), Err(Error::EmptyQuery)));
        assert!(TaskInstance::new(vec![1], vec![0], vec![1, 2], 3).is_err());
        assert!(TaskInstance::new(vec![0], vec![3], vec![1], 3).is_err());
    }

    proptest! {
        #[test]
        fn likelihood_is_linear_in_u(seed in 0u64..10_000, t in 0.0f64..1.0) {
            let (fs, task, u, alphas) = random_setup(seed, 8, 3);
            let (_, _, v, _) = random_setup(seed + 1, 8, 3);
            let mix: Vec<f64> = u.matrix().as_slice().iter().zip(v.matrix().as_slice())
                .map(|(a, b)| t * a + (1.0 - t) * b).collect();
            let m = Matrix::from_vec(8, 3, mix).unwrap();
            let q = m.select_rows(&(task.n_support()..8).collect::<Vec<_>>());
            let w = SoftAssignment::new(&task, q).unwrap();
            let lw = log_likelihood(&w, &alphas, &fs, &task).unwrap();
            let lu = log_likelihood(&u, &alphas, &fs, &task).unwrap();
            let lv = log_likelihood(&v, &alphas, &fs, &task).unwrap();
            prop_assert!((lw - (t * lu + (1.0 - t) * lv)).abs() < 1e-9 * lw.abs().max(1.0));
        }

        #[test]
        fn barrier_nonpositive_and_psi_bounded(seed in 0u64..10_000) {
            let (_, _, u, _) = random_setup(seed, 12, 4);
            let phi = barrier(&u).unwrap();
            prop_assert!(phi <= 0.0);
            let (psi, _) = partition_complexity(&u).unwrap();
            prop_assert!(psi >= 0.0 && psi <= 4f64.ln() + 1e-12);
        }
    }
}
