//! Weighted Dirichlet maximum likelihood by majorization-minimization.
//!
//! Two majorants of the per-class negative log-likelihood `F` are provided:
//!
//! * the quadratic majorant, which bounds `ln Γ(· + 1)` coordinate-wise by a
//!   tangent parabola with curvature [`curvature`](crate::specfun::curvature)
//!   and linearizes `−ln Γ(Σα)`. Its minimizer is the positive root of
//!   `c α² + b α = 1` per coordinate, so each step is closed form.
//! * Minka's majorant, which only linearizes `−ln Γ(Σα)` and needs a Newton
//!   inversion of the digamma function per coordinate. Kept as a baseline.
//!
//! `F` depends on the data only through the total weight and the weighted
//! mean of `ln z_i`, which is all [`WeightedSample`] keeps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{relative_squared_change, Matrix};
use crate::model::LOG_FLOOR;
use crate::specfun::{curvature_and_digamma_1p, curvature_pos, digamma_pos, ln_gamma_pos, trigamma_pos};

/// Weight mass below which a cluster counts as empty.
pub const EMPTY_WEIGHT: f64 = 1e-12;

pub const DEFAULT_EPS: f64 = 1e-13;
pub const DEFAULT_MAX_ITER: usize = 1000;

const NEWTON_MAX_ITER: usize = 50;

/// Sufficient statistics of a weighted sample of simplex points.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedSample {
    total_weight: f64,
    mean_log: Vec<f64>,
}

impl WeightedSample {
    /// `log_z` holds clamped `ln z_{n,i}`, one row per sample.
    pub fn new(log_z: &Matrix, weights: &[f64]) -> Result<Self> {
        if log_z.rows() != weights.len() {
            return Err(Error::dim(format!(
                "{} samples, {} weights",
                log_z.rows(),
                weights.len()
            )));
        }
        if let Some(&w) = weights.iter().find(|&&w| !(w >= 0.0 && w.is_finite())) {
            return Err(Error::invalid(format!("negative or non-finite weight {w}")));
        }
        let total_weight: f64 = weights.iter().sum();
        let mut mean_log = vec![0.0; log_z.cols()];
        for (row, &w) in log_z.iter_rows().zip(weights) {
            if w == 0.0 {
                continue;
            }
            for (m, &lz) in mean_log.iter_mut().zip(row) {
                *m += w * lz;
            }
        }
        if total_weight > 0.0 {
            mean_log.iter_mut().for_each(|m| *m /= total_weight);
        }
        Ok(Self {
            total_weight,
            mean_log,
        })
    }

    /// Uniformly weighted simplex points; coordinates are floored before the log.
    pub fn from_points(points: &Matrix) -> Result<Self> {
        let mut log_z = points.clone();
        for i in 0..log_z.rows() {
            for v in log_z.row_mut(i) {
                *v = v.max(LOG_FLOOR).ln();
            }
        }
        Self::new(&log_z, &vec![1.0; points.rows()])
    }

    pub fn dim(&self) -> usize {
        self.mean_log.len()
    }

    pub fn total_weight(&self) -> f64 {
        self.total_weight
    }

    pub fn mean_log(&self) -> &[f64] {
        &self.mean_log
    }

    pub fn is_empty(&self) -> bool {
        self.total_weight < EMPTY_WEIGHT
    }

    fn require_mass(&self) -> Result<()> {
        if self.is_empty() {
            Err(Error::EmptyCluster(0))
        } else {
            Ok(())
        }
    }

    fn check_alpha(&self, alpha: &[f64]) -> Result<()> {
        if alpha.len() != self.dim() {
            return Err(Error::dim(format!(
                "parameter has {} coordinates, data has {}",
                alpha.len(),
                self.dim()
            )));
        }
        if alpha.iter().all(|&a| a > 0.0 && a.is_finite()) {
            Ok(())
        } else {
            Err(Error::invalid("Dirichlet parameters must be positive and finite"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MmAlgorithm {
    /// Closed-form quadratic majorant.
    #[default]
    Quadratic,
    /// Minka's linearization with Newton digamma inversion.
    Minka,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    /// Stop once `‖α⁺ − α‖² / ‖α‖² ≤ eps`.
    pub eps: f64,
    pub max_iter: usize,
    pub algorithm: MmAlgorithm,
    pub record_trajectory: bool,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            eps: DEFAULT_EPS,
            max_iter: DEFAULT_MAX_ITER,
            algorithm: MmAlgorithm::Quadratic,
            record_trajectory: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MmReport {
    pub iterations: usize,
    pub final_objective: f64,
    pub converged: bool,
    /// `F` at the initial point and after every step, when requested.
    pub trajectory: Option<Vec<f64>>,
}

/// `F(α) = Σ_n u_n [−Σ_i (α_i − 1) ln z_{n,i} + Σ_i ln Γ(α_i) − ln Γ(Σα)]`.
pub fn neg_log_likelihood(alpha: &[f64], data: &WeightedSample) -> Result<f64> {
    data.check_alpha(alpha)?;
    data.require_mass()?;
    Ok(nll_unchecked(alpha, data))
}

fn nll_unchecked(alpha: &[f64], data: &WeightedSample) -> f64 {
    let sum: f64 = alpha.iter().sum();
    let per_sample: f64 = alpha
        .iter()
        .zip(&data.mean_log)
        .map(|(&a, &m)| -(a - 1.0) * m + ln_gamma_pos(a))
        .sum::<f64>()
        - ln_gamma_pos(sum);
    data.total_weight * per_sample
}

/// Quadratic tangent majorant `q(α; β)` of [`neg_log_likelihood`].
pub fn majorant(alpha: &[f64], beta: &[f64], data: &WeightedSample) -> Result<f64> {
    data.check_alpha(alpha)?;
    data.check_alpha(beta)?;
    let beta_sum: f64 = beta.iter().sum();
    let psi_sum = digamma_pos(beta_sum);
    let mut per_sample = -ln_gamma_pos(beta_sum);
    for ((&a, &b), &m) in alpha.iter().zip(beta).zip(&data.mean_log) {
        let d = a - b;
        per_sample += -(a - 1.0) * m - a.ln()
            + ln_gamma_pos(b + 1.0)
            + digamma_pos(b + 1.0) * d
            + 0.5 * curvature_pos(b) * d * d
            - d * psi_sum;
    }
    Ok(data.total_weight * per_sample)
}

/// Per-coordinate `(c, b)` such that the majorant minimizer solves `c α² + b α = 1`.
pub fn quadratic_coefficients(alpha: &[f64], data: &WeightedSample) -> Result<Vec<(f64, f64)>> {
    data.check_alpha(alpha)?;
    data.require_mass()?;
    Ok(coefficients(alpha, data))
}

fn coefficients(alpha: &[f64], data: &WeightedSample) -> Vec<(f64, f64)> {
    let psi_sum = digamma_pos(alpha.iter().sum());
    alpha
        .iter()
        .zip(&data.mean_log)
        .map(|(&a, &m)| {
            let (c, psi) = curvature_and_digamma_1p(a);
            (c, psi - psi_sum - c * a - m)
        })
        .collect()
}

/// Positive root of `c x² + b x − 1`, written to avoid cancellation for `b > 0`.
fn positive_root(c: f64, b: f64) -> f64 {
    let disc = (b * b + 4.0 * c).sqrt();
    if b > 0.0 {
        2.0 / (b + disc)
    } else {
        (disc - b) / (2.0 * c)
    }
}

/// One closed-form MM step under the quadratic majorant.
pub fn mm_quadratic_step(alpha: &[f64], data: &WeightedSample) -> Result<Vec<f64>> {
    data.check_alpha(alpha)?;
    data.require_mass()?;
    Ok(quadratic_step_unchecked(alpha, data))
}

fn quadratic_step_unchecked(alpha: &[f64], data: &WeightedSample) -> Vec<f64> {
    coefficients(alpha, data)
        .into_iter()
        .map(|(c, b)| positive_root(c, b))
        .collect()
}

/// One MM step under Minka's majorant: `ψ(α_i⁺) = ψ(Σα) + mean ln z_i`.
pub fn minka_step(alpha: &[f64], data: &WeightedSample) -> Result<Vec<f64>> {
    data.check_alpha(alpha)?;
    data.require_mass()?;
    let psi_sum = digamma_pos(alpha.iter().sum());
    data.mean_log
        .iter()
        .map(|&m| inverse_digamma(psi_sum + m))
        .collect()
}

/// Solves `ψ(x) = y` by Newton's method from Minka's initializer.
fn inverse_digamma(y: f64) -> Result<f64> {
    const NEG_EULER: f64 = -0.577_215_664_901_532_9;
    let mut x = if y >= -2.22 {
        y.exp() + 0.5
    } else {
        -1.0 / (y - NEG_EULER)
    };
    for _ in 0..NEWTON_MAX_ITER {
        let step = (digamma_pos(x) - y) / trigamma_pos(x);
        let mut next = x - step;
        if next <= 0.0 {
            next = 0.5 * x;
        }
        let done = (next - x).abs() <= 1e-15 * x.max(1e-300);
        x = next;
        if done {
            return Ok(x);
        }
    }
    if ((digamma_pos(x) - y) / trigamma_pos(x)).abs() <= 1e-12 * x {
        Ok(x)
    } else {
        Err(Error::InversionFailed { target: y })
    }
}

/// Iterates MM steps from `init` until the relative squared change of the
/// iterate drops to `options.eps` or `options.max_iter` steps have run.
pub fn fit_dirichlet(
    init: &[f64],
    data: &WeightedSample,
    options: &FitOptions,
) -> Result<(Vec<f64>, MmReport)> {
    data.check_alpha(init)?;
    data.require_mass()?;
    if !(options.eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {}", options.eps)));
    }
    let mut alpha = init.to_vec();
    let mut trajectory = options
        .record_trajectory
        .then(|| vec![nll_unchecked(&alpha, data)]);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < options.max_iter {
        let next = match options.algorithm {
            MmAlgorithm::Quadratic => quadratic_step_unchecked(&alpha, data),
            MmAlgorithm::Minka => minka_step(&alpha, data)?,
        };
        iterations += 1;
        let change = relative_squared_change(&next, &alpha);
        alpha = next;
        if let Some(t) = trajectory.as_mut() {
            t.push(nll_unchecked(&alpha, data));
        }
        if change <= options.eps {
            converged = true;
            break;
        }
    }
    let report = MmReport {
        iterations,
        final_objective: nll_unchecked(&alpha, data),
        converged,
        trajectory,
    };
    Ok((alpha, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_data(rng: &mut ChaCha8Rng, n: usize, k: usize) -> WeightedSample {
        let mut rows = Vec::new();
        for _ in 0..n {
            let mut v: Vec<f64> = (0..k).map(|_| rng.random::<f64>().powi(2) + 1e-4).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x = (*x / s).ln());
            rows.push(v);
        }
        let weights: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
        WeightedSample::new(&Matrix::from_rows(&rows).unwrap(), &weights).unwrap()
    }

    fn random_alpha(rng: &mut ChaCha8Rng, k: usize) -> Vec<f64> {
        (0..k).map(|_| (rng.random::<f64>() * 6.0 - 3.0).exp()).collect()
    }

    #[test]
    fn flat_alpha_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = random_data(&mut rng, 7, 4);
        let f = neg_log_likelihood(&[1.0; 4], &data).unwrap();
        let expect = -data.total_weight() * 6f64.ln();
        assert!((f - expect).abs() < 1e-10);
    }

    #[test]
    fn objective_is_weighted_negative_density() {
        let z = Matrix::from_rows(&[vec![0.2, 0.5, 0.3], vec![0.6, 0.1, 0.3]]).unwrap();
        let w = [0.7, 1.9];
        let mut log_z = z.clone();
        for i in 0..2 {
            for v in log_z.row_mut(i) {
                *v = v.ln();
            }
        }
        let data = WeightedSample::new(&log_z, &w).unwrap();
        let alpha = [2.0, 0.7, 3.5];
        let expect: f64 = (0..2)
            .map(|i| -w[i] * crate::model::dirichlet_log_density(z.row(i), &alpha).unwrap())
            .sum();
        assert!((neg_log_likelihood(&alpha, &data).unwrap() - expect).abs() < 1e-10);
    }

    #[test]
    fn zero_mass_is_an_empty_cluster() {
        let log_z = Matrix::from_rows(&[vec![-1.0, -0.5]]).unwrap();
        let data = WeightedSample::new(&log_z, &[0.0]).unwrap();
        assert!(matches!(mm_quadratic_step(&[1.0, 1.0], &data), Err(Error::EmptyCluster(_))));
        assert!(neg_log_likelihood(&[1.0, 1.0], &data).is_err());
        assert!(WeightedSample::new(&log_z, &[-1.0]).is_err());
    }

    #[test]
    fn majorant_tangent_and_dominating() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..200 {
            let k = rng.random_range(2..6);
            let data = random_data(&mut rng, 12, k);
            let beta = random_alpha(&mut rng, k);
            let alpha = random_alpha(&mut rng, k);
            let fb = neg_log_likelihood(&beta, &data).unwrap();
            let qb = majorant(&beta, &beta, &data).unwrap();
            assert!((fb - qb).abs() <= 1e-9 * fb.abs().max(1.0));
            let fa = neg_log_likelihood(&alpha, &data).unwrap();
            let qa = majorant(&alpha, &beta, &data).unwrap();
            assert!(qa >= fa - 1e-9 * fa.abs().max(1.0), "{qa} < {fa}");
        }
    }

    #[test]
    fn majorant_hand_evaluation() {
        // Two samples, K = 2, written out term by term.
        let z: [[f64; 2]; 2] = [[0.3, 0.7], [0.8, 0.2]];
        let w = [1.0, 2.0];
        let log_z = Matrix::from_rows(&[vec![0.3f64.ln(), 0.7f64.ln()], vec![0.8f64.ln(), 0.2f64.ln()]]).unwrap();
        let data = WeightedSample::new(&log_z, &w).unwrap();
        let alpha: [f64; 2] = [1.5, 2.5];
        let beta = [2.0, 1.0];
        let lg = |x: f64| crate::specfun::ln_gamma(x).unwrap();
        let dg = |x: f64| crate::specfun::digamma(x).unwrap();
        let c = |t: f64| crate::specfun::curvature(t).unwrap();
        let mut q = 0.0;
        for n in 0..2 {
            let mut inner = 0.0;
            for i in 0..2 {
                let d = alpha[i] - beta[i];
                inner += -(alpha[i] - 1.0) * z[n][i].ln() - alpha[i].ln()
                    + lg(beta[i] + 1.0)
                    + dg(beta[i] + 1.0) * d
                    + c(beta[i]) / 2.0 * d * d;
            }
            inner += -lg(3.0) - (alpha[0] + alpha[1] - 3.0) * dg(3.0);
            q += w[n] * inner;
        }
        assert!((majorant(&alpha, &beta, &data).unwrap() - q).abs() < 1e-9);
    }

    #[test]
    fn step_solves_quadratic_and_descends() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let k = rng.random_range(2..6);
            let data = random_data(&mut rng, 15, k);
            let alpha = random_alpha(&mut rng, k);
            let next = mm_quadratic_step(&alpha, &data).unwrap();
            for ((c, b), &x) in quadratic_coefficients(&alpha, &data).unwrap().iter().zip(&next) {
                assert!(x > 0.0);
                assert!((c * x * x + b * x - 1.0).abs() < 1e-10);
            }
            let before = neg_log_likelihood(&alpha, &data).unwrap();
            let after = neg_log_likelihood(&next, &data).unwrap();
            assert!(after <= before + 1e-10 * before.abs().max(1.0));
        }
    }

    #[test]
    fn fixed_point_at_optimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = random_data(&mut rng, 40, 3);
        let opts = FitOptions {
            eps: 1e-30,
            max_iter: 200_000,
            ..Default::default()
        };
        let (alpha, _) = fit_dirichlet(&[1.0; 3], &data, &opts).unwrap();
        let next = mm_quadratic_step(&alpha, &data).unwrap();
        let moved = alpha.iter().zip(&next).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(moved < 1e-8, "{moved}");
        let minka = minka_step(&alpha, &data).unwrap();
        let moved = alpha.iter().zip(&minka).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(moved < 1e-8, "{moved}");
    }

    #[test]
    fn trajectory_non_increasing_for_both_algorithms() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for algorithm in [MmAlgorithm::Quadratic, MmAlgorithm::Minka] {
            let data = random_data(&mut rng, 30, 4);
            let opts = FitOptions {
                algorithm,
                record_trajectory: true,
                ..Default::default()
            };
            let (_, report) = fit_dirichlet(&[1.0; 4], &data, &opts).unwrap();
            let t = report.trajectory.unwrap();
            assert_eq!(t.len(), report.iterations + 1);
            for w in t.windows(2) {
                assert!(w[1] <= w[0] + 1e-10, "{algorithm:?}: {} > {}", w[1], w[0]);
            }
        }
    }

    #[test]
    fn inverse_digamma_round_trip() {
        for &x in &[1e-4, 0.03, 0.5, 1.0, 3.7, 50.0, 1e4] {
            let y = digamma_pos(x);
            let back = inverse_digamma(y).unwrap();
            assert!((back - x).abs() <= 1e-10 * x, "{x} -> {back}");
        }
    }

    #[test]
    fn options_validated() {
        let data = WeightedSample::from_points(&Matrix::from_rows(&[vec![0.5, 0.5]]).unwrap()).unwrap();
        let opts = FitOptions {
            eps: 0.0,
            ..Default::default()
        };
        assert!(fit_dirichlet(&[1.0, 1.0], &data, &opts).is_err());
        assert!(fit_dirichlet(&[1.0, -1.0], &data, &FitOptions::default()).is_err());
        assert!(fit_dirichlet(&[1.0], &data, &FitOptions::default()).is_err());
    }

    #[test]
    fn symmetric_data_gives_symmetric_estimate() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut rows = Vec::new();
        for _ in 0..3000 {
            // exchangeable coordinates around the barycentre
            let mut v: Vec<f64> = (0..3).map(|_| 1.0 + 0.2 * rng.random::<f64>()).collect();
            let s: f64 = v.iter().sum();
            v.iter_mut().for_each(|x| *x /= s);
            rows.push(v);
        }
        let data = WeightedSample::from_points(&Matrix::from_rows(&rows).unwrap()).unwrap();
        let (alpha, _) = fit_dirichlet(&[1.0; 3], &data, &FitOptions::default()).unwrap();
        let max = alpha.iter().copied().fold(f64::MIN, f64::max);
        let min = alpha.iter().copied().fold(f64::MAX, f64::min);
        assert!(max / min < 1.05, "{alpha:?}");
    }
}
