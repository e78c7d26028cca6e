#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use simplex_em::mle::{neg_log_likelihood, WeightedSample};
use simplex_em::model::{ClassProportions, DirichletParams};
use simplex_em::specfun::digamma;
use simplex_em::Matrix;

/// Per-unit-weight `F` over `θ = ln α`.
fn cost(theta: &[f64], data: &WeightedSample) -> f64 {
    if theta.iter().any(|t| t.abs() > 300.0) {
        return f64::INFINITY;
    }
    let alpha: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
    neg_log_likelihood(&alpha, data).unwrap() / data.total_weight()
}

fn gradient(theta: &[f64], data: &WeightedSample) -> Vec<f64> {
    let alpha: Vec<f64> = theta.iter().map(|t| t.exp()).collect();
    let psi_sum = digamma(alpha.iter().sum()).unwrap();
    alpha
        .iter()
        .zip(data.mean_log())
        .map(|(&a, &m)| a * (digamma(a).unwrap() - psi_sum - m))
        .collect()
}

/// Solves `h x = g` by Gaussian elimination with partial pivoting.
fn solve_linear(mut h: Vec<Vec<f64>>, mut g: Vec<f64>) -> Option<Vec<f64>> {
    let n = g.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&a, &b| h[a][col].abs().total_cmp(&h[b][col].abs()))?;
        if h[pivot][col].abs() < 1e-300 {
            return None;
        }
        h.swap(col, pivot);
        g.swap(col, pivot);
        for r in col + 1..n {
            let f = h[r][col] / h[col][col];
            for c in col..n {
                h[r][c] -= f * h[col][c];
            }
            g[r] -= f * g[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| h[r][c] * x[c]).sum();
        x[r] = (g[r] - s) / h[r][r];
    }
    Some(x)
}

/// Minimizer of `F` by a damped Newton method over `ln α` whose Hessian is a
/// central difference of the gradient. Shares no code with the MM updates.
pub fn generic_minimizer(data: &WeightedSample, init: &[f64]) -> Vec<f64> {
    let k = init.len();
    let mut theta: Vec<f64> = init.iter().map(|a| a.ln()).collect();
    let norm = |g: &[f64]| g.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut f = cost(&theta, data);
    for _ in 0..500 {
        let g = gradient(&theta, data);
        let g_norm = norm(&g);
        if g_norm < 1e-15 {
            break;
        }
        let h_step = 1e-5;
        let mut hess = vec![vec![0.0; k]; k];
        for j in 0..k {
            let mut up = theta.clone();
            let mut down = theta.clone();
            up[j] += h_step;
            down[j] -= h_step;
            let (gu, gd) = (gradient(&up, data), gradient(&down, data));
            for i in 0..k {
                hess[i][j] = (gu[i] - gd[i]) / (2.0 * h_step);
            }
        }
        for i in 0..k {
            for j in 0..i {
                let avg = 0.5 * (hess[i][j] + hess[j][i]);
                hess[i][j] = avg;
                hess[j][i] = avg;
            }
        }
        let newton = solve_linear(hess, g.clone());
        let direction: Vec<f64> = match newton {
            Some(d) if d.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>() > 0.0 => d,
            _ => g.clone(),
        };
        let mut step = 1.0;
        let mut improved = false;
        while step > 1e-12 {
            let trial: Vec<f64> = theta.iter().zip(&direction).map(|(t, d)| t - step * d).collect();
            let ft = cost(&trial, data);
            let flat = ft <= f + 1e-13 * f.abs().max(1.0) && norm(&gradient(&trial, data)) < g_norm;
            if ft < f || flat {
                theta = trial;
                f = ft;
                improved = true;
                break;
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    theta.iter().map(|t| t.exp()).collect()
}

/// Best total profit over injective row-to-column maps, by enumeration.
pub fn brute_force_assignment(profit: &Matrix) -> f64 {
    fn go(profit: &Matrix, row: usize, used: &mut [bool]) -> f64 {
        if row == profit.rows() {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for j in 0..profit.cols() {
            if !used[j] {
                used[j] = true;
                best = best.max(profit.get(row, j) + go(profit, row + 1, used));
                used[j] = false;
            }
        }
        best
    }
    go(profit, 0, &mut vec![false; profit.cols()])
}

pub fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// Random weighted sample of `n` simplex points in dimension `k`.
pub fn random_weighted_sample(rng: &mut ChaCha8Rng, n: usize, k: usize) -> WeightedSample {
    let mut log_z = Matrix::zeros(n, k);
    for i in 0..n {
        let v: Vec<f64> = (0..k).map(|_| log_uniform(rng, 1e-3, 1.0)).collect();
        let s: f64 = v.iter().sum();
        for (dst, x) in log_z.row_mut(i).iter_mut().zip(&v) {
            *dst = (x / s).ln();
        }
    }
    let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
    WeightedSample::new(&log_z, &weights).unwrap()
}

pub fn params(rows: &[Vec<f64>]) -> DirichletParams {
    DirichletParams::new(Matrix::from_rows(rows).unwrap()).unwrap()
}

pub fn uniform_proportions(k: usize) -> ClassProportions {
    ClassProportions {
        pi: vec![1.0 / k as f64; k],
    }
}

/// Three well-separated components.
pub fn separated_three() -> DirichletParams {
    params(&[
        vec![20.0, 2.0, 2.0],
        vec![2.0, 20.0, 2.0],
        vec![2.0, 2.0, 20.0],
    ])
}

/// Ten components, diagonal 8 and off-diagonal 2: overlapping classes.
pub fn moderate_ten() -> DirichletParams {
    let rows: Vec<Vec<f64>> = (0..10)
        .map(|k| (0..10).map(|j| if j == k { 8.0 } else { 2.0 }).collect())
        .collect();
    params(&rows)
}

/// `k` components with random parameters, each peaked on its own coordinate.
pub fn random_peaked(rng: &mut ChaCha8Rng, k: usize) -> DirichletParams {
    let rows: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            (0..k)
                .map(|j| {
                    if j == c {
                        rng.random_range(4.0..15.0)
                    } else {
                        rng.random_range(0.5..3.0)
                    }
                })
                .collect()
        })
        .collect();
    params(&rows)
}
