//! Cluster-to-class assignment for zero-shot evaluation.
//!
//! Clusters are summarized by the mean feature vector of their members, and
//! each non-empty cluster is mapped to a distinct class by a rectangular
//! linear assignment that maximizes the total mean probability.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{argmax, Matrix};
use crate::model::{FeatureSet, SoftAssignment, TaskInstance};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterProfile {
    /// Ids of the clusters with at least one member, ascending.
    pub clusters: Vec<usize>,
    /// Row `j` is the mean feature of cluster `clusters[j]`.
    pub means: Matrix,
}

/// Class of each listed cluster; distinct classes for [`match_clusters`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterClassMap {
    pub pairs: Vec<(usize, usize)>,
}

impl ClusterClassMap {
    pub fn class_of(&self, cluster: usize) -> Option<usize> {
        self.pairs.iter().find(|(c, _)| *c == cluster).map(|&(_, l)| l)
    }

    pub fn is_injective(&self) -> bool {
        let mut seen = std::collections::HashSet::new();
        self.pairs.iter().all(|(_, l)| seen.insert(*l))
    }

    /// Sum of `means[cluster][class]` over the mapped pairs.
    pub fn profit(&self, profile: &ClusterProfile) -> f64 {
        self.pairs
            .iter()
            .map(|&(c, l)| {
                let j = profile.clusters.iter().position(|&x| x == c).expect("cluster in profile");
                profile.means.get(j, l)
            })
            .sum()
    }
}

/// Hard clusters of the query rows (row argmax) and their mean features.
pub fn cluster_profiles(
    features: &FeatureSet,
    task: &TaskInstance,
    assignment: &SoftAssignment,
) -> Result<ClusterProfile> {
    if assignment.n_query() != task.n_query() {
        return Err(Error::dim("assignment does not match the task"));
    }
    let k = assignment.n_classes();
    let dim = features.dim();
    let mut sums = Matrix::zeros(k, dim);
    let mut counts = vec![0usize; k];
    for (&i, cluster) in task.query_indices.iter().zip(assignment.query_argmax()) {
        counts[cluster] += 1;
        for (s, v) in sums.row_mut(cluster).iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    let clusters: Vec<usize> = (0..k).filter(|&c| counts[c] > 0).collect();
    let mut means = sums.select_rows(&clusters);
    for (j, &c) in clusters.iter().enumerate() {
        let inv = 1.0 / counts[c] as f64;
        means.row_mut(j).iter_mut().for_each(|v| *v *= inv);
    }
    Ok(ClusterProfile { clusters, means })
}

/// Injective cluster-to-class map maximizing the summed mean probability.
pub fn match_clusters(profile: &ClusterProfile) -> Result<ClusterClassMap> {
    let classes = linear_assignment_max(&profile.means)?;
    Ok(ClusterClassMap {
        pairs: profile.clusters.iter().copied().zip(classes).collect(),
    })
}

/// Each cluster to the class of its largest mean coordinate; may collide.
pub fn argmax_assignment(profile: &ClusterProfile) -> ClusterClassMap {
    ClusterClassMap {
        pairs: profile
            .clusters
            .iter()
            .zip(profile.means.iter_rows())
            .map(|(&c, row)| (c, argmax(row)))
            .collect(),
    }
}

/// Rectangular linear sum assignment: for an `n × m` profit matrix with
/// `n ≤ m`, returns a distinct column for every row maximizing total profit.
///
/// Shortest augmenting paths with row/column potentials, `O(n² m)`.
pub fn linear_assignment_max(profit: &Matrix) -> Result<Vec<usize>> {
    let (n, m) = (profit.rows(), profit.cols());
    if n > m {
        return Err(Error::dim(format!("{n} rows cannot be matched into {m} columns")));
    }
    if profit.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("profit matrix has non-finite entries"));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let cost = |i: usize, j: usize| -profit.get(i, j);

    // 1-based with a virtual column 0, as in the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut min_slack = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let slack = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if slack < min_slack[j] {
                    min_slack[j] = slack;
                    way[j] = j0;
                }
                if min_slack[j] < delta {
                    delta = min_slack[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_slack[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut result = vec![0; n];
    for j in 1..=m {
        if owner[j] != 0 {
            result[owner[j] - 1] = j - 1;
        }
    }
    Ok(result)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn profile(rows: &[Vec<f64>]) -> ClusterProfile {
        ClusterProfile {
            clusters: (0..rows.len()).collect(),
            means: Matrix::from_rows(rows).unwrap(),
        }
    }

    fn brute_force(profit: &Matrix) -> f64 {
        fn go(profit: &Matrix, row: usize, used: &mut Vec<bool>) -> f64 {
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

    #[test]
    fn identity_profile_maps_to_identity() {
        let p = profile(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]);
        let map = match_clusters(&p).unwrap();
        assert_eq!(map.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(argmax_assignment(&p).pairs, map.pairs);
    }

    #[test]
    fn injectivity_forces_second_best() {
        let p = profile(&[vec![0.9, 0.1, 0.0], vec![0.8, 0.2, 0.0]]);
        let map = match_clusters(&p).unwrap();
        assert_eq!(map.pairs, vec![(0, 0), (1, 1)]);
        assert!(map.is_injective());
        let naive = argmax_assignment(&p);
        assert_eq!(naive.pairs, vec![(0, 0), (1, 0)]);
    }

    #[test]
    fn argmax_allows_collisions() {
        let p = profile(&[vec![0.1, 0.2, 0.7], vec![0.3, 0.1, 0.6]]);
        assert_eq!(argmax_assignment(&p).pairs, vec![(0, 2), (1, 2)]);
        assert!(!argmax_assignment(&p).is_injective());
    }

    #[test]
    fn three_by_four_matches_exhaustive_search() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let data: Vec<f64> = (0..12).map(|_| rng.random()).collect();
            let m = Matrix::from_vec(3, 4, data).unwrap();
            let cols = linear_assignment_max(&m).unwrap();
            let got: f64 = cols.iter().enumerate().map(|(i, &j)| m.get(i, j)).sum();
            assert!((got - brute_force(&m)).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_shapes_and_values() {
        assert!(linear_assignment_max(&Matrix::zeros(3, 2)).is_err());
        let mut m = Matrix::zeros(1, 2);
        m.set(0, 1, f64::NAN);
        assert!(linear_assignment_max(&m).is_err());
    }

    #[test]
    fn profiles_are_member_means() {
        let fs = FeatureSet::probabilities(
            Matrix::from_rows(&[vec![0.8, 0.2], vec![0.6, 0.4], vec![0.1, 0.9]]).unwrap(),
            None,
        )
        .unwrap();
        let task = TaskInstance::zero_shot(vec![0, 1, 2], 2).unwrap();
        let u = SoftAssignment::new(
            &task,
            Matrix::from_rows(&[vec![0.7, 0.3], vec![0.9, 0.1], vec![0.2, 0.8]]).unwrap(),
        )
        .unwrap();
        let p = cluster_profiles(&fs, &task, &u).unwrap();
        assert_eq!(p.clusters, vec![0, 1]);
        assert!((p.means.get(0, 0) - 0.7).abs() < 1e-15);
        assert!((p.means.get(0, 1) - 0.3).abs() < 1e-15);
        assert_eq!(p.means.row(1), &[0.1, 0.9]);
    }

    #[test]
    fn profiles_match_naive_recomputation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(12);
        let k = 4;
        let rows: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let fs = FeatureSet::probabilities(Matrix::from_rows(&rows).unwrap(), None).unwrap();
        let task = TaskInstance::zero_shot((0..20).collect(), k).unwrap();
        let q: Vec<Vec<f64>> = (0..20)
            .map(|_| {
                let v: Vec<f64> = (0..k).map(|_| rng.random::<f64>()).collect();
                let s: f64 = v.iter().sum();
                v.into_iter().map(|x| x / s).collect()
            })
            .collect();
        let u = SoftAssignment::new(&task, Matrix::from_rows(&q).unwrap()).unwrap();
        let p = cluster_profiles(&fs, &task, &u).unwrap();
        for (j, &c) in p.clusters.iter().enumerate() {
            let members: Vec<usize> = (0..20)
                .filter(|&n| {
                    let r = &q[n];
                    let best = r.iter().cloned().fold(f64::MIN, f64::max);
                    r.iter().position(|&x| x == best).unwrap() == c
                })
                .collect();
            for d in 0..k {
                let mean = members.iter().map(|&n| rows[n][d]).sum::<f64>() / members.len() as f64;
                assert!((p.means.get(j, d) - mean).abs() < 1e-12);
            }
        }
    }
}
