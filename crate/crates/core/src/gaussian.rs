//! LRI-Gaussian: location importance through learned coordinate noise.
//!
//! Each point gets `Σ_v = a1·U_v·U_vᵀ + a2·I`, sampled without a Cholesky
//! factorization as `ε_v = √a1·U_v·s1 + √a2·s2`. The classifier sees
//! `r̃ = r + ε` on a graph rebuilt from `r̃` whose edges carry `φ(‖r̃_v − r̃_u‖)`.
//! Points whose converged `Σ_v` has a small determinant are the ones whose
//! location mattered.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{LriError, Result};
use crate::graph::SpatialGraph;
use crate::linalg::{sigma_from_factors, sym_eigen, symmetrize};

/// Bounds applied to the softplus outputs `a1`, `a2`.
pub const SCALE_MIN: f64 = 1e-6;
pub const SCALE_MAX: f64 = 1e6;

/// Covariance factors of one point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCovariance {
    /// `D×D`, row-major.
    pub u: Vec<f64>,
    pub a1: f64,
    pub a2: f64,
    pub dim: usize,
}

impl PointCovariance {
    pub fn sigma(&self) -> Vec<f64> {
        sigma_from_factors(&self.u, self.a1, self.a2, self.dim)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianInterpretation {
    pub points: Vec<PointCovariance>,
    /// `−ln det Σ_v`.
    pub scores: Vec<f64>,
}

impl GaussianInterpretation {
    pub fn from_points(points: Vec<PointCovariance>) -> Self {
        let sigmas: Vec<Vec<f64>> = points.iter().map(PointCovariance::sigma).collect();
        let dim = points.first().map_or(0, |p| p.dim);
        let scores = rank_location(&sigmas, dim);
        GaussianInterpretation { points, scores }
    }

    pub fn sigmas(&self) -> Vec<Vec<f64>> {
        self.points.iter().map(PointCovariance::sigma).collect()
    }
}

/// `ε = √a1·U·s1 + √a2·s2`.
pub fn sample_perturbation(u: &[f64], a1: f64, a2: f64, s1: &[f64], s2: &[f64]) -> Vec<f64> {
    let d = s1.len();
    (0..d)
        .map(|j| a1.sqrt() * (0..d).map(|k| u[j * d + k] * s1[k]).sum::<f64>() + a2.sqrt() * s2[j])
        .collect()
}

/// Batched reparameterized draw on the tape: `u` is `n×D²`, `a1`, `a2` are
/// `n×1`, `s1`, `s2` are `n×D` constants.
pub fn perturbation_on_tape(tape: &mut Tape, u: Var, a1: Var, a2: Var, s1: Var, s2: Var) -> Var {
    let us = tape.row_mat_vec(u, s1);
    let r1 = tape.sqrt(a1);
    let t1 = tape.mul_col(us, r1);
    let r2 = tape.sqrt(a2);
    let t2 = tape.mul_col(s2, r2);
    tape.add(t1, t2)
}

/// `KL(N(0, Σ) ‖ N(0, σI))` in closed form.
pub fn gauss_kl(sigma: &[f64], d: usize, prior: f64) -> Result<f64> {
    if !(prior > 0.0) {
        return Err(LriError::Numeric(format!("prior scale must be positive, got {prior}")));
    }
    let (vals, _) = sym_eigen(sigma, d);
    if vals.iter().any(|&v| !(v > 0.0)) {
        return Err(LriError::Numeric(format!("covariance is not positive definite (eigenvalues {vals:?})")));
    }
    let trace: f64 = (0..d).map(|k| sigma[k * d + k]).sum();
    let logdet: f64 = vals.iter().map(|v| v.ln()).sum();
    Ok(0.5 * (trace / prior - d as f64 - logdet + d as f64 * prior.ln()))
}

/// `−ln det Σ_v` per point; higher means more important.
pub fn rank_location(sigmas: &[Vec<f64>], d: usize) -> Vec<f64> {
    sigmas.iter().map(|s| -sym_eigen(&symmetrize(s, d), d).0.iter().map(|v| v.ln()).sum::<f64>()).collect()
}

/// `Σ'_v` = the `Σ_u`, `u ∈ N(v) ∪ {v}`, with the largest determinant.
pub fn neighborhood_smooth_gaussian(sigmas: &[Vec<f64>], d: usize, graph: &SpatialGraph) -> Vec<Vec<f64>> {
    let logdet: Vec<f64> = rank_location(sigmas, d).into_iter().map(|s| -s).collect();
    let mut best: Vec<usize> = (0..sigmas.len()).collect();
    for (&u, &v) in graph.src.iter().zip(graph.dst.iter()) {
        if logdet[u] > logdet[best[v]] {
            best[v] = u;
        }
    }
    best.into_iter().map(|b| sigmas[b].clone()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    use crate::tensor::Mat;

    #[test]
    fn sigma_identities() {
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let s = sigma_from_factors(&eye, 2.0, 1.0, 3);
        assert_eq!(s, vec![3.0, 0.0, 0.0, 0.0, 3.0, 0.0, 0.0, 0.0, 3.0]);
        assert!((rank_location(&[s], 3)[0] + 3.0 * 3f64.ln()).abs() < 1e-12);
        let s = sigma_from_factors(&[0.0; 9], 5.0, 1.0, 3);
        assert_eq!(s, eye);
    }

    #[test]
    fn identity_path_perturbation() {
        assert_eq!(sample_perturbation(&[0.0; 9], 1.0, 1.0, &[0.3, 0.1, 0.2], &[1.0, 2.0, 3.0]), vec![1.0, 2.0, 3.0]);
    }

    #[test]
    fn kl_values() {
        let eye = [1.0, 0.0, 0.0, 1.0];
        assert!(gauss_kl(&eye, 2, 1.0).unwrap().abs() < 1e-15);
        let two = [2.0, 0.0, 0.0, 2.0];
        assert!(gauss_kl(&two, 2, 2.0).unwrap().abs() < 1e-15);
        let d = [2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert!((gauss_kl(&d, 3, 1.0).unwrap() - 0.153426).abs() < 1e-6);
        assert!(gauss_kl(&[1.0, 0.0, 0.0, -1.0], 2, 1.0).is_err());
    }

    #[test]
    fn location_ranking() {
        let s = rank_location(&[vec![1.0, 0.0, 0.0, 1.0], vec![4.0, 0.0, 0.0, 4.0]], 2);
        assert!(s[0] > s[1]);
        let inv_det = |sc: f64| sc.exp();
        assert!(inv_det(s[0]) > inv_det(s[1]));
    }

    #[test]
    fn smoothing_star() {
        let star = SpatialGraph {
            n: 3,
            src: Arc::new(vec![1, 2, 0, 0]),
            dst: Arc::new(vec![0, 0, 1, 2]),
            features: Mat::zeros(4, 3),
            weights: vec![1.0; 4],
            k_used: 2,
        };
        let small = vec![1.0, 0.0, 0.0, 1.0];
        let big = vec![4.0, 0.0, 0.0, 4.0];
        let out = neighborhood_smooth_gaussian(&[small.clone(), big.clone(), small.clone()], 2, &star);
        assert_eq!(out[0], big);
        assert_eq!(out[1], big);
        assert_eq!(out[2], small);
        let same = neighborhood_smooth_gaussian(&[small.clone(), small.clone(), small.clone()], 2, &star);
        assert!(same.iter().all(|s| *s == small));
    }
}
