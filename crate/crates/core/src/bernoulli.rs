//! LRI-Bernoulli: existence importance through learned keep probabilities.
//!
//! The interpreter maps each point embedding to `p_v`, a relaxed Bernoulli
//! mask `m_v` is drawn with the binary-concrete reparameterization, and the
//! classifier sees the cloud with every message and pooled contribution of
//! `v` scaled by `m_v`. The objective is cross-entropy plus
//! `β · mean_v KL(Bern(p_v) ‖ Bern(α))`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Tape, Var};
use crate::error::{data_err, Result};
use crate::graph::SpatialGraph;
use crate::tensor::Mat;

pub const P_CLAMP: f64 = 1e-6;

/// Keep probabilities and the masks sampled from them for one cloud.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BernoulliInterpretation {
    pub p: Vec<f64>,
    pub m: Vec<f64>,
    pub alpha: f64,
    pub tau: f64,
}

#[inline]
fn logit(x: f64) -> f64 {
    (x / (1.0 - x)).ln()
}

/// `sigmoid((logit(p) + logit(u)) / τ)`.
pub fn sample_mask(p: &[f64], tau: f64, u: &[f64]) -> Vec<f64> {
    p.iter().zip(u).map(|(&p, &u)| sigmoid((logit(p) + logit(u)) / tau)).collect()
}

/// `∂m/∂p` of [`sample_mask`] at fixed `u`.
pub fn mask_grad(p: f64, tau: f64, u: f64) -> f64 {
    let m = sigmoid((logit(p) + logit(u)) / tau);
    m * (1.0 - m) / tau / (p * (1.0 - p))
}

/// Relaxed mask on the tape; `p` is `n×1` and `u` a constant of uniforms.
pub fn sample_mask_on_tape(tape: &mut Tape, p: Var, tau: f64, u: &[f64]) -> Var {
    let lp = tape.ln(p);
    let neg = tape.scale(p, -1.0);
    let one_minus = tape.add_scalar(neg, 1.0);
    let lq = tape.ln(one_minus);
    let lo = tape.sub(lp, lq);
    let noise = tape.constant(Mat::column(u.iter().map(|&u| logit(u)).collect()));
    let s = tape.add(lo, noise);
    let s = tape.scale(s, 1.0 / tau);
    tape.sigmoid(s)
}

/// `KL(Bern(p) ‖ Bern(α))`.
pub fn bern_kl(p: f64, alpha: f64) -> Result<f64> {
    let open = |x: f64| x > 0.0 && x < 1.0;
    if !open(p) || !open(alpha) {
        return data_err(format!("Bernoulli parameters must lie in (0,1), got p={p}, alpha={alpha}"));
    }
    Ok(p * (p / alpha).ln() + (1.0 - p) * ((1.0 - p) / (1.0 - alpha)).ln())
}

/// Per-point `KL(Bern(p_v) ‖ Bern(α))` as an `n×1` tape node.
pub fn bern_kl_on_tape(tape: &mut Tape, p: Var, alpha: f64) -> Var {
    let lp = tape.ln(p);
    let a = tape.add_scalar(lp, -alpha.ln());
    let t1 = tape.mul(p, a);
    let neg = tape.scale(p, -1.0);
    let q = tape.add_scalar(neg, 1.0);
    let lq = tape.ln(q);
    let b = tape.add_scalar(lq, -(1.0 - alpha).ln());
    let t2 = tape.mul(q, b);
    tape.add(t1, t2)
}

/// Existence-importance scores: the keep probabilities themselves.
pub fn rank_existence(p: &[f64]) -> Vec<f64> {
    p.to_vec()
}

/// `p'_v = min over u ∈ N(v) ∪ {v} of p_u`.
pub fn neighborhood_smooth_bernoulli(p: &[f64], graph: &SpatialGraph) -> Vec<f64> {
    let mut out = p.to_vec();
    for (&u, &v) in graph.src.iter().zip(graph.dst.iter()) {
        out[v] = out[v].min(p[u]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_knn;

    #[test]
    fn mask_at_midpoint() {
        assert!((sample_mask(&[0.5], 1.0, &[0.5])[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn mask_low_temperature_follows_logit_sign() {
        // ln 9 + ln(0.05/0.95) < 0, so the relaxed mask collapses to 0
        let m = sample_mask(&[0.9], 1e-3, &[0.05])[0];
        assert!(m < 1e-6, "{m}");
        let m = sample_mask(&[0.9], 1e-3, &[0.2])[0];
        assert!(m > 1.0 - 1e-6, "{m}");
    }

    #[test]
    fn mask_gradient_matches_finite_difference() {
        for &(p, tau, u) in &[(0.3, 1.0, 0.7), (0.8, 0.5, 0.1), (0.55, 2.0, 0.45)] {
            let h = 1e-6;
            let num = (sample_mask(&[p + h], tau, &[u])[0] - sample_mask(&[p - h], tau, &[u])[0]) / (2.0 * h);
            assert!((num - mask_grad(p, tau, u)).abs() < 1e-6 * (1.0 + num.abs()));
        }
    }

    #[test]
    fn kl_values() {
        assert_eq!(bern_kl(0.5, 0.5).unwrap(), 0.0);
        assert!((bern_kl(0.9, 0.5).unwrap() - 0.368064).abs() < 1e-6);
        assert!(bern_kl(0.0, 0.5).is_err());
        assert!(bern_kl(0.5, 1.0).is_err());
    }

    #[test]
    fn kl_on_tape_matches_scalar() {
        let mut t = Tape::new();
        let p = t.constant(Mat::column(vec![0.1, 0.5, 0.93]));
        let k = bern_kl_on_tape(&mut t, p, 0.7);
        for (i, &pv) in [0.1, 0.5, 0.93].iter().enumerate() {
            assert!((t.value(k).data[i] - bern_kl(pv, 0.7).unwrap()).abs() < 1e-14);
        }
    }

    #[test]
    fn ranking_order() {
        let s = rank_existence(&[0.9, 0.5, 0.7]);
        let mut idx: Vec<usize> = (0..3).collect();
        idx.sort_by(|&a, &b| s[b].total_cmp(&s[a]));
        assert_eq!(idx, vec![0, 2, 1]);
    }

    #[test]
    fn smoothing_cases() {
        let coords = Mat::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]]);
        let g = build_knn(&coords, 3).unwrap();
        let flat = neighborhood_smooth_bernoulli(&[0.4; 4], &g);
        assert_eq!(flat, vec![0.4; 4]);
        // star: center 0 is in every neighborhood, leaves only near the center
        let star = SpatialGraph {
            n: 4,
            src: std::sync::Arc::new(vec![1, 2, 3, 0, 0, 0]),
            dst: std::sync::Arc::new(vec![0, 0, 0, 1, 2, 3]),
            features: Mat::zeros(6, 3),
            weights: vec![1.0; 6],
            k_used: 3,
        };
        let out = neighborhood_smooth_bernoulli(&[0.9, 0.1, 0.1, 0.1], &star);
        assert_eq!(out[0], 0.1);
        let lonely = SpatialGraph { src: std::sync::Arc::new(vec![]), dst: std::sync::Arc::new(vec![]), features: Mat::zeros(0, 3), weights: vec![], ..star };
        assert_eq!(neighborhood_smooth_bernoulli(&[0.9, 0.1, 0.2, 0.3], &lonely), vec![0.9, 0.1, 0.2, 0.3]);
    }
}
