//! Exact k-nn and radius graphs, plus the distance-weighted soft graph that
//! makes graph reconstruction from perturbed coordinates differentiable.
//!
//! Edges are directed `u → v` for `u ∈ N(v)` and stored grouped by the
//! receiver `v`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{data_err, Result};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq)]
pub struct SpatialGraph {
    pub n: usize,
    /// Sender of each edge.
    pub src: Arc<Vec<usize>>,
    /// Receiver of each edge.
    pub dst: Arc<Vec<usize>>,
    /// `E × (1 + D)`: distance then unit displacement `(r_v − r_u)/‖r_v − r_u‖`.
    pub features: Mat,
    pub weights: Vec<f64>,
    pub k_used: usize,
}

impl SpatialGraph {
    pub fn num_edges(&self) -> usize {
        self.src.len()
    }

    /// Senders of all edges arriving at `v`.
    pub fn neighbors(&self, v: usize) -> Vec<usize> {
        self.src.iter().zip(self.dst.iter()).filter(|(_, &d)| d == v).map(|(&s, _)| s).collect()
    }

    pub fn in_degree(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &d in self.dst.iter() {
            deg[d] += 1;
        }
        deg
    }

    fn from_edges(coords: &Mat, src: Vec<usize>, dst: Vec<usize>, k_used: usize) -> Self {
        let features = edge_features(coords, &src, &dst);
        let weights = vec![1.0; src.len()];
        SpatialGraph { n: coords.rows, src: Arc::new(src), dst: Arc::new(dst), features, weights, k_used }
    }
}

/// `[‖r_v − r_u‖, (r_v − r_u)/‖r_v − r_u‖]` per edge, zero displacement for
/// coincident points.
pub fn edge_features(coords: &Mat, src: &[usize], dst: &[usize]) -> Mat {
    let d = coords.cols;
    let mut out = Mat::zeros(src.len(), 1 + d);
    for (e, (&u, &v)) in src.iter().zip(dst).enumerate() {
        let (ru, rv) = (coords.row(u), coords.row(v));
        let dist = dist(ru, rv);
        let row = out.row_mut(e);
        row[0] = dist;
        if dist > 0.0 {
            for k in 0..d {
                row[1 + k] = (rv[k] - ru[k]) / dist;
            }
        }
    }
    out
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
fn dist(a: &[f64], b: &[f64]) -> f64 {
    dist2(a, b).sqrt()
}

fn check_coords(coords: &Mat) -> Result<()> {
    if coords.rows == 0 {
        return data_err("graph construction needs at least one point");
    }
    if !coords.is_finite() {
        return data_err("coordinates contain non-finite values");
    }
    Ok(())
}

/// The `k` nearest other points of every point, ties broken by smaller index.
fn knn_lists(coords: &Mat, k: usize) -> (Vec<usize>, Vec<usize>) {
    let n = coords.rows;
    let kk = k.min(n.saturating_sub(1));
    let mut src = Vec::with_capacity(n * kk);
    let mut dst = Vec::with_capacity(n * kk);
    let mut cand: Vec<(f64, usize)> = Vec::with_capacity(n);
    for v in 0..n {
        cand.clear();
        let rv = coords.row(v);
        cand.extend((0..n).filter(|&u| u != v).map(|u| (dist2(rv, coords.row(u)), u)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if kk < cand.len() {
            cand.select_nth_unstable_by(kk, cmp);
            cand.truncate(kk);
        }
        cand.sort_by(cmp);
        for &(_, u) in &cand {
            src.push(u);
            dst.push(v);
        }
    }
    (src, dst)
}

pub fn build_knn(coords: &Mat, k: usize) -> Result<SpatialGraph> {
    check_coords(coords)?;
    if k == 0 {
        return data_err("k must be at least 1");
    }
    let (src, dst) = knn_lists(coords, k);
    Ok(SpatialGraph::from_edges(coords, src, dst, k))
}

/// Edge `(u, v)` iff `0 < ‖r_v − r_u‖ < radius`.
pub fn build_radius_graph(coords: &Mat, radius: f64) -> Result<SpatialGraph> {
    check_coords(coords)?;
    if !(radius > 0.0) {
        return data_err(format!("radius must be positive, got {radius}"));
    }
    let n = coords.rows;
    let (mut src, mut dst) = (Vec::new(), Vec::new());
    for v in 0..n {
        for u in 0..n {
            let d = dist(coords.row(u), coords.row(v));
            if u != v && d > 0.0 && d < radius {
                src.push(u);
                dst.push(v);
            }
        }
    }
    Ok(SpatialGraph::from_edges(coords, src, dst, 0))
}

/// Neighbor budget of the soft graph: `ceil(expansion·k)`.
pub fn expanded_k(k: usize, expansion: f64) -> usize {
    ((k as f64) * expansion - 1e-9).ceil().max(1.0) as usize
}

/// Monotone edge-weight function `φ(d) ∈ (0, 1)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum EdgeWeightFn {
    /// `exp(−d²/(2ℓ²))`.
    Analytic { length_scale: f64 },
    /// `sigmoid(w2ᵀ·relu(w1·d + b1) + b2)`.
    Learned { w1: Vec<f64>, b1: Vec<f64>, w2: Vec<f64>, b2: f64 },
}

impl EdgeWeightFn {
    pub fn eval(&self, d: f64) -> f64 {
        match self {
            EdgeWeightFn::Analytic { length_scale } => (-d * d / (2.0 * length_scale * length_scale)).exp(),
            EdgeWeightFn::Learned { w1, b1, w2, b2 } => {
                let h: f64 = w1.iter().zip(b1).zip(w2).map(|((a, b), c)| c * (a * d + b).max(0.0)).sum();
                crate::autodiff::sigmoid(h + b2)
            }
        }
    }

    /// Applies `φ` to an `E×1` column of distances on the tape.
    pub fn on_tape(&self, tape: &mut Tape, dist: Var) -> Var {
        match self {
            EdgeWeightFn::Analytic { length_scale } => {
                let sq = tape.mul(dist, dist);
                let s = tape.scale(sq, -1.0 / (2.0 * length_scale * length_scale));
                tape.exp(s)
            }
            EdgeWeightFn::Learned { w1, b1, w2, b2 } => {
                let h = w1.len();
                let w1v = tape.constant(Mat::from_vec(1, h, w1.clone()));
                let b1v = tape.constant(Mat::from_vec(1, h, b1.clone()));
                let w2v = tape.constant(Mat::from_vec(h, 1, w2.clone()));
                let b2v = tape.constant(Mat::scalar(*b2));
                learned_phi(tape, dist, w1v, b1v, w2v, b2v)
            }
        }
    }
}

/// Small learned `φ` on the tape, with its parameters as tape variables.
pub fn learned_phi(tape: &mut Tape, dist: Var, w1: Var, b1: Var, w2: Var, b2: Var) -> Var {
    let h = tape.matmul(dist, w1);
    let h = tape.add_row(h, b1);
    let h = tape.relu(h);
    let o = tape.matmul(h, w2);
    let o = tape.add_row(o, b2);
    tape.sigmoid(o)
}

/// Soft-graph topology: the `ceil(expansion·k)` nearest points by perturbed
/// distance. Weights and features are attached by the caller (on the tape
/// during training) or by [`build_soft_graph`].
pub fn soft_topology(coords: &Mat, k: usize, expansion: f64) -> Result<(Vec<usize>, Vec<usize>)> {
    check_coords(coords)?;
    if k == 0 {
        return data_err("k must be at least 1");
    }
    if !(expansion >= 1.0) {
        return data_err(format!("expansion factor must be at least 1, got {expansion}"));
    }
    Ok(knn_lists(coords, expanded_k(k, expansion)))
}

pub fn build_soft_graph(coords: &Mat, k: usize, expansion: f64, phi: &EdgeWeightFn) -> Result<SpatialGraph> {
    let (src, dst) = soft_topology(coords, k, expansion)?;
    let mut g = SpatialGraph::from_edges(coords, src, dst, expanded_k(k, expansion));
    g.weights = (0..g.num_edges()).map(|e| phi.eval(g.features.get(e, 0))).collect();
    Ok(g)
}

/// Median k-nn edge length over a collection of clouds; the default `ℓ` of
/// the analytic `φ`.
pub fn median_knn_distance<'a>(clouds: impl IntoIterator<Item = &'a Mat>, k: usize) -> Result<f64> {
    let mut d = Vec::new();
    for c in clouds {
        let g = build_knn(c, k)?;
        d.extend((0..g.num_edges()).map(|e| g.features.get(e, 0)));
    }
    if d.is_empty() {
        return data_err("no edges to take a median over");
    }
    d.sort_by(f64::total_cmp);
    Ok(d[d.len() / 2])
}

/// Edge weights of the soft graph (topology frozen) as a function of the
/// coordinates, evaluated on a tape.
fn soft_weights_on_tape(tape: &mut Tape, coords: Var, src: &Arc<Vec<usize>>, dst: &Arc<Vec<usize>>, phi: &EdgeWeightFn) -> Var {
    let ef = tape.edge_geom(coords, src.clone(), dst.clone());
    let d = tape.slice_cols(ef, 0, 1);
    phi.on_tape(tape, d)
}

/// Largest relative discrepancy between the analytic Jacobian of all soft
/// edge weights with respect to the coordinates and central finite
/// differences (step `1e-5`). Coincident points are excluded.
pub fn edge_feature_gradcheck(coords: &Mat, k: usize, expansion: f64, phi: &EdgeWeightFn) -> Result<f64> {
    let (src, dst) = soft_topology(coords, k, expansion)?;
    let keep: Vec<usize> = (0..src.len()).filter(|&e| dist(coords.row(src[e]), coords.row(dst[e])) > 1e-9).collect();
    let src = Arc::new(keep.iter().map(|&e| src[e]).collect::<Vec<_>>());
    let dst = Arc::new(keep.iter().map(|&e| dst[e]).collect::<Vec<_>>());
    let step = 1e-5;
    let mut worst: f64 = 0.0;
    for e in 0..src.len() {
        let mut tape = Tape::new();
        let c = tape.leaf(coords.clone());
        let w = soft_weights_on_tape(&mut tape, c, &src, &dst, phi);
        let pick = tape.constant(Mat::column((0..src.len()).map(|i| if i == e { 1.0 } else { 0.0 }).collect()));
        let sel = tape.mul(w, pick);
        let out = tape.sum_all(sel);
        let grad = tape.backward(out).get_or_zeros(c, coords.rows, coords.cols);
        for i in 0..coords.data.len() {
            let eval = |delta: f64| {
                let mut m = coords.clone();
                m.data[i] += delta;
                let feat = edge_features(&m, &src[e..e + 1], &dst[e..e + 1]);
                phi.eval(feat.get(0, 0))
            };
            let num = (eval(step) - eval(-step)) / (2.0 * step);
            worst = worst.max(relative_error(grad.data[i], num));
        }
    }
    Ok(worst)
}

/// `|a − b| / (max(|a|, |b|) + 1e-6)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / (a.abs().max(b.abs()) + 1e-6)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[f64]) -> Mat {
        Mat::from_rows(&xs.iter().map(|&x| vec![x, 0.0]).collect::<Vec<_>>())
    }

    #[test]
    fn knn_hand_example() {
        let g = build_knn(&line(&[0.0, 1.0, 3.0]), 1).unwrap();
        assert_eq!(g.neighbors(0), vec![1]);
        assert_eq!(g.neighbors(1), vec![0]);
        assert_eq!(g.neighbors(2), vec![1]);
    }

    #[test]
    fn knn_two_points_any_k() {
        let g = build_knn(&line(&[0.0, 5.0]), 7).unwrap();
        assert_eq!(g.neighbors(0), vec![1]);
        assert_eq!(g.neighbors(1), vec![0]);
        assert!(g.in_degree().iter().all(|&d| d == 1));
    }

    #[test]
    fn knn_ties_prefer_smaller_index() {
        let g = build_knn(&line(&[-1.0, 0.0, 1.0]), 1).unwrap();
        assert_eq!(g.neighbors(1), vec![0]);
    }

    #[test]
    fn coincident_points_have_zero_displacement() {
        let g = build_knn(&line(&[2.0, 2.0, 9.0]), 1).unwrap();
        let e = (0..g.num_edges()).find(|&e| g.dst[e] == 0).unwrap();
        assert_eq!(g.features.row(e), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn knn_rejects_empty() {
        assert!(build_knn(&Mat::zeros(0, 3), 3).is_err());
    }

    #[test]
    fn radius_examples() {
        let g = build_radius_graph(&line(&[0.0, 0.5, 2.0]), 1.0).unwrap();
        assert_eq!(g.num_edges(), 2);
        assert_eq!(g.neighbors(0), vec![1]);
        assert_eq!(g.neighbors(1), vec![0]);
        let g = build_radius_graph(&line(&[0.0, 0.5, 2.0]), 100.0).unwrap();
        assert_eq!(g.num_edges(), 6);
        let g = build_radius_graph(&line(&[0.0, 0.5, 2.0]), 0.1).unwrap();
        assert_eq!(g.num_edges(), 0);
    }

    #[test]
    fn soft_graph_expands_neighborhood() {
        let c = line(&[0.0, 1.0, 2.5, 4.0, 7.0]);
        let phi = EdgeWeightFn::Analytic { length_scale: 1.0 };
        let g = build_soft_graph(&c, 2, 1.5, &phi).unwrap();
        assert!(g.in_degree().iter().all(|&d| d == 3));
        assert_eq!(g.k_used, 3);
    }

    #[test]
    fn analytic_phi_limits() {
        let ell = 0.7;
        let phi = EdgeWeightFn::Analytic { length_scale: ell };
        let d = ell * (2.0 * std::f64::consts::LN_2).sqrt();
        assert!((phi.eval(d) - 0.5).abs() < 1e-12);
        let wide = EdgeWeightFn::Analytic { length_scale: 1e12 };
        assert!((wide.eval(3.0) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn gradcheck_flat_region() {
        let c = Mat::from_rows(&[vec![0.0, 0.0], vec![10.0, 0.0], vec![0.0, 10.0], vec![10.0, 10.0]]);
        let phi = EdgeWeightFn::Analytic { length_scale: 0.01 };
        assert!(edge_feature_gradcheck(&c, 2, 1.0, &phi).unwrap() <= 1e-4);
    }

    #[test]
    fn gradcheck_skips_duplicates() {
        let c = Mat::from_rows(&[vec![0.0, 0.0], vec![0.0, 0.0], vec![1.0, 0.3], vec![0.2, 1.1]]);
        let phi = EdgeWeightFn::Analytic { length_scale: 1.0 };
        assert!(edge_feature_gradcheck(&c, 2, 1.0, &phi).unwrap() <= 1e-4);
    }
}
