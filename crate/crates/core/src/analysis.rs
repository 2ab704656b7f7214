//! Fine-grained reading of converged covariances: the in-plane principal
//! axis estimates the local track direction and the axis-length ratio
//! tracks curvature, hence field strength.

use serde::{Deserialize, Serialize};

use crate::error::{data_err, LriError, Result};

/// Relative eigen-gap below which a 2×2 covariance counts as isotropic.
pub const DEGENERATE_GAP: f64 = 1e-6;

/// Leading `2×2` (x-y) block of a row-major `D×D` matrix.
pub fn in_plane(sigma: &[f64], d: usize) -> [f64; 4] {
    assert!(d >= 2 && sigma.len() == d * d, "need a D×D matrix with D ≥ 2");
    [sigma[0], sigma[1], sigma[d], sigma[d + 1]]
}

/// Eigenvalues `λ1 ≥ λ2` of a symmetric `2×2` matrix.
pub fn eigenvalues2(s: &[f64; 4]) -> (f64, f64) {
    let (a, b, c) = (s[0], 0.5 * (s[1] + s[2]), s[3]);
    let mid = 0.5 * (a + c);
    let rad = (0.25 * (a - c) * (a - c) + b * b).sqrt();
    (mid + rad, mid - rad)
}

fn check_spd(s: &[f64; 4]) -> Result<(f64, f64)> {
    let (l1, l2) = eigenvalues2(s);
    if !(l2 > 0.0) || !l1.is_finite() {
        return Err(LriError::Numeric(format!("in-plane covariance is not positive definite (eigenvalues {l1}, {l2})")));
    }
    Ok((l1, l2))
}

/// Unit eigenvector of the largest eigenvalue with a nonnegative first
/// nonzero component; `None` when the matrix is isotropic.
pub fn principal_direction(s: &[f64; 4]) -> Result<Option<[f64; 2]>> {
    let (l1, l2) = check_spd(s)?;
    if (l1 - l2) <= DEGENERATE_GAP * l1 {
        return Ok(None);
    }
    let (a, b, c) = (s[0], 0.5 * (s[1] + s[2]), s[3]);
    // both rows of (Σ − λ1 I) annihilate e1; use the better conditioned one
    let v = if (l1 - c).abs() + b.abs() >= (l1 - a).abs() + b.abs() { [l1 - c, b] } else { [b, l1 - a] };
    let norm = v[0].hypot(v[1]);
    let mut e = [v[0] / norm, v[1] / norm];
    if e[0] < 0.0 || (e[0] == 0.0 && e[1] < 0.0) {
        e = [-e[0], -e[1]];
    }
    Ok(Some(e))
}

/// Angle in degrees between two directions, folded to `[0, 90]`.
pub fn angle_to_velocity(e1: [f64; 2], v: [f64; 2]) -> f64 {
    let dot = (e1[0] * v[0] + e1[1] * v[1]).abs().min(1.0);
    dot.acos().to_degrees()
}

/// `√(λ1/λ2)`.
pub fn eigen_ratio(s: &[f64; 4]) -> Result<f64> {
    let (l1, l2) = check_spd(s)?;
    Ok((l1 / l2).sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EllipseSummary {
    pub sigma2: [f64; 4],
    pub lambda1: f64,
    pub lambda2: f64,
    pub e1: Option<[f64; 2]>,
    pub eigen_ratio: f64,
}

pub fn ellipse(sigma: &[f64], d: usize) -> Result<EllipseSummary> {
    let s = in_plane(sigma, d);
    let (lambda1, lambda2) = check_spd(&s)?;
    Ok(EllipseSummary { sigma2: s, lambda1, lambda2, e1: principal_direction(&s)?, eigen_ratio: (lambda1 / lambda2).sqrt() })
}

/// Least-squares line `ρ̄ = slope·B + intercept` with Pearson correlation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FieldFit {
    pub slope: f64,
    pub intercept: f64,
    pub r: f64,
}

pub fn field_strength_fit(table: &[(f64, f64)]) -> Result<FieldFit> {
    let mut bs: Vec<f64> = table.iter().map(|t| t.0).collect();
    bs.sort_by(f64::total_cmp);
    bs.dedup();
    if bs.len() < 3 {
        return data_err(format!("field fit needs at least 3 distinct field strengths, got {}", bs.len()));
    }
    if table.iter().any(|t| !t.0.is_finite() || !t.1.is_finite()) {
        return data_err("field fit inputs must be finite");
    }
    let n = table.len() as f64;
    let mx = table.iter().map(|t| t.0).sum::<f64>() / n;
    let my = table.iter().map(|t| t.1).sum::<f64>() / n;
    let sxx: f64 = table.iter().map(|t| (t.0 - mx) * (t.0 - mx)).sum();
    let syy: f64 = table.iter().map(|t| (t.1 - my) * (t.1 - my)).sum();
    let sxy: f64 = table.iter().map(|t| (t.0 - mx) * (t.1 - my)).sum();
    if syy == 0.0 {
        return data_err("eigen-ratios have zero variance; correlation undefined");
    }
    let slope = sxy / sxx;
    Ok(FieldFit { slope, intercept: my - slope * mx, r: sxy / (sxx * syy).sqrt() })
}

/// One row of the fine-grained report.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineGrainedRow {
    pub method: String,
    pub b: f64,
    pub mean_angle_deg: f64,
    pub std_angle_deg: f64,
    pub mean_eigen_ratio: Option<f64>,
    pub n_points_used: usize,
    pub n_degenerate: usize,
}

/// Accumulates angle and eigen-ratio statistics over points.
#[derive(Clone, Debug, Default)]
pub struct DirectionStats {
    pub angles: Vec<f64>,
    pub ratios: Vec<f64>,
    pub n_degenerate: usize,
}

impl DirectionStats {
    /// Adds one point with an estimated axis (if any) and its true velocity.
    pub fn push(&mut self, e1: Option<[f64; 2]>, velocity: &[f64], ratio: Option<f64>) {
        let Some(e1) = e1 else {
            self.n_degenerate += 1;
            return;
        };
        let norm = velocity[0].hypot(velocity[1]);
        if norm == 0.0 {
            self.n_degenerate += 1;
            return;
        }
        self.angles.push(angle_to_velocity(e1, [velocity[0] / norm, velocity[1] / norm]));
        if let Some(r) = ratio {
            self.ratios.push(r);
        }
    }

    pub fn row(&self, method: &str, b: f64) -> FineGrainedRow {
        let n = self.angles.len() as f64;
        let mean = self.angles.iter().sum::<f64>() / n;
        let var = self.angles.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        FineGrainedRow {
            method: method.into(),
            b,
            mean_angle_deg: mean,
            std_angle_deg: var.sqrt(),
            mean_eigen_ratio: (!self.ratios.is_empty()).then(|| self.ratios.iter().sum::<f64>() / self.ratios.len() as f64),
            n_points_used: self.angles.len(),
            n_degenerate: self.n_degenerate,
        }
    }
}

pub fn fine_grained_csv(rows: &[FineGrainedRow]) -> String {
    let mut out = String::from("method,B,mean_angle_deg,std_angle_deg,mean_eigen_ratio,n_points_used,n_degenerate\n");
    for r in rows {
        let ratio = r.mean_eigen_ratio.map_or(String::new(), |v| format!("{v:.6}"));
        out.push_str(&format!(
            "{},{},{:.4},{:.4},{},{},{}\n",
            r.method, r.b, r.mean_angle_deg, r.std_angle_deg, ratio, r.n_points_used, r.n_degenerate
        ));
    }
    out
}
