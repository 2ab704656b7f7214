//! Point clouds, labelled samples and their JSONL encoding.

use serde::{Deserialize, Serialize};

use crate::error::{data_err, LriError, Result};
use crate::tensor::Mat;

/// A set of featured points in 2-D or 3-D space. Coordinates are centered
/// at construction and never mutated afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    x: Mat,
    r: Mat,
    scale_c: f64,
}

fn rms(m: &Mat) -> f64 {
    if m.data.is_empty() {
        return 0.0;
    }
    (m.data.iter().map(|v| v * v).sum::<f64>() / m.data.len() as f64).sqrt()
}

fn column_means(m: &Mat) -> Vec<f64> {
    let mut means = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (s, v) in means.iter_mut().zip(m.row(r)) {
            *s += v;
        }
    }
    means.iter_mut().for_each(|s| *s /= m.rows.max(1) as f64);
    means
}

fn is_centered(r: &Mat) -> bool {
    let tol = 1e-6 * rms(r);
    column_means(r).iter().all(|m| m.abs() <= tol)
}

/// `c·(coords − column mean)`.
pub fn center_and_rescale(coords: &Mat, c: f64) -> Result<Mat> {
    if coords.rows == 0 {
        return data_err("point cloud must contain at least one point");
    }
    if !(c > 0.0 && c.is_finite()) {
        return data_err(format!("rescale constant must be positive and finite, got {c}"));
    }
    if !coords.is_finite() {
        return data_err("coordinates contain non-finite values");
    }
    let means = column_means(coords);
    let mut out = coords.clone();
    for r in 0..out.rows {
        for (v, m) in out.row_mut(r).iter_mut().zip(&means) {
            *v = c * (*v - m);
        }
    }
    Ok(out)
}

/// Returns `c` such that the given percentile (nearest-rank) of the
/// absolute coordinate entries, multiplied by `c`, equals 1.
pub fn choose_rescale_constant<'a>(coords: impl IntoIterator<Item = &'a Mat>, percentile: f64) -> Result<f64> {
    if !(percentile > 0.0 && percentile < 100.0) {
        return data_err(format!("percentile must lie in (0, 100), got {percentile}"));
    }
    let mut abs: Vec<f64> = coords.into_iter().flat_map(|m| m.data.iter().map(|v| v.abs())).collect();
    if abs.iter().any(|v| !v.is_finite()) {
        return data_err("coordinates contain non-finite values");
    }
    let nonzero = abs.iter().any(|&v| v > 0.0);
    if abs.is_empty() || !nonzero {
        return data_err("all-zero coordinates admit no finite rescale constant");
    }
    abs.sort_by(f64::total_cmp);
    let n = abs.len();
    let rank = ((percentile * n as f64) / 100.0 - 1e-9).ceil().clamp(1.0, n as f64) as usize;
    let v = abs[rank - 1];
    if v <= 0.0 {
        return data_err(format!("the {percentile}th percentile of |r| is zero"));
    }
    Ok(1.0 / v)
}

impl PointCloud {
    /// Builds a cloud, centering `r` and multiplying it by `scale_c`.
    /// Missing features become a single all-ones column.
    pub fn new(x: Option<Mat>, r: Mat, scale_c: f64) -> Result<Self> {
        let r = center_and_rescale(&r, scale_c)?;
        Self::assemble(x, r, scale_c)
    }

    /// Builds a cloud from coordinates that are already centered and scaled.
    /// Coordinates that fail the centering check are centered here.
    pub fn from_centered(x: Option<Mat>, r: Mat, scale_c: f64) -> Result<Self> {
        if r.rows == 0 {
            return data_err("point cloud must contain at least one point");
        }
        if !r.is_finite() {
            return data_err("coordinates contain non-finite values");
        }
        let r = if is_centered(&r) { r } else { center_and_rescale(&r, 1.0)? };
        Self::assemble(x, r, scale_c)
    }

    fn assemble(x: Option<Mat>, r: Mat, scale_c: f64) -> Result<Self> {
        let n = r.rows;
        if !(r.cols == 2 || r.cols == 3) {
            return data_err(format!("coordinates must be 2-D or 3-D, got {} columns", r.cols));
        }
        if !(scale_c > 0.0 && scale_c.is_finite()) {
            return data_err(format!("rescale constant must be positive, got {scale_c}"));
        }
        let x = match x {
            Some(x) if x.cols > 0 => x,
            _ => Mat::filled(n, 1, 1.0),
        };
        if x.rows != n {
            return data_err(format!("feature rows {} differ from point count {n}", x.rows));
        }
        if !x.is_finite() {
            return data_err("features contain non-finite values");
        }
        Ok(PointCloud { x, r, scale_c })
    }

    pub fn n(&self) -> usize {
        self.r.rows
    }

    pub fn dim(&self) -> usize {
        self.r.cols
    }

    pub fn feature_dim(&self) -> usize {
        self.x.cols
    }

    pub fn features(&self) -> &Mat {
        &self.x
    }

    pub fn coords(&self) -> &Mat {
        &self.r
    }

    pub fn scale_c(&self) -> f64 {
        self.scale_c
    }

    /// A copy whose coordinates are multiplied by `c` (composing with any
    /// earlier rescale).
    pub fn rescaled(&self, c: f64) -> Result<Self> {
        let r = center_and_rescale(&self.r, c)?;
        Ok(PointCloud { x: self.x.clone(), r, scale_c: self.scale_c * c })
    }

    /// Reorders the points: row `i` of the result is row `perm[i]` here.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        PointCloud { x: self.x.select_rows(perm), r: self.r.select_rows(perm), scale_c: self.scale_c }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub cloud: PointCloud,
    pub y: u8,
    pub interp: Option<Vec<u8>>,
    pub velocity: Option<Mat>,
    pub b_field: Option<f64>,
}

impl Sample {
    pub fn new(id: impl Into<String>, cloud: PointCloud, y: u8) -> Self {
        Sample { id: id.into(), cloud, y, interp: None, velocity: None, b_field: None }
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.cloud.n();
        if self.y > 1 {
            return data_err(format!("label must be 0 or 1, got {}", self.y));
        }
        if let Some(interp) = &self.interp {
            if interp.len() != n {
                return data_err(format!("interp has {} entries for {n} points", interp.len()));
            }
            if interp.iter().any(|&v| v > 1) {
                return data_err("interp entries must be 0 or 1");
            }
            if self.y == 1 && !interp.iter().any(|&v| v == 1) {
                return data_err("positive sample marks no important point");
            }
        }
        if let Some(v) = &self.velocity {
            if v.shape() != (n, self.cloud.dim()) {
                return data_err(format!("velocity shape {:?} does not match {n}x{}", v.shape(), self.cloud.dim()));
            }
            for r in 0..n {
                let norm = v.row(r).iter().map(|x| x * x).sum::<f64>().sqrt();
                if (norm - 1.0).abs() > 1e-6 {
                    return data_err(format!("velocity of point {r} has norm {norm}, expected 1"));
                }
            }
        }
        if let Some(b) = self.b_field {
            if !(b > 0.0 && b.is_finite()) {
                return data_err(format!("field strength must be positive, got {b}"));
            }
        }
        Ok(())
    }

    /// Ground-truth mask, or all zeros when the sample carries none.
    pub fn interp_or_zeros(&self) -> Vec<u8> {
        self.interp.clone().unwrap_or_else(|| vec![0; self.cloud.n()])
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    id: String,
    y: u8,
    x: Vec<Vec<f64>>,
    r: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    interp: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    velocity: Option<Vec<Vec<f64>>>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    b: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    c: Option<f64>,
}

fn rows_to_mat(rows: Vec<Vec<f64>>, what: &str) -> Result<Mat> {
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != c) {
        return data_err(format!("ragged rows in \"{what}\""));
    }
    Ok(Mat::from_vec(rows.len(), c, rows.into_iter().flatten().collect()))
}

/// One JSON object on a single line.
pub fn serialize_sample(s: &Sample) -> String {
    let rec = SampleRecord {
        id: s.id.clone(),
        y: s.y,
        x: s.cloud.x.to_rows(),
        r: s.cloud.r.to_rows(),
        interp: s.interp.clone(),
        velocity: s.velocity.as_ref().map(Mat::to_rows),
        b: s.b_field,
        c: (s.cloud.scale_c != 1.0).then_some(s.cloud.scale_c),
    };
    serde_json::to_string(&rec).expect("sample records always serialize")
}

pub fn deserialize_sample(line: &str) -> Result<Sample> {
    let rec: SampleRecord = serde_json::from_str(line).map_err(|e| LriError::Parse { line: 1, msg: e.to_string() })?;
    let n = rec.r.len();
    let x = rows_to_mat(rec.x, "x")?;
    if x.rows != n {
        return data_err(format!("\"x\" has {} rows for {n} points", x.rows));
    }
    let r = rows_to_mat(rec.r, "r")?;
    let cloud = PointCloud::from_centered(Some(x), r, rec.c.unwrap_or(1.0))?;
    let velocity = rec.velocity.map(|v| rows_to_mat(v, "velocity")).transpose()?;
    let s = Sample { id: rec.id, cloud, y: rec.y, interp: rec.interp, velocity, b_field: rec.b };
    s.validate()?;
    Ok(s)
}

pub fn write_dataset<W: std::io::Write>(mut w: W, samples: &[Sample]) -> Result<()> {
    for s in samples {
        writeln!(w, "{}", serialize_sample(s))?;
    }
    Ok(())
}

/// Parses a JSONL dataset; errors carry the 1-based line number.
pub fn read_dataset(text: &str) -> Result<Vec<Sample>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let s = deserialize_sample(line).map_err(|e| match e {
            LriError::Parse { msg, .. } => LriError::Parse { line: i + 1, msg },
            other => LriError::Parse { line: i + 1, msg: other.to_string() },
        })?;
        out.push(s);
    }
    Ok(out)
}

/// One line of an interpretation output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretationRecord {
    pub id: String,
    pub method: String,
    pub score: Vec<f64>,
    /// Per-point covariance, row-major, for location-importance methods.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn center_examples() {
        let out = center_and_rescale(&Mat::from_rows(&[vec![1.0], vec![3.0]]), 1.0);
        // 1-D input is fine for the free function; clouds require D ∈ {2,3}
        assert_eq!(out.unwrap().data, vec![-1.0, 1.0]);
        let out = center_and_rescale(&Mat::from_rows(&[vec![0.0, 0.0], vec![2.0, 0.0], vec![4.0, 0.0]]), 0.5).unwrap();
        assert_eq!(out.data, vec![-1.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        let centered = Mat::from_rows(&[vec![-1.0, 2.0], vec![1.0, -2.0]]);
        assert_eq!(center_and_rescale(&centered, 1.0).unwrap(), centered);
    }

    #[test]
    fn center_rejects_nonfinite() {
        let m = Mat::from_rows(&[vec![0.0, f64::NAN]]);
        assert!(matches!(center_and_rescale(&m, 1.0), Err(LriError::Data(_))));
    }

    #[test]
    fn rescale_constant_examples() {
        let m = Mat::column((1..=10).map(|i| i as f64 / 10.0).collect());
        assert!((choose_rescale_constant([&m], 10.0).unwrap() - 10.0).abs() < 1e-12);
        let m = Mat::filled(5, 2, -4.0);
        assert_eq!(choose_rescale_constant([&m], 37.0).unwrap(), 0.25);
        assert_eq!(choose_rescale_constant([&Mat::scalar(1.0)], 50.0).unwrap(), 1.0);
        assert!(choose_rescale_constant([&Mat::zeros(3, 3)], 10.0).is_err());
    }

    #[test]
    fn missing_features_become_ones() {
        let c = PointCloud::new(None, Mat::from_rows(&[vec![0.0, 1.0], vec![2.0, 3.0]]), 1.0).unwrap();
        assert_eq!(c.features(), &Mat::filled(2, 1, 1.0));
    }

    #[test]
    fn missing_label_is_parse_error() {
        let err = deserialize_sample(r#"{"id":"a","x":[[1]],"r":[[0,0]]}"#).unwrap_err();
        assert!(matches!(err, LriError::Parse { .. }), "{err}");
        assert!(err.to_string().contains('y'));
    }

    #[test]
    fn interp_length_mismatch_is_validation_error() {
        let err = deserialize_sample(r#"{"id":"a","y":1,"x":[[1],[1]],"r":[[0,0],[0,0]],"interp":[1]}"#).unwrap_err();
        assert!(matches!(err, LriError::Data(_)), "{err}");
    }

    #[test]
    fn dataset_errors_report_line() {
        let good = serialize_sample(&Sample::new(
            "s-0",
            PointCloud::new(None, Mat::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]), 1.0).unwrap(),
            0,
        ));
        let text = format!("{good}\n{good}\n{{\"id\":\"b\"}}\n");
        match read_dataset(&text) {
            Err(LriError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }
}
