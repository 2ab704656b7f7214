//! Synthetic datasets with exact ground-truth interpretation labels.
//!
//! Helix events: charged tracks curling in a field along `z`. Positive
//! events carry two extra high-`p_T` tracks from a common vertex; their hits
//! are the important points. Motif clouds: typed points where the label is
//! the conjunction of two rigid geometric motifs.

use std::f64::consts::PI;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::cloud::{PointCloud, Sample};
use crate::error::{config_err, data_err, Result};
use crate::rng::{stream, stream_at};
use crate::tensor::Mat;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HelixParams {
    /// Field strength along `z`.
    pub b_field: f64,
    pub n_tracks: usize,
    /// Tracks replaced by signal tracks in positive events.
    pub n_signal_tracks: usize,
    pub hits_per_track: usize,
    /// Probability that a hit is recorded.
    pub hit_efficiency: f64,
    /// Transverse arc length between consecutive hits.
    pub t_spacing: f64,
    /// Transverse arc length of the first hit.
    pub first_hit: f64,
    pub noise_std: f64,
    pub vertex_std: f64,
    /// Transverse distance of the shared signal vertex from the beam line.
    pub signal_displacement: [f64; 2],
    pub pt_background: [f64; 2],
    pub pt_signal: [f64; 2],
    /// Longitudinal pitch `p_z` is drawn from `±pz_max`.
    pub pz_max: f64,
    pub positive_fraction: f64,
}

impl Default for HelixParams {
    fn default() -> Self {
        HelixParams {
            b_field: 2.0,
            n_tracks: 10,
            n_signal_tracks: 2,
            hits_per_track: 12,
            hit_efficiency: 0.92,
            t_spacing: 1.0,
            first_hit: 1.0,
            noise_std: 0.005,
            vertex_std: 0.3,
            signal_displacement: [0.0, 0.0],
            pt_background: [2.0, 6.0],
            pt_signal: [50.0, 100.0],
            pz_max: 0.5,
            positive_fraction: 0.5,
        }
    }
}

impl HelixParams {
    pub fn validate(&self) -> Result<()> {
        if self.hits_per_track < 3 {
            return config_err(format!("tracks need at least 3 hits, got {}", self.hits_per_track));
        }
        if !(self.b_field > 0.0) {
            return config_err(format!("field strength must be positive, got {}", self.b_field));
        }
        if self.n_signal_tracks > self.n_tracks || self.n_tracks == 0 {
            return config_err(format!("{} signal tracks among {} tracks", self.n_signal_tracks, self.n_tracks));
        }
        let range_ok = |r: [f64; 2]| r[0] > 0.0 && r[0] <= r[1];
        if !range_ok(self.pt_background) || !range_ok(self.pt_signal) {
            return config_err("transverse momentum ranges must be positive and ordered");
        }
        if !(self.hit_efficiency > 0.0 && self.hit_efficiency <= 1.0) {
            return config_err(format!("hit efficiency must lie in (0, 1], got {}", self.hit_efficiency));
        }
        let d = self.signal_displacement;
        if !(d[0] >= 0.0 && d[0] <= d[1]) {
            return config_err("signal displacement range must be nonnegative and ordered");
        }
        if !(self.t_spacing > 0.0) || !(self.first_hit >= 0.0) || self.noise_std < 0.0 || self.vertex_std < 0.0 || self.pz_max < 0.0 {
            return config_err("spacing must be positive and spreads nonnegative");
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return config_err(format!("positive fraction must lie in [0, 1], got {}", self.positive_fraction));
        }
        Ok(())
    }
}

/// One charged particle's trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HelixTrack {
    pub vertex: [f64; 3],
    pub charge: f64,
    pub pt: f64,
    pub pz: f64,
    pub phi0: f64,
}

impl HelixTrack {
    /// `R = p_T / (|q|·B)`.
    pub fn radius(&self, b: f64) -> f64 {
        self.pt / (self.charge.abs() * b)
    }

    pub fn position(&self, t: f64, b: f64) -> [f64; 3] {
        let r = self.radius(b);
        let th = t / r + self.phi0;
        [
            self.vertex[0] + r * (th.sin() - self.phi0.sin()),
            self.vertex[1] + self.charge * r * (self.phi0.cos() - th.cos()),
            self.vertex[2] + self.pz * t,
        ]
    }

    /// Unit tangent at `t`.
    pub fn tangent(&self, t: f64, b: f64) -> [f64; 3] {
        let th = t / self.radius(b) + self.phi0;
        let v = [th.cos(), self.charge * th.sin(), self.pz];
        let norm = (1.0 + self.pz * self.pz).sqrt();
        [v[0] / norm, v[1] / norm, v[2] / norm]
    }

    /// Center of the transverse circle.
    pub fn center(&self, b: f64) -> [f64; 2] {
        let r = self.radius(b);
        [self.vertex[0] - r * self.phi0.sin(), self.vertex[1] + self.charge * r * self.phi0.cos()]
    }
}

fn normal3(rng: &mut ChaCha8Rng, std: f64) -> [f64; 3] {
    [0, 1, 2].map(|_| std * rng.sample::<f64, _>(StandardNormal))
}

fn random_track(rng: &mut ChaCha8Rng, vertex: [f64; 3], pt: [f64; 2], pz_max: f64, charge: f64) -> HelixTrack {
    HelixTrack {
        vertex,
        charge,
        pt: rng.random_range(pt[0]..=pt[1]),
        pz: if pz_max > 0.0 { rng.random_range(-pz_max..=pz_max) } else { 0.0 },
        phi0: rng.random_range(0.0..2.0 * PI),
    }
}

/// Labels with the requested positive fraction exactly, in seeded order.
fn balanced_labels(n: usize, fraction: f64, seed: u64) -> Vec<u8> {
    let n_pos = (fraction * n as f64).round() as usize;
    let mut y: Vec<u8> = (0..n).map(|i| (i < n_pos) as u8).collect();
    y.shuffle(&mut stream(seed, "labels"));
    y
}

/// Tracks of one event (signal tracks first) and its label.
pub fn helix_event_tracks(p: &HelixParams, y: u8, rng: &mut ChaCha8Rng) -> Vec<(HelixTrack, bool)> {
    let n_sig = if y == 1 { p.n_signal_tracks } else { 0 };
    let mut tracks = Vec::with_capacity(p.n_tracks);
    let mut shared = normal3(rng, p.vertex_std);
    if n_sig > 0 && p.signal_displacement[1] > 0.0 {
        let d = rng.random_range(p.signal_displacement[0]..=p.signal_displacement[1]);
        let a = rng.random_range(0.0..2.0 * PI);
        shared[0] += d * a.cos();
        shared[1] += d * a.sin();
    }
    for s in 0..n_sig {
        let q = if s % 2 == 0 { 1.0 } else { -1.0 };
        tracks.push((random_track(rng, shared, p.pt_signal, p.pz_max, q), true));
    }
    for _ in n_sig..p.n_tracks {
        let q = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let v = normal3(rng, p.vertex_std);
        tracks.push((random_track(rng, v, p.pt_background, p.pz_max, q), false));
    }
    tracks
}

fn helix_sample(p: &HelixParams, index: usize, y: u8, seed: u64) -> Result<Sample> {
    let mut rng = stream_at(seed, "helix", index as u64);
    let tracks = helix_event_tracks(p, y, &mut rng);
    // (position, velocity, important)
    let mut hits: Vec<([f64; 3], [f64; 3], u8)> = Vec::new();
    for (track, signal) in &tracks {
        let kept: Vec<usize> = loop {
            let k: Vec<usize> = (0..p.hits_per_track).filter(|_| rng.random::<f64>() < p.hit_efficiency).collect();
            if k.len() >= 3 {
                break k;
            }
        };
        for j in kept {
            let t = p.first_hit + j as f64 * p.t_spacing;
            let mut pos = track.position(t, p.b_field);
            let noise = normal3(&mut rng, p.noise_std);
            pos.iter_mut().zip(noise).for_each(|(a, e)| *a += e);
            hits.push((pos, track.tangent(t, p.b_field), *signal as u8));
        }
    }
    hits.shuffle(&mut rng);
    let n = hits.len();
    let r = Mat::from_vec(n, 3, hits.iter().flat_map(|h| h.0).collect());
    let velocity = Mat::from_vec(n, 3, hits.iter().flat_map(|h| h.1).collect());
    let interp: Vec<u8> = hits.iter().map(|h| h.2).collect();
    let mut s = Sample::new(format!("helix-{index}"), PointCloud::new(None, r, 1.0)?, y);
    s.interp = Some(interp);
    s.velocity = Some(velocity);
    s.b_field = Some(p.b_field);
    s.validate()?;
    Ok(s)
}

pub fn generate_helix_dataset(p: &HelixParams, n_samples: usize, seed: u64) -> Result<Vec<Sample>> {
    p.validate()?;
    if n_samples == 0 {
        return config_err("cannot generate an empty dataset");
    }
    let labels = balanced_labels(n_samples, p.positive_fraction, seed);
    labels.iter().enumerate().map(|(i, &y)| helix_sample(p, i, y, seed)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MotifParams {
    pub n_types: usize,
    /// Spacing of the four collinear type-1 points of motif A.
    pub chain_spacing: f64,
    /// Distance from the type-2 center of motif B to its two type-3 points.
    pub bond_length: f64,
    pub bond_angle_deg: f64,
    /// Inclusive range of background point counts.
    pub n_background: [usize; 2],
    pub box_half_width: f64,
    pub min_separation: f64,
    pub jitter_std: f64,
    pub positive_fraction: f64,
    /// Distance tolerance of the motif detector.
    pub tolerance: f64,
    pub max_retries: usize,
}

impl Default for MotifParams {
    fn default() -> Self {
        MotifParams {
            n_types: 4,
            chain_spacing: 1.0,
            bond_length: 1.0,
            bond_angle_deg: 120.0,
            n_background: [16, 24],
            box_half_width: 2.5,
            min_separation: 0.8,
            jitter_std: 0.0,
            positive_fraction: 0.5,
            tolerance: 0.05,
            max_retries: 200,
        }
    }
}

impl MotifParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_types < 4 {
            return config_err(format!("motifs need at least 4 atom types, got {}", self.n_types));
        }
        if !(self.chain_spacing > 0.0 && self.bond_length > 0.0) {
            return config_err("motif lengths must be positive");
        }
        if !(self.bond_angle_deg > 0.0 && self.bond_angle_deg < 180.0) {
            return config_err(format!("bond angle must lie in (0, 180), got {}", self.bond_angle_deg));
        }
        if self.n_background[0] > self.n_background[1] {
            return config_err("background range is reversed");
        }
        if !(self.box_half_width > 0.0) || self.min_separation < 0.0 || self.jitter_std < 0.0 || !(self.tolerance > 0.0) {
            return config_err("box must be positive and spreads nonnegative");
        }
        if !(0.0..=1.0).contains(&self.positive_fraction) {
            return config_err(format!("positive fraction must lie in [0, 1], got {}", self.positive_fraction));
        }
        Ok(())
    }

    /// Motif A template (type 1).
    pub fn motif_a(&self) -> Vec<[f64; 3]> {
        (0..4).map(|i| [i as f64 * self.chain_spacing, 0.0, 0.0]).collect()
    }

    /// Motif B template: type-2 center, then two type-3 neighbors.
    pub fn motif_b(&self) -> Vec<[f64; 3]> {
        let th = self.bond_angle_deg.to_radians();
        let b = self.bond_length;
        vec![[0.0, 0.0, 0.0], [b, 0.0, 0.0], [b * th.cos(), b * th.sin(), 0.0]]
    }
}

/// Which motifs a motif sample was built with.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MotifKind {
    Both,
    Neither,
    AOnly,
    BOnly,
}

impl MotifKind {
    pub fn has_a(self) -> bool {
        matches!(self, MotifKind::Both | MotifKind::AOnly)
    }
    pub fn has_b(self) -> bool {
        matches!(self, MotifKind::Both | MotifKind::BOnly)
    }
    pub fn stratum(self) -> u8 {
        self as u8
    }
}

pub const MOTIF_A_TYPE: usize = 1;
pub const MOTIF_B_CENTER: usize = 2;
pub const MOTIF_B_ARM: usize = 3;

fn dist3(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn random_rotation(rng: &mut ChaCha8Rng) -> UnitQuaternion<f64> {
    let q: [f64; 4] = [0, 1, 2, 3].map(|_| rng.sample(StandardNormal));
    UnitQuaternion::from_quaternion(Quaternion::new(q[0], q[1], q[2], q[3]))
}

fn far_enough(p: &[f64; 3], placed: &[[f64; 3]], min_sep: f64) -> bool {
    placed.iter().all(|q| dist3(p, q) >= min_sep)
}

fn inside(p: &[f64; 3], half: f64) -> bool {
    p.iter().all(|c| c.abs() <= half)
}

/// Places a rigid copy of `template` at a random pose inside the box.
fn place_motif(p: &MotifParams, template: &[[f64; 3]], placed: &[[f64; 3]], rng: &mut ChaCha8Rng) -> Option<Vec<[f64; 3]>> {
    for _ in 0..p.max_retries {
        let rot = random_rotation(rng);
        let shift = [0, 1, 2].map(|_| rng.random_range(-p.box_half_width..=p.box_half_width));
        let pts: Vec<[f64; 3]> = template
            .iter()
            .map(|t| {
                let v = rot * Vector3::new(t[0], t[1], t[2]);
                [v.x + shift[0], v.y + shift[1], v.z + shift[2]]
            })
            .collect();
        if pts.iter().all(|q| inside(q, p.box_half_width) && far_enough(q, placed, p.min_separation)) {
            return Some(pts);
        }
    }
    None
}

/// Points of type `ty` whose distance to `a` matches `target` within `tol`.
fn matches(points: &[[f64; 3]], types: &[usize], ty: usize, a: usize, target: f64, tol: f64) -> Vec<usize> {
    (0..points.len()).filter(|&b| b != a && types[b] == ty && (dist3(&points[a], &points[b]) - target).abs() <= tol).collect()
}

/// Whether four type-1 points form motif A: every pairwise distance within
/// `tolerance` of the template's.
pub fn contains_motif_a(p: &MotifParams, points: &[[f64; 3]], types: &[usize]) -> bool {
    let s = p.chain_spacing;
    let tol = p.tolerance;
    let close = |a: usize, b: usize, k: f64| (dist3(&points[a], &points[b]) - k * s).abs() <= tol;
    for a in (0..points.len()).filter(|&i| types[i] == MOTIF_A_TYPE) {
        for b in matches(points, types, MOTIF_A_TYPE, a, s, tol) {
            for c in matches(points, types, MOTIF_A_TYPE, b, s, tol) {
                if c == a || !close(a, c, 2.0) {
                    continue;
                }
                for d in matches(points, types, MOTIF_A_TYPE, c, s, tol) {
                    if d != a && d != b && close(b, d, 2.0) && close(a, d, 3.0) {
                        return true;
                    }
                }
            }
        }
    }
    false
}

/// Whether a type-2 point has two type-3 points matching motif B.
pub fn contains_motif_b(p: &MotifParams, points: &[[f64; 3]], types: &[usize]) -> bool {
    let chord = 2.0 * p.bond_length * (p.bond_angle_deg.to_radians() / 2.0).sin();
    for c in (0..points.len()).filter(|&i| types[i] == MOTIF_B_CENTER) {
        let arms = matches(points, types, MOTIF_B_ARM, c, p.bond_length, p.tolerance);
        for (i, &u) in arms.iter().enumerate() {
            if arms[i + 1..].iter().any(|&w| (dist3(&points[u], &points[w]) - chord).abs() <= p.tolerance) {
                return true;
            }
        }
    }
    false
}

/// Coordinates and atom types (argmax of the one-hot features) of a cloud.
pub fn typed_points(cloud: &PointCloud) -> (Vec<[f64; 3]>, Vec<usize>) {
    let x = cloud.features();
    let r = cloud.coords();
    let pts = (0..cloud.n()).map(|i| [r.get(i, 0), r.get(i, 1), if r.cols > 2 { r.get(i, 2) } else { 0.0 }]).collect();
    let types = (0..cloud.n())
        .map(|i| x.row(i).iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).map_or(0, |(j, _)| j))
        .collect();
    (pts, types)
}

/// Detected motif content of a motif-dataset sample; coordinates must be
/// in the generator's units (scale 1).
pub fn motif_kind(p: &MotifParams, cloud: &PointCloud) -> MotifKind {
    let (pts, types) = typed_points(cloud);
    match (contains_motif_a(p, &pts, &types), contains_motif_b(p, &pts, &types)) {
        (true, true) => MotifKind::Both,
        (true, false) => MotifKind::AOnly,
        (false, true) => MotifKind::BOnly,
        (false, false) => MotifKind::Neither,
    }
}

fn motif_sample(p: &MotifParams, index: usize, kind: MotifKind, seed: u64) -> Result<Sample> {
    let mut rng = stream_at(seed, "motif", index as u64);
    for _ in 0..p.max_retries {
        let mut pts: Vec<[f64; 3]> = Vec::new();
        let mut types: Vec<usize> = Vec::new();
        let mut motif: Vec<bool> = Vec::new();
        let mut ok = true;
        let add_motif = |template: Vec<[f64; 3]>, tys: &[usize], pts: &mut Vec<[f64; 3]>, types: &mut Vec<usize>, motif: &mut Vec<bool>, rng: &mut ChaCha8Rng| {
            match place_motif(p, &template, pts, rng) {
                Some(placed) => {
                    for (q, &t) in placed.into_iter().zip(tys) {
                        pts.push(q);
                        types.push(t);
                        motif.push(true);
                    }
                    true
                }
                None => false,
            }
        };
        if kind.has_a() {
            ok &= add_motif(p.motif_a(), &[MOTIF_A_TYPE; 4], &mut pts, &mut types, &mut motif, &mut rng);
        }
        if ok && kind.has_b() {
            ok &= add_motif(p.motif_b(), &[MOTIF_B_CENTER, MOTIF_B_ARM, MOTIF_B_ARM], &mut pts, &mut types, &mut motif, &mut rng);
        }
        if !ok {
            continue;
        }
        if p.jitter_std > 0.0 {
            for q in pts.iter_mut() {
                q.iter_mut().for_each(|c| *c += p.jitter_std * rng.sample::<f64, _>(StandardNormal));
            }
        }
        let n_motif = pts.len();
        let n_bg = rng.random_range(p.n_background[0]..=p.n_background[1]);
        let mut tries = 0;
        while pts.len() < n_motif + n_bg && tries < 100 * p.max_retries.max(1) {
            tries += 1;
            let q = [0, 1, 2].map(|_| rng.random_range(-p.box_half_width..=p.box_half_width));
            if far_enough(&q, &pts, p.min_separation) {
                pts.push(q);
                types.push(rng.random_range(0..p.n_types));
                motif.push(false);
            }
        }
        if pts.len() < n_motif + n_bg {
            continue;
        }
        if contains_motif_a(p, &pts, &types) != kind.has_a() || contains_motif_b(p, &pts, &types) != kind.has_b() {
            continue;
        }
        let mut order: Vec<usize> = (0..pts.len()).collect();
        order.shuffle(&mut rng);
        let n = pts.len();
        let r = Mat::from_vec(n, 3, order.iter().flat_map(|&i| pts[i]).collect());
        let mut x = Mat::zeros(n, p.n_types);
        for (row, &i) in order.iter().enumerate() {
            x.set(row, types[i], 1.0);
        }
        let y = (kind == MotifKind::Both) as u8;
        let interp = order.iter().map(|&i| (y == 1 && motif[i]) as u8).collect();
        let mut s = Sample::new(format!("motif-{index}"), PointCloud::new(Some(x), r, 1.0)?, y);
        s.interp = Some(interp);
        s.validate()?;
        return Ok(s);
    }
    data_err(format!("could not place motifs for sample {index} after {} retries; enlarge the box", p.max_retries))
}

/// Samples and the motif content each was generated with.
pub fn generate_motif_dataset(p: &MotifParams, n_samples: usize, seed: u64) -> Result<(Vec<Sample>, Vec<MotifKind>)> {
    p.validate()?;
    if n_samples == 0 {
        return config_err("cannot generate an empty dataset");
    }
    let labels = balanced_labels(n_samples, p.positive_fraction, seed);
    let mut neg = 0usize;
    let kinds: Vec<MotifKind> = labels
        .iter()
        .map(|&y| {
            if y == 1 {
                MotifKind::Both
            } else {
                neg += 1;
                [MotifKind::Neither, MotifKind::AOnly, MotifKind::BOnly][(neg - 1) % 3]
            }
        })
        .collect();
    let samples = kinds.iter().enumerate().map(|(i, &k)| motif_sample(p, i, k, seed)).collect::<Result<Vec<_>>>()?;
    Ok((samples, kinds))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SplitScheme {
    Random,
    BalancedMotif,
}

impl std::str::FromStr for SplitScheme {
    type Err = crate::error::LriError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "random" => Ok(SplitScheme::Random),
            "balanced-motif" => Ok(SplitScheme::BalancedMotif),
            other => config_err(format!("unknown split scheme {other:?}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Seeded train/validation/test split, stratified by `strata` when given.
pub fn split_indices(n: usize, strata: Option<&[u8]>, ratios: [f64; 3], seed: u64) -> Result<Splits> {
    if ratios.iter().any(|&r| !(r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return config_err(format!("split ratios must be nonnegative and sum to 1, got {ratios:?}"));
    }
    if strata.is_some_and(|s| s.len() != n) {
        return config_err("one stratum per sample required");
    }
    let mut rng = stream(seed, "splits");
    let mut groups: std::collections::BTreeMap<u8, Vec<usize>> = Default::default();
    for i in 0..n {
        groups.entry(strata.map_or(0, |s| s[i])).or_default().push(i);
    }
    let mut out = Splits { train: vec![], val: vec![], test: vec![] };
    for (_, mut idx) in groups {
        idx.shuffle(&mut rng);
        let m = idx.len();
        let n_train = ((ratios[0] * m as f64).round() as usize).min(m);
        let n_val = ((ratios[1] * m as f64).round() as usize).min(m - n_train);
        out.train.extend_from_slice(&idx[..n_train]);
        out.val.extend_from_slice(&idx[n_train..n_train + n_val]);
        out.test.extend_from_slice(&idx[n_train + n_val..]);
    }
    for v in [&mut out.train, &mut out.val, &mut out.test] {
        v.sort_unstable();
    }
    Ok(out)
}

/// Splits a dataset; the balanced scheme stratifies by detected motif content.
pub fn make_splits(samples: &[Sample], ratios: [f64; 3], scheme: SplitScheme, motif: &MotifParams, seed: u64) -> Result<Splits> {
    match scheme {
        SplitScheme::Random => split_indices(samples.len(), None, ratios, seed),
        SplitScheme::BalancedMotif => {
            let strata: Vec<u8> = samples.iter().map(|s| motif_kind(motif, &s.cloud).stratum()).collect();
            split_indices(samples.len(), Some(&strata), ratios, seed)
        }
    }
}

/// Dataset statistics in the layout of a dataset overview table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub n_samples: usize,
    pub avg_points: f64,
    /// Averaged over positive samples.
    pub avg_important: f64,
    /// Fraction of positive samples.
    pub class_ratio: f64,
}

pub fn summarize(samples: &[Sample]) -> DatasetSummary {
    let n = samples.len().max(1) as f64;
    let pos: Vec<&Sample> = samples.iter().filter(|s| s.y == 1).collect();
    let important: usize = pos.iter().map(|s| s.interp_or_zeros().iter().map(|&v| v as usize).sum::<usize>()).sum();
    DatasetSummary {
        n_samples: samples.len(),
        avg_points: samples.iter().map(|s| s.cloud.n()).sum::<usize>() as f64 / n,
        avg_important: important as f64 / pos.len().max(1) as f64,
        class_ratio: pos.len() as f64 / n,
    }
}

/// Generation parameters and seed of a dataset file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset: String,
    pub params: serde_json::Value,
    pub seed: u64,
    pub n_samples: usize,
    pub summary: DatasetSummary,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubling_field_halves_radius() {
        let t = HelixTrack { vertex: [0.0; 3], charge: -1.0, pt: 12.0, pz: 0.1, phi0: 0.4 };
        assert_eq!(t.radius(4.0), 0.5 * t.radius(2.0));
    }

    #[test]
    fn noiseless_hits_lie_on_helix() {
        let p = HelixParams { noise_std: 0.0, vertex_std: 0.0, hit_efficiency: 1.0, ..Default::default() };
        let mut rng = stream_at(3, "helix", 0);
        for (track, _) in helix_event_tracks(&p, 1, &mut rng) {
            let c = track.center(p.b_field);
            let r = track.radius(p.b_field);
            for j in 0..p.hits_per_track {
                let t = (j + 1) as f64;
                let x = track.position(t, p.b_field);
                assert!(((x[0] - c[0]).hypot(x[1] - c[1]) - r).abs() < 1e-9 * r);
                assert!((x[2] - track.pz * t).abs() < 1e-12);
                let v = track.tangent(t, p.b_field);
                assert!((v.iter().map(|a| a * a).sum::<f64>() - 1.0).abs() < 1e-12);
                let radial = [x[0] - c[0], x[1] - c[1]];
                assert!((radial[0] * v[0] + radial[1] * v[1]).abs() < 1e-9 * r);
            }
        }
    }

    #[test]
    fn helix_dataset_properties() {
        let p = HelixParams::default();
        let data = generate_helix_dataset(&p, 40, 11).unwrap();
        assert_eq!(data.iter().filter(|s| s.y == 1).count(), 20);
        for s in &data {
            s.validate().unwrap();
            let important = s.interp_or_zeros().iter().filter(|&&v| v == 1).count();
            assert_eq!(important > 0, s.y == 1);
        }
        assert_eq!(data, generate_helix_dataset(&p, 40, 11).unwrap());
        assert!(generate_helix_dataset(&HelixParams { hits_per_track: 2, ..p }, 4, 1).is_err());
    }

    #[test]
    fn signal_vertex_is_displaced_and_shared() {
        let p = HelixParams { vertex_std: 0.0, signal_displacement: [2.0, 3.0], ..Default::default() };
        for i in 0..20 {
            let tracks = helix_event_tracks(&p, 1, &mut stream_at(5, "helix", i));
            let v = tracks[0].0.vertex;
            let d = v[0].hypot(v[1]);
            assert!((2.0..=3.0).contains(&d), "{d}");
            assert_eq!(tracks[1].0.vertex, v);
            assert!(tracks[2..].iter().all(|(t, s)| !s && t.vertex == [0.0; 3]));
        }
        assert!(HelixParams { signal_displacement: [3.0, 2.0], ..Default::default() }.validate().is_err());
    }

    #[test]
    fn first_hit_sets_the_innermost_arc_length() {
        let p = HelixParams { n_tracks: 1, n_signal_tracks: 0, noise_std: 0.0, hit_efficiency: 1.0, first_hit: 4.0, positive_fraction: 0.0, ..Default::default() };
        let s = generate_helix_dataset(&p, 1, 2).unwrap().remove(0);
        let track = helix_event_tracks(&p, 0, &mut stream_at(2, "helix", 0)).remove(0).0;
        let vel = s.velocity.as_ref().unwrap();
        let mut found = [false; 12];
        for i in 0..vel.rows {
            let j = (0..12).find(|&j| {
                let t = track.tangent(4.0 + j as f64, p.b_field);
                (0..3).all(|k| (t[k] - vel.get(i, k)).abs() < 1e-12)
            });
            found[j.expect("hit tangent matches an arc length from 4 on")] = true;
        }
        assert!(found.iter().all(|&f| f));
    }

    #[test]
    fn motif_dataset_properties() {
        let p = MotifParams::default();
        let (data, kinds) = generate_motif_dataset(&p, 30, 5).unwrap();
        for (s, k) in data.iter().zip(&kinds) {
            assert_eq!(motif_kind(&p, &s.cloud), *k);
            assert_eq!(s.y == 1, *k == MotifKind::Both);
            if s.y == 0 {
                assert!(s.interp_or_zeros().iter().all(|&v| v == 0));
            } else {
                assert_eq!(s.interp_or_zeros().iter().filter(|&&v| v == 1).count(), 7);
            }
        }
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split_indices(100, None, [0.7, 0.15, 0.15], 3).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (70, 15, 15));
        assert_eq!(s, split_indices(100, None, [0.7, 0.15, 0.15], 3).unwrap());
        let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..100).collect::<Vec<_>>());
        assert!(split_indices(10, None, [0.7, 0.2, 0.2], 3).is_err());
    }
}
