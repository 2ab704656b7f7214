//! Three interactive pieces of the LRI pipeline for the browser page in
//! `www/`: a helix event with its k-nn graph, relaxed Bernoulli mask draws,
//! and the ellipse of a point's Gaussian perturbation.
//!
//! Every export returns a JSON string. The `*_json` functions hold the
//! logic so they can be tested natively.

use lri::analysis::ellipse;
use lri::bernoulli::{bern_kl, sample_mask};
use lri::gaussian::{gauss_kl, sample_perturbation};
use lri::graph::build_knn;
use lri::linalg::sigma_from_factors;
use lri::rng::stream;
use lri::synth::{generate_helix_dataset, HelixParams};
use lri::{LriError, Result};
use rand::Rng;
use rand_distr::StandardNormal;
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

/// One helix event: centered hits, their ground-truth flags and k-nn edges.
pub fn helix_event_json(params: &str, seed: u64, positive: bool, k: usize) -> Result<Value> {
    let mut p: HelixParams = if params.trim().is_empty() { HelixParams::default() } else { serde_json::from_str(params)? };
    p.positive_fraction = if positive { 1.0 } else { 0.0 };
    let s = generate_helix_dataset(&p, 1, seed)?.remove(0);
    let r = s.cloud.coords();
    let g = build_knn(r, k)?;
    Ok(json!({
        "label": s.y,
        "points": r.to_rows(),
        "important": s.interp_or_zeros(),
        "edges": g.src.iter().zip(g.dst.iter()).map(|(&u, &v)| [u, v]).collect::<Vec<_>>(),
        "b_field": p.b_field,
    }))
}

/// `draws` relaxed masks for each keep probability, summarized as a mean and
/// a 10-bin histogram, plus the KL to `Bern(alpha)`.
pub fn concrete_masks_json(p: &[f64], tau: f64, alpha: f64, seed: u64, draws: usize) -> Result<Value> {
    if !(tau > 0.0) || draws == 0 {
        return Err(LriError::Config("need tau > 0 and at least one draw".into()));
    }
    let mut rng = stream(seed, "demo-masks");
    let mut rows = Vec::with_capacity(p.len());
    for &pv in p {
        let kl = bern_kl(pv, alpha)?;
        let u: Vec<f64> = (0..draws).map(|_| rng.random_range(f64::EPSILON..1.0)).collect();
        let m = sample_mask(&vec![pv; draws], tau, &u);
        let mut hist = [0usize; 10];
        for &x in &m {
            hist[((x * 10.0) as usize).min(9)] += 1;
        }
        rows.push(json!({
            "p": pv,
            "mean": m.iter().sum::<f64>() / draws as f64,
            "histogram": hist,
            "kl": kl,
        }));
    }
    Ok(json!({ "tau": tau, "alpha": alpha, "masks": rows }))
}

/// Covariance `a1·UUᵀ + a2·I` of a 2-D point, its ellipse and `draws`
/// reparameterized perturbations.
pub fn gaussian_ellipse_json(u: &[f64], a1: f64, a2: f64, prior: f64, seed: u64, draws: usize) -> Result<Value> {
    if u.len() != 4 || !(a1 > 0.0) || !(a2 > 0.0) {
        return Err(LriError::Config("need a 2×2 factor and positive a1, a2".into()));
    }
    let sigma = sigma_from_factors(u, a1, a2, 2);
    let e = ellipse(&sigma, 2)?;
    let mut rng = stream(seed, "demo-perturbations");
    let mut normal = || rng.sample::<f64, _>(StandardNormal);
    let samples: Vec<Vec<f64>> = (0..draws)
        .map(|_| {
            let (s1, s2) = ([normal(), normal()], [normal(), normal()]);
            sample_perturbation(u, a1, a2, &s1, &s2)
        })
        .collect();
    Ok(json!({
        "sigma": sigma,
        "lambda1": e.lambda1,
        "lambda2": e.lambda2,
        "e1": e.e1,
        "eigen_ratio": e.eigen_ratio,
        "score": -(e.lambda1 * e.lambda2).ln(),
        "kl": gauss_kl(&sigma, 2, prior)?,
        "samples": samples,
    }))
}

fn to_js(v: Result<Value>) -> std::result::Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = helixEvent)]
pub fn helix_event(params: &str, seed: u32, positive: bool, k: u32) -> std::result::Result<String, JsError> {
    to_js(helix_event_json(params, seed.into(), positive, k as usize))
}

#[wasm_bindgen(js_name = concreteMasks)]
pub fn concrete_masks(p: Vec<f64>, tau: f64, alpha: f64, seed: u32, draws: u32) -> std::result::Result<String, JsError> {
    to_js(concrete_masks_json(&p, tau, alpha, seed.into(), draws as usize))
}

#[wasm_bindgen(js_name = gaussianEllipse)]
pub fn gaussian_ellipse(u: Vec<f64>, a1: f64, a2: f64, prior: f64, seed: u32, draws: u32) -> std::result::Result<String, JsError> {
    to_js(gaussian_ellipse_json(&u, a1, a2, prior, seed.into(), draws as usize))
}
