//! Post-hoc attributions on a trained classifier: coordinate-gradient
//! saliency, embedding-gradient class activation, and random scores.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{input_gradients, GradTarget};
use crate::cloud::PointCloud;
use crate::graph::SpatialGraph;
use crate::model::LriModel;
use crate::rng::stream_at;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionResult {
    pub method: String,
    pub scores: Vec<f64>,
    /// In-plane unit direction per point (`None` where the gradient vanishes).
    pub directions: Option<Vec<Option<[f64; 2]>>>,
}

/// `‖∂logit_pred/∂r_v‖` per point, plus the normalized in-plane gradient.
pub fn grad_geo(model: &LriModel, cloud: &PointCloud, graph: &SpatialGraph) -> AttributionResult {
    let g = input_gradients(&model.store, model.encoder(), model.head(), cloud, graph, 0, GradTarget::Logit);
    let mut scores = Vec::with_capacity(cloud.n());
    let mut directions = Vec::with_capacity(cloud.n());
    for v in 0..cloud.n() {
        let row = g.coords.row(v);
        scores.push(row.iter().map(|x| x * x).sum::<f64>().sqrt());
        let n2 = row[0].hypot(row[1]);
        directions.push((n2 > 0.0).then(|| [row[0] / n2, row[1] / n2]));
    }
    AttributionResult { method: "gradgeo".into(), scores, directions: Some(directions) }
}

/// `relu(Σ_c a_c·z_vc)` with `a_c` the point-averaged gradient of the
/// predicted-class logit with respect to channel `c` of the final embeddings.
pub fn grad_gam(model: &LriModel, cloud: &PointCloud, graph: &SpatialGraph) -> AttributionResult {
    let g = input_gradients(&model.store, model.encoder(), model.head(), cloud, graph, 0, GradTarget::Logit);
    let (n, h) = (cloud.n(), g.embeddings.cols);
    let mut a = vec![0.0; h];
    for v in 0..n {
        a.iter_mut().zip(g.embedding_grads.row(v)).for_each(|(ac, gv)| *ac += gv / n as f64);
    }
    let scores = (0..n).map(|v| g.embeddings.row(v).iter().zip(&a).map(|(z, ac)| z * ac).sum::<f64>().max(0.0)).collect();
    AttributionResult { method: "gradgam".into(), scores, directions: None }
}

/// I.i.d. uniform scores for sample `index` under `seed`.
pub fn random_baseline(n: usize, seed: u64, index: u64) -> AttributionResult {
    let mut rng = stream_at(seed, "random-baseline", index);
    AttributionResult { method: "random".into(), scores: (0..n).map(|_| rng.random::<f64>()).collect(), directions: None }
}
