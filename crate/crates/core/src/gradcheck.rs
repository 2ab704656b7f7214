//! Central finite-difference verification of every analytic gradient path:
//! soft-graph edge weights, the full classifier, and both LRI objectives.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{input_gradients, Aggregation, GradTarget};
use crate::cloud::PointCloud;
use crate::error::Result;
use crate::graph::{edge_feature_gradcheck, edge_features, relative_error, EdgeWeightFn, SpatialGraph};
use crate::model::{Draws, LriModel, Method, ModelConfig, Phase, PhiKind, Prepared};
use crate::nn::Ctx;
use crate::tensor::Mat;

pub const GRADCHECK_RTOL: f64 = 1e-4;
const STEP: f64 = 1e-5;

/// Relative error of a central difference at `STEP`, retried at smaller
/// steps while it disagrees with `analytic` (a kink inside the window).
fn fd_error(analytic: f64, mut quotient: impl FnMut(f64) -> Result<f64>) -> Result<f64> {
    let mut best = f64::INFINITY;
    for step in [STEP, STEP / 10.0, STEP / 100.0] {
        best = best.min(relative_error(analytic, quotient(step)?));
        if best <= GRADCHECK_RTOL {
            break;
        }
    }
    Ok(best)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    pub passed: bool,
}

impl GradcheckReport {
    fn new(name: &str, max_rel_err: f64, checked: usize) -> Self {
        GradcheckReport { name: name.into(), max_rel_err, checked, passed: max_rel_err <= GRADCHECK_RTOL }
    }
}

fn loss_of(model: &LriModel, prep: &Prepared, phase: Phase, draws: Option<&Draws>) -> Result<f64> {
    let mut ctx = Ctx::new(&model.store, false, None);
    let f = model.forward(&mut ctx, prep, phase, draws)?;
    Ok(ctx.tape.scalar(f.loss))
}

/// Worst relative error of `∂loss/∂θ` over every parameter `θ` whose name
/// passes `select`, with dropout off and normalization in inference mode.
pub fn check_params(
    model: &LriModel,
    prep: &Prepared,
    phase: Phase,
    draws: Option<&Draws>,
    select: impl Fn(&str) -> bool,
) -> Result<(f64, usize)> {
    let mut ctx = Ctx::new(&model.store, false, None);
    let f = model.forward(&mut ctx, prep, phase, draws)?;
    let grads = ctx.tape.backward(f.loss);
    let analytic = ctx.param_grads(&grads);
    drop(ctx);
    let mut probe = model.clone();
    let (mut worst, mut checked) = (0.0f64, 0);
    for id in model.store.ids() {
        if !select(model.store.name(id)) {
            continue;
        }
        for j in 0..model.store.value(id).data.len() {
            let orig = probe.store.value(id).data[j];
            let err = fd_error(analytic[id.0].data[j], |h| {
                probe.store.value_mut(id).data[j] = orig + h;
                let up = loss_of(&probe, prep, phase, draws)?;
                probe.store.value_mut(id).data[j] = orig - h;
                let down = loss_of(&probe, prep, phase, draws)?;
                probe.store.value_mut(id).data[j] = orig;
                Ok((up - down) / (2.0 * h))
            })?;
            worst = worst.max(err);
            checked += 1;
        }
    }
    Ok((worst, checked))
}

/// Worst relative error of `∂loss/∂r` for the classifier alone, with the
/// graph topology held fixed.
pub fn check_coordinates(model: &LriModel, cloud: &PointCloud, graph: &SpatialGraph, label: u8) -> Result<(f64, usize)> {
    let analytic = input_gradients(&model.store, model.encoder(), model.head(), cloud, graph, label, GradTarget::Loss);
    let loss_at = |coords: Mat| -> Result<f64> {
        let c = PointCloud::from_centered(Some(cloud.features().clone()), coords, cloud.scale_c())?;
        let g = SpatialGraph { features: edge_features(c.coords(), &graph.src, &graph.dst), ..graph.clone() };
        let prep = Prepared::new(&[(&c, &g)], vec![label as f64]);
        loss_of(model, &prep, Phase::Erm, None)
    };
    let mut worst = 0.0f64;
    for i in 0..cloud.coords().data.len() {
        let err = fd_error(analytic.coords.data[i], |h| {
            let mut up = cloud.coords().clone();
            up.data[i] += h;
            let mut down = cloud.coords().clone();
            down.data[i] -= h;
            Ok((loss_at(up)? - loss_at(down)?) / (2.0 * h))
        })?;
        worst = worst.max(err);
    }
    Ok((worst, cloud.coords().data.len()))
}

/// Small model used by the suite.
pub fn suite_config(method: Method) -> ModelConfig {
    ModelConfig {
        method,
        in_dim: 2,
        coord_dim: 3,
        hidden: 6,
        layers: 2,
        dropout: 0.0,
        aggregation: Aggregation::Mean,
        k: 3,
        expansion: 1.5,
        beta: 0.7,
        alpha: 0.6,
        tau: 1.0,
        share_encoder: true,
        message_only: false,
        soft_graph: true,
        cov_dim: 3,
        phi: PhiKind::Learned { hidden: 4 },
    }
}

fn suite_cloud(rng: &mut ChaCha8Rng, n: usize) -> Result<PointCloud> {
    let x = Mat::from_vec(n, 2, (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect());
    let r = Mat::from_vec(n, 3, (0..3 * n).map(|_| rng.random_range(-1.5..1.5)).collect());
    PointCloud::new(Some(x), r, 1.0)
}

/// Randomizes the running normalization statistics so the inference-mode
/// affine map is not the identity.
fn perturb_running(model: &mut LriModel, rng: &mut ChaCha8Rng) {
    let mut ck = model.store.to_checkpoint();
    for rs in ck.running.iter_mut() {
        rs.mean.iter_mut().for_each(|m| *m = rng.random_range(-0.2..0.2));
        rs.var.iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
    }
    model.store.load_checkpoint(&ck).expect("same layout");
}

/// Runs every check on `n = 6` clouds.
pub fn run_suite(seed: u64) -> Result<Vec<GradcheckReport>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    let n = 6;

    let cloud = suite_cloud(&mut rng, n)?;
    let learned = EdgeWeightFn::Learned {
        w1: vec![-1.3, 0.7, -0.4],
        b1: vec![0.9, 0.2, 1.1],
        w2: vec![-0.8, 0.5, -1.2],
        b2: 0.6,
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for phi in [EdgeWeightFn::Analytic { length_scale: 0.8 }, learned] {
        worst = worst.max(edge_feature_gradcheck(cloud.coords(), 3, 1.5, &phi)?);
        checked += 1;
    }
    out.push(GradcheckReport::new("soft-graph edge weights vs coordinates", worst, checked));

    let mut erm = LriModel::new(suite_config(Method::Erm), &mut rng)?;
    perturb_running(&mut erm, &mut rng);
    let graph = erm.hard_graph(&cloud)?;
    let prep = Prepared::new(&[(&cloud, &graph)], vec![1.0]);
    let (w, c) = check_params(&erm, &prep, Phase::Erm, None, |_| true)?;
    out.push(GradcheckReport::new("backbone loss vs parameters", w, c));
    let (w, c) = check_coordinates(&erm, &cloud, &graph, 1)?;
    out.push(GradcheckReport::new("backbone loss vs coordinates", w, c));

    for (method, label) in [(Method::LriBernoulli, "Bernoulli objective"), (Method::LriGaussian, "Gaussian objective")] {
        for share in [true, false] {
            let mut cfg = suite_config(method);
            cfg.share_encoder = share;
            let mut model = LriModel::new(cfg, &mut rng)?;
            perturb_running(&mut model, &mut rng);
            let c2 = suite_cloud(&mut rng, n)?;
            let g2 = model.hard_graph(&c2)?;
            let prep = Prepared::new(&[(&cloud, &graph), (&c2, &g2)], vec![1.0, 0.0]);
            let draws = model.draw(2 * n, &mut rng);
            let interp = model.interpreter_params();
            let names: Vec<String> = model.store.ids().map(|id| model.store.name(id).to_string()).collect();
            // with a shared encoder the interpreter also owns the classifier's encoder
            let owned = |name: &str| {
                let i = names.iter().position(|n| n == name).expect("known parameter");
                interp[i] || (share && name.starts_with("clf.") && !name.starts_with("clf.head"))
            };
            let (w, c) = check_params(&model, &prep, Phase::Lri, draws.as_ref(), owned)?;
            let tag = if share { "shared encoder" } else { "separate encoders" };
            out.push(GradcheckReport::new(&format!("{label} vs interpreter parameters ({tag})"), w, c));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes() {
        for r in run_suite(7).unwrap() {
            assert!(r.passed, "{}: {:.3e}", r.name, r.max_rel_err);
            assert!(r.checked > 0);
        }
    }
}
