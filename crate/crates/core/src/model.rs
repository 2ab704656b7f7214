//! The classifier `f` and interpreter `g` bundled with their parameters,
//! plus the three training objectives (plain cross-entropy and the two LRI
//! variants) evaluated over a batch of clouds.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::backbone::{Aggregation, ClassifierHead, Encoder, EncoderConfig, EncoderInputs, GraphBatch};
use crate::bernoulli::{bern_kl_on_tape, sample_mask_on_tape, BernoulliInterpretation, P_CLAMP};
use crate::cloud::PointCloud;
use crate::error::{config_err, Result};
use crate::gaussian::{perturbation_on_tape, GaussianInterpretation, PointCovariance, SCALE_MAX, SCALE_MIN};
use crate::graph::{build_knn, expanded_k, learned_phi, soft_topology, EdgeWeightFn, SpatialGraph};
use crate::nn::{Checkpoint, Ctx, Linear, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Erm,
    LriBernoulli,
    LriGaussian,
    GradGeo,
    GradGam,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Erm => "erm",
            Method::LriBernoulli => "lri-bernoulli",
            Method::LriGaussian => "lri-gaussian",
            Method::GradGeo => "gradgeo",
            Method::GradGam => "gradgam",
        }
    }

    /// Whether training injects randomness (the two LRI variants).
    pub fn is_lri(self) -> bool {
        matches!(self, Method::LriBernoulli | Method::LriGaussian)
    }
}

impl std::str::FromStr for Method {
    type Err = crate::error::LriError;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "erm" => Method::Erm,
            "lri-bernoulli" => Method::LriBernoulli,
            "lri-gaussian" => Method::LriGaussian,
            "gradgeo" => Method::GradGeo,
            "gradgam" => Method::GradGam,
            other => return config_err(format!("unknown method {other:?}")),
        })
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum PhiKind {
    Learned { hidden: usize },
    Analytic { length_scale: f64 },
}

/// Architecture and objective knobs of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub method: Method,
    pub in_dim: usize,
    pub coord_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub aggregation: Aggregation,
    pub k: usize,
    pub expansion: f64,
    pub beta: f64,
    pub alpha: f64,
    pub tau: f64,
    /// Interpreter reuses the classifier's encoder.
    pub share_encoder: bool,
    /// Bernoulli masks act on messages only, not on pooling.
    pub message_only: bool,
    /// Gaussian arm rebuilds the graph from perturbed coordinates.
    pub soft_graph: bool,
    /// Dimension of the learned covariance; 2 perturbs only x and y.
    pub cov_dim: usize,
    pub phi: PhiKind,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0) {
            return config_err(format!("beta must be positive, got {}", self.beta));
        }
        if !(0.5..1.0).contains(&self.alpha) {
            return config_err(format!("alpha must lie in [0.5, 1), got {}", self.alpha));
        }
        if !(self.tau > 0.0) {
            return config_err(format!("temperature must be positive, got {}", self.tau));
        }
        if !(self.expansion >= 1.0) {
            return config_err(format!("expansion factor must be at least 1, got {}", self.expansion));
        }
        if self.layers == 0 || self.hidden == 0 || self.k == 0 {
            return config_err("layers, hidden size and k must be positive");
        }
        if !(2..=self.coord_dim).contains(&self.cov_dim) {
            return config_err(format!("covariance dimension {} incompatible with D = {}", self.cov_dim, self.coord_dim));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return config_err(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }

    /// The method whose parameters get trained (baselines reuse ERM).
    pub fn trained_method(&self) -> Method {
        match self.method {
            Method::GradGeo | Method::GradGam => Method::Erm,
            m => m,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Mlp {
    l1: Linear,
    l2: Linear,
}

impl Mlp {
    fn new(store: &mut ParamStore, name: &str, hidden: usize, out: usize, rng: &mut ChaCha8Rng) -> Self {
        Mlp { l1: Linear::new(store, &format!("{name}.l1"), hidden, hidden, rng), l2: Linear::new(store, &format!("{name}.l2"), hidden, out, rng) }
    }

    fn forward(&self, ctx: &mut Ctx, z: Var) -> Var {
        let h = self.l1.forward(ctx, z);
        let h = ctx.tape.relu(h);
        self.l2.forward(ctx, h)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct PhiParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Which objective a forward pass evaluates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    /// Classifier alone on the hard graph.
    Erm,
    /// Classifier on the randomized cloud produced by the interpreter.
    Lri,
}

/// Noise fed to one LRI forward pass, fixed ahead of time so the pass is a
/// deterministic function of the parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Draws {
    /// `N` uniforms in `(0, 1)`.
    Uniform(Vec<f64>),
    /// `N × cov_dim` standard normals, twice.
    Normal { s1: Mat, s2: Mat },
}

/// Interpreter outputs left on the tape.
#[derive(Clone, Copy, Debug)]
pub enum InterpVars {
    Bernoulli { p: Var, m: Var },
    Gaussian { u: Var, a1: Var, a2: Var, eps: Var },
}

#[derive(Clone, Copy, Debug)]
pub struct ForwardOut {
    /// `G × 1`.
    pub logits: Var,
    pub ce: Var,
    /// Batch mean of the per-cloud mean KL.
    pub kl: Option<Var>,
    pub loss: Var,
    pub interp: Option<InterpVars>,
}

/// A batch plus the hard graphs of its clouds.
pub struct Prepared {
    pub batch: GraphBatch,
    pub labels: Vec<f64>,
}

impl Prepared {
    pub fn new(items: &[(&PointCloud, &SpatialGraph)], labels: Vec<f64>) -> Self {
        Prepared { batch: GraphBatch::new(items), labels }
    }
}

#[derive(Clone, Debug)]
pub struct LriModel {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    encoder: Encoder,
    head: ClassifierHead,
    interp_encoder: Option<Encoder>,
    bern_head: Option<Mlp>,
    cov_head: Option<Mlp>,
    phi: Option<PhiParams>,
}

impl LriModel {
    pub fn new(cfg: ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let enc_cfg = EncoderConfig {
            in_dim: cfg.in_dim,
            coord_dim: cfg.coord_dim,
            hidden: cfg.hidden,
            layers: cfg.layers,
            dropout: cfg.dropout,
            aggregation: cfg.aggregation,
        };
        let encoder = Encoder::new(&mut store, "clf", enc_cfg.clone(), rng);
        let head = ClassifierHead::new(&mut store, "clf.head", cfg.hidden, cfg.dropout, rng);
        let method = cfg.trained_method();
        let interp_encoder =
            (method.is_lri() && !cfg.share_encoder).then(|| Encoder::new(&mut store, "interp", enc_cfg, rng));
        let bern_head = (method == Method::LriBernoulli).then(|| Mlp::new(&mut store, "interp.bern", cfg.hidden, 1, rng));
        let cov_head = (method == Method::LriGaussian)
            .then(|| Mlp::new(&mut store, "interp.cov", cfg.hidden, cfg.cov_dim * cfg.cov_dim + 2, rng));
        let phi = match (&cfg.phi, method) {
            (PhiKind::Learned { hidden }, Method::LriGaussian) => {
                let h = *hidden;
                let bound = 1.0 / (h as f64).sqrt();
                let w1 = Mat::from_vec(1, h, (0..h).map(|_| rng.random_range(-1.0..1.0)).collect());
                let b1 = Mat::from_vec(1, h, (0..h).map(|_| rng.random_range(0.0..1.0)).collect());
                let w2 = Mat::from_vec(h, 1, (0..h).map(|_| rng.random_range(-bound..bound)).collect());
                Some(PhiParams {
                    w1: store.add("phi.w1", w1),
                    b1: store.add("phi.b1", b1),
                    w2: store.add("phi.w2", w2),
                    b2: store.add("phi.b2", Mat::scalar(1.0)),
                })
            }
            _ => None,
        };
        Ok(LriModel { cfg, store, encoder, head, interp_encoder, bern_head, cov_head, phi })
    }

    /// Rebuilds a model from its config and a parameter dump.
    pub fn from_checkpoint(cfg: ModelConfig, ck: &Checkpoint) -> Result<Self> {
        use rand::SeedableRng;
        let mut model = LriModel::new(cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        model.store.load_checkpoint(ck)?;
        Ok(model)
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn head(&self) -> &ClassifierHead {
        &self.head
    }

    /// Hard k-nn graph the model consumes for `cloud`.
    pub fn hard_graph(&self, cloud: &PointCloud) -> Result<SpatialGraph> {
        build_knn(cloud.coords(), self.cfg.k)
    }

    /// Current `φ` as a standalone function.
    pub fn edge_weight_fn(&self) -> EdgeWeightFn {
        match (&self.cfg.phi, &self.phi) {
            (_, Some(p)) => EdgeWeightFn::Learned {
                w1: self.store.value(p.w1).data.clone(),
                b1: self.store.value(p.b1).data.clone(),
                w2: self.store.value(p.w2).data.clone(),
                b2: self.store.value(p.b2).data[0],
            },
            (PhiKind::Analytic { length_scale }, None) => EdgeWeightFn::Analytic { length_scale: *length_scale },
            (PhiKind::Learned { .. }, None) => EdgeWeightFn::Analytic { length_scale: f64::INFINITY },
        }
    }

    /// Parameters that only the interpreter (and `φ`) own.
    pub fn interpreter_params(&self) -> Vec<bool> {
        self.store.ids().map(|id| self.store.name(id).starts_with("interp") || self.store.name(id).starts_with("phi")).collect()
    }

    /// Fresh noise for an LRI pass over `n` points.
    pub fn draw(&self, n: usize, rng: &mut ChaCha8Rng) -> Option<Draws> {
        match self.cfg.trained_method() {
            Method::LriBernoulli => Some(Draws::Uniform(
                (0..n).map(|_| rng.random::<f64>().clamp(P_CLAMP, 1.0 - P_CLAMP)).collect(),
            )),
            Method::LriGaussian => {
                let d = self.cfg.cov_dim;
                let mut normal = || Mat::from_vec(n, d, (0..n * d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect());
                let s1 = normal();
                let s2 = normal();
                Some(Draws::Normal { s1, s2 })
            }
            _ => None,
        }
    }

    fn interp_embeddings(&self, ctx: &mut Ctx, prep: &Prepared, x: Var) -> Var {
        let b = &prep.batch;
        let edge_feat = ctx.tape.constant(b.edge_features.clone());
        let inv_deg = ctx.tape.constant(b.inv_degree());
        let inp = EncoderInputs { x, edge_feat, edge_scale: None, src: b.src.clone(), dst: b.dst.clone(), inv_deg };
        self.interp_encoder.as_ref().unwrap_or(&self.encoder).forward(ctx, &inp)
    }

    /// Evaluates `phase`'s objective. `draws` of `None` gives the
    /// deterministic pass used for evaluation (`m = p`, `ε = 0`).
    pub fn forward(&self, ctx: &mut Ctx, prep: &Prepared, phase: Phase, draws: Option<&Draws>) -> Result<ForwardOut> {
        let method = self.cfg.trained_method();
        match (phase, method) {
            (Phase::Erm, _) | (_, Method::Erm | Method::GradGeo | Method::GradGam) => Ok(self.forward_erm(ctx, prep)),
            (Phase::Lri, Method::LriBernoulli) => self.forward_bernoulli(ctx, prep, draws),
            (Phase::Lri, Method::LriGaussian) => self.forward_gaussian(ctx, prep, draws),
        }
    }

    fn finish(&self, ctx: &mut Ctx, prep: &Prepared, logits: Var, kl: Option<Var>, interp: Option<InterpVars>) -> ForwardOut {
        let ce = ctx.tape.bce_logits(logits, &prep.labels);
        let loss = match kl {
            Some(kl) => {
                let reg = ctx.tape.scale(kl, self.cfg.beta);
                ctx.tape.add(ce, reg)
            }
            None => ce,
        };
        ForwardOut { logits, ce, kl, loss, interp }
    }

    /// Column that turns a per-point sum into the batch mean of per-cloud means.
    fn mean_weights(prep: &Prepared) -> Mat {
        let b = &prep.batch;
        let g = b.n_graphs as f64;
        let mut w = vec![0.0; b.n_nodes()];
        for gi in 0..b.n_graphs {
            let r = b.nodes_of(gi);
            let c = 1.0 / (r.len() as f64 * g);
            w[r].iter_mut().for_each(|v| *v = c);
        }
        Mat::column(w)
    }

    fn forward_erm(&self, ctx: &mut Ctx, prep: &Prepared) -> ForwardOut {
        let b = &prep.batch;
        let x = ctx.tape.constant(b.x.clone());
        let edge_feat = ctx.tape.constant(b.edge_features.clone());
        let inv_deg = ctx.tape.constant(b.inv_degree());
        let inp = EncoderInputs { x, edge_feat, edge_scale: None, src: b.src.clone(), dst: b.dst.clone(), inv_deg };
        let z = self.encoder.forward(ctx, &inp);
        let logits = self.head.pool_and_classify(ctx, z, None, &b.graph_of, b.n_graphs);
        self.finish(ctx, prep, logits, None, None)
    }

    fn forward_bernoulli(&self, ctx: &mut Ctx, prep: &Prepared, draws: Option<&Draws>) -> Result<ForwardOut> {
        let b = &prep.batch;
        let head = self.bern_head.as_ref().expect("Bernoulli model has a Bernoulli head");
        let x = ctx.tape.constant(b.x.clone());
        let zg = self.interp_embeddings(ctx, prep, x);
        let logit_p = head.forward(ctx, zg);
        let p = ctx.tape.sigmoid(logit_p);
        let p = ctx.tape.clamp(p, P_CLAMP, 1.0 - P_CLAMP);
        let m = match draws {
            Some(Draws::Uniform(u)) => {
                if u.len() != b.n_nodes() {
                    return config_err(format!("{} uniforms for {} points", u.len(), b.n_nodes()));
                }
                sample_mask_on_tape(&mut ctx.tape, p, self.cfg.tau, u)
            }
            Some(_) => return config_err("Bernoulli pass needs uniform draws"),
            None => p,
        };
        let edge_scale = ctx.tape.gather(m, b.src.clone());
        let edge_feat = ctx.tape.constant(b.edge_features.clone());
        let inv_deg = ctx.tape.constant(b.inv_degree());
        let inp = EncoderInputs { x, edge_feat, edge_scale: Some(edge_scale), src: b.src.clone(), dst: b.dst.clone(), inv_deg };
        let z = self.encoder.forward(ctx, &inp);
        let pool_mask = (!self.cfg.message_only).then_some(m);
        let logits = self.head.pool_and_classify(ctx, z, pool_mask, &b.graph_of, b.n_graphs);
        let kl_pt = bern_kl_on_tape(&mut ctx.tape, p, self.cfg.alpha);
        let w = ctx.tape.constant(Self::mean_weights(prep));
        let kl = ctx.tape.mul(kl_pt, w);
        let kl = ctx.tape.sum_all(kl);
        Ok(self.finish(ctx, prep, logits, Some(kl), Some(InterpVars::Bernoulli { p, m })))
    }

    fn forward_gaussian(&self, ctx: &mut Ctx, prep: &Prepared, draws: Option<&Draws>) -> Result<ForwardOut> {
        let b = &prep.batch;
        let (n, d, dc) = (b.n_nodes(), self.cfg.coord_dim, self.cfg.cov_dim);
        let head = self.cov_head.as_ref().expect("Gaussian model has a covariance head");
        let x = ctx.tape.constant(b.x.clone());
        let zg = self.interp_embeddings(ctx, prep, x);
        let out = head.forward(ctx, zg);
        let u = ctx.tape.slice_cols(out, 0, dc * dc);
        let scale = |col: usize, ctx: &mut Ctx| {
            let s = ctx.tape.slice_cols(out, col, col + 1);
            let s = ctx.tape.softplus(s);
            ctx.tape.clamp(s, SCALE_MIN, SCALE_MAX)
        };
        let a1 = scale(dc * dc, ctx);
        let a2 = scale(dc * dc + 1, ctx);
        let (s1, s2) = match draws {
            Some(Draws::Normal { s1, s2 }) => {
                if s1.shape() != (n, dc) || s2.shape() != (n, dc) {
                    return config_err(format!("normal draws of shape {:?} for {n} points in {dc}-D", s1.shape()));
                }
                (s1.clone(), s2.clone())
            }
            Some(_) => return config_err("Gaussian pass needs normal draws"),
            None => (Mat::zeros(n, dc), Mat::zeros(n, dc)),
        };
        let s1 = ctx.tape.constant(s1);
        let s2 = ctx.tape.constant(s2);
        let mut eps = perturbation_on_tape(&mut ctx.tape, u, a1, a2, s1, s2);
        if dc < d {
            let pad = ctx.tape.constant(Mat::zeros(n, d - dc));
            eps = ctx.tape.concat_cols(&[eps, pad]);
        }
        let r = ctx.tape.constant(b.coords.clone());
        let rt = ctx.tape.add(r, eps);
        let (src, dst) = if self.cfg.soft_graph {
            let coords = ctx.tape.value(rt).clone();
            let (mut src, mut dst) = (Vec::new(), Vec::new());
            for gi in 0..b.n_graphs {
                let range = b.nodes_of(gi);
                let off = range.start;
                let local = coords.select_rows(&range.collect::<Vec<_>>());
                let (s, t) = soft_topology(&local, self.cfg.k, self.cfg.expansion)?;
                src.extend(s.into_iter().map(|v| v + off));
                dst.extend(t.into_iter().map(|v| v + off));
            }
            (Arc::new(src), Arc::new(dst))
        } else {
            (b.src.clone(), b.dst.clone())
        };
        let edge_feat = ctx.tape.edge_geom(rt, src.clone(), dst.clone());
        let dist = ctx.tape.slice_cols(edge_feat, 0, 1);
        let w = match &self.phi {
            Some(p) => {
                let (w1, b1, w2, b2) = (ctx.p(p.w1), ctx.p(p.b1), ctx.p(p.w2), ctx.p(p.b2));
                learned_phi(&mut ctx.tape, dist, w1, b1, w2, b2)
            }
            None => self.edge_weight_fn().on_tape(&mut ctx.tape, dist),
        };
        let inv_deg = ctx.tape.constant(crate::backbone::inv_degree(&dst, n));
        let inp = EncoderInputs { x, edge_feat, edge_scale: Some(w), src, dst, inv_deg };
        let z = self.encoder.forward(ctx, &inp);
        let logits = self.head.pool_and_classify(ctx, z, None, &b.graph_of, b.n_graphs);
        let kl_pt = ctx.tape.gauss_kl(u, a1, a2);
        let wm = ctx.tape.constant(Self::mean_weights(prep));
        let kl = ctx.tape.mul(kl_pt, wm);
        let kl = ctx.tape.sum_all(kl);
        Ok(self.finish(ctx, prep, logits, Some(kl), Some(InterpVars::Gaussian { u, a1, a2, eps })))
    }

    /// Deterministic logits of many clouds, evaluated `batch` at a time.
    pub fn predict(&self, clouds: &[&PointCloud], graphs: &[&SpatialGraph], phase: Phase, batch: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(clouds.len());
        for (cs, gs) in clouds.chunks(batch.max(1)).zip(graphs.chunks(batch.max(1))) {
            let items: Vec<_> = cs.iter().copied().zip(gs.iter().copied()).collect();
            let prep = Prepared::new(&items, vec![0.0; cs.len()]);
            let mut ctx = Ctx::new(&self.store, false, None);
            let f = self.forward(&mut ctx, &prep, phase, None)?;
            out.extend_from_slice(&ctx.tape.value(f.logits).data);
        }
        Ok(out)
    }

    /// Deterministic interpreter output for one cloud.
    pub fn interpret(&self, cloud: &PointCloud, graph: &SpatialGraph) -> Result<Interpretation> {
        let prep = Prepared::new(&[(cloud, graph)], vec![0.0]);
        let mut ctx = Ctx::new(&self.store, false, None);
        let f = self.forward(&mut ctx, &prep, Phase::Lri, None)?;
        match f.interp {
            Some(InterpVars::Bernoulli { p, .. }) => {
                let p = ctx.tape.value(p).data.clone();
                Ok(Interpretation::Bernoulli(BernoulliInterpretation {
                    m: p.clone(),
                    p,
                    alpha: self.cfg.alpha,
                    tau: self.cfg.tau,
                }))
            }
            Some(InterpVars::Gaussian { u, a1, a2, .. }) => {
                let (u, a1, a2) = (ctx.tape.value(u), ctx.tape.value(a1), ctx.tape.value(a2));
                let points = (0..cloud.n())
                    .map(|v| PointCovariance { u: u.row(v).to_vec(), a1: a1.data[v], a2: a2.data[v], dim: self.cfg.cov_dim })
                    .collect();
                Ok(Interpretation::Gaussian(GaussianInterpretation::from_points(points)))
            }
            None => config_err(format!("{} has no interpreter", self.cfg.method)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Interpretation {
    Bernoulli(BernoulliInterpretation),
    Gaussian(GaussianInterpretation),
}

impl Interpretation {
    pub fn scores(&self) -> Vec<f64> {
        match self {
            Interpretation::Bernoulli(b) => crate::bernoulli::rank_existence(&b.p),
            Interpretation::Gaussian(g) => g.scores.clone(),
        }
    }
}

/// Default neighbor budget of the soft graph for a config.
pub fn soft_k(cfg: &ModelConfig) -> usize {
    expanded_k(cfg.k, cfg.expansion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    pub(crate) fn cfg(method: Method) -> ModelConfig {
        ModelConfig {
            method,
            in_dim: 1,
            coord_dim: 3,
            hidden: 8,
            layers: 2,
            dropout: 0.0,
            aggregation: Aggregation::Mean,
            k: 3,
            expansion: 1.5,
            beta: 0.5,
            alpha: 0.7,
            tau: 1.0,
            share_encoder: true,
            message_only: false,
            soft_graph: true,
            cov_dim: 3,
            phi: PhiKind::Learned { hidden: 4 },
        }
    }

    fn cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(None, Mat::from_vec(n, 3, (0..3 * n).map(|_| rng.random_range(-1.0..1.0)).collect()), 1.0).unwrap()
    }

    #[test]
    fn loss_is_ce_plus_beta_kl() {
        for method in [Method::LriBernoulli, Method::LriGaussian] {
            let mut rng = ChaCha8Rng::seed_from_u64(3);
            let model = LriModel::new(cfg(method), &mut rng).unwrap();
            let (c1, c2) = (cloud(1, 7), cloud(2, 9));
            let (g1, g2) = (model.hard_graph(&c1).unwrap(), model.hard_graph(&c2).unwrap());
            let prep = Prepared::new(&[(&c1, &g1), (&c2, &g2)], vec![1.0, 0.0]);
            let draws = model.draw(16, &mut rng).unwrap();
            let mut ctx = Ctx::new(&model.store, false, None);
            let f = model.forward(&mut ctx, &prep, Phase::Lri, Some(&draws)).unwrap();
            let (ce, kl, loss) = (ctx.tape.scalar(f.ce), ctx.tape.scalar(f.kl.unwrap()), ctx.tape.scalar(f.loss));
            assert_eq!(loss, ce + 0.5 * kl);
            assert!(ce >= 0.0 && kl >= 0.0);
        }
    }

    #[test]
    fn batched_logits_match_single() {
        for method in [Method::Erm, Method::LriBernoulli, Method::LriGaussian] {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let model = LriModel::new(cfg(method), &mut rng).unwrap();
            let cs = [cloud(1, 7), cloud(2, 9), cloud(3, 5)];
            let gs: Vec<_> = cs.iter().map(|c| model.hard_graph(c).unwrap()).collect();
            let cr: Vec<_> = cs.iter().collect();
            let gr: Vec<_> = gs.iter().collect();
            let all = model.predict(&cr, &gr, Phase::Lri, 3).unwrap();
            let one = model.predict(&cr, &gr, Phase::Lri, 1).unwrap();
            for (a, b) in all.iter().zip(&one) {
                assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()));
            }
        }
    }

    #[test]
    fn zero_bernoulli_head_gives_half() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut model = LriModel::new(cfg(Method::LriBernoulli), &mut rng).unwrap();
        let ids: Vec<_> = model.store.ids().filter(|&id| model.store.name(id).starts_with("interp.bern.l2")).collect();
        for id in ids {
            model.store.value_mut(id).data.iter_mut().for_each(|v| *v = 0.0);
        }
        let c = cloud(4, 6);
        let g = model.hard_graph(&c).unwrap();
        let Interpretation::Bernoulli(b) = model.interpret(&c, &g).unwrap() else { panic!() };
        assert!(b.p.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn ablation_flag_noop_without_noise() {
        let mut c = cfg(Method::LriGaussian);
        c.expansion = 1.0;
        c.phi = PhiKind::Analytic { length_scale: 1e12 };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let soft = LriModel::new(c.clone(), &mut rng).unwrap();
        let mut hard = soft.clone();
        hard.cfg.soft_graph = false;
        let cl = cloud(6, 8);
        let g = soft.hard_graph(&cl).unwrap();
        let a = soft.predict(&[&cl], &[&g], Phase::Lri, 1).unwrap();
        let b = hard.predict(&[&cl], &[&g], Phase::Lri, 1).unwrap();
        assert_eq!(a, b);
    }
}
