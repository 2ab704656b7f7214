//! Distance-scalar message passing encoder with sum pooling and a binary
//! classification head.
//!
//! Each layer computes, for every edge `u → v`,
//! `msg = relu(z_u·W + edge(‖r_v − r_u‖, unit displacement))`, scales it by
//! the edge weight and the sender's mask, aggregates at `v` and updates
//! `z_v ← z_v + dropout(relu(bn(U·[z_v, agg])))`.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::cloud::PointCloud;
use crate::graph::SpatialGraph;
use crate::nn::{BatchNorm, Ctx, Linear, ParamId, ParamStore};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    Sum,
    Mean,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub in_dim: usize,
    pub coord_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub aggregation: Aggregation,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct MpLayer {
    sender: ParamId,
    edge: Linear,
    update: Linear,
    bn: BatchNorm,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    embed: Linear,
    layers: Vec<MpLayer>,
}

/// Tape-side inputs of one encoder pass over a (batched) graph.
pub struct EncoderInputs {
    pub x: Var,
    /// `E × (1 + D)` edge features.
    pub edge_feat: Var,
    /// Optional `E × 1` multiplier on each message (edge weight × sender mask).
    pub edge_scale: Option<Var>,
    pub src: Arc<Vec<usize>>,
    pub dst: Arc<Vec<usize>>,
    /// `N × 1` reciprocal in-degree, used by mean aggregation.
    pub inv_deg: Var,
}

impl Encoder {
    pub fn new(store: &mut ParamStore, name: &str, cfg: EncoderConfig, rng: &mut ChaCha8Rng) -> Self {
        assert!(cfg.layers >= 1, "encoder needs at least one layer");
        let h = cfg.hidden;
        let embed = Linear::new(store, &format!("{name}.embed"), cfg.in_dim, h, rng);
        let layers = (0..cfg.layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                let bound = 1.0 / (h as f64).sqrt();
                let w = Mat::from_vec(h, h, (0..h * h).map(|_| rng.random_range(-bound..bound)).collect());
                MpLayer {
                    sender: store.add(format!("{p}.sender"), w),
                    edge: Linear::new(store, &format!("{p}.edge"), 1 + cfg.coord_dim, h, rng),
                    update: Linear::new(store, &format!("{p}.update"), 2 * h, h, rng),
                    bn: BatchNorm::new(store, &format!("{p}.bn"), h),
                }
            })
            .collect();
        Encoder { cfg, embed, layers }
    }

    /// Per-point embeddings `N × hidden`.
    pub fn forward(&self, ctx: &mut Ctx, inp: &EncoderInputs) -> Var {
        let n = ctx.tape.value(inp.x).rows;
        let h0 = self.embed.forward(ctx, inp.x);
        let mut z = ctx.tape.relu(h0);
        for layer in &self.layers {
            let w = ctx.p(layer.sender);
            let a = ctx.tape.matmul(z, w);
            let a = ctx.tape.gather(a, inp.src.clone());
            let e = layer.edge.forward(ctx, inp.edge_feat);
            let pre = ctx.tape.add(a, e);
            let mut msg = ctx.tape.relu(pre);
            if let Some(s) = inp.edge_scale {
                msg = ctx.tape.mul_col(msg, s);
            }
            let mut agg = ctx.tape.scatter_add(msg, inp.dst.clone(), n);
            if self.cfg.aggregation == Aggregation::Mean {
                agg = ctx.tape.mul_col(agg, inp.inv_deg);
            }
            let cat = ctx.tape.concat_cols(&[z, agg]);
            let u = layer.update.forward(ctx, cat);
            let u = ctx.batch_norm(u, &layer.bn);
            let u = ctx.tape.relu(u);
            let u = ctx.dropout(u, self.cfg.dropout);
            z = ctx.tape.add(z, u);
        }
        z
    }
}

/// Sum pooling followed by a two-layer MLP (with batch normalization)
/// producing one logit per cloud.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifierHead {
    l1: Linear,
    bn: BatchNorm,
    l2: Linear,
    dropout: f64,
}

impl ClassifierHead {
    pub fn new(store: &mut ParamStore, name: &str, hidden: usize, dropout: f64, rng: &mut ChaCha8Rng) -> Self {
        ClassifierHead {
            l1: Linear::new(store, &format!("{name}.l1"), hidden, hidden, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), hidden),
            l2: Linear::new(store, &format!("{name}.l2"), hidden, 1, rng),
            dropout,
        }
    }

    pub fn final_layer(&self) -> &Linear {
        &self.l2
    }

    /// `Σ_v m_v·z_v` per cloud.
    pub fn pool(&self, ctx: &mut Ctx, z: Var, mask: Option<Var>, graph_of: &Arc<Vec<usize>>, n_graphs: usize) -> Var {
        let zm = match mask {
            Some(m) => ctx.tape.mul_col(z, m),
            None => z,
        };
        ctx.tape.scatter_add(zm, graph_of.clone(), n_graphs)
    }

    pub fn classify(&self, ctx: &mut Ctx, pooled: Var) -> Var {
        let h = self.l1.forward(ctx, pooled);
        let h = ctx.batch_norm(h, &self.bn);
        let h = ctx.tape.relu(h);
        let h = ctx.dropout(h, self.dropout);
        self.l2.forward(ctx, h)
    }

    pub fn pool_and_classify(&self, ctx: &mut Ctx, z: Var, mask: Option<Var>, graph_of: &Arc<Vec<usize>>, n_graphs: usize) -> Var {
        let pooled = self.pool(ctx, z, mask, graph_of, n_graphs);
        self.classify(ctx, pooled)
    }
}

/// Disjoint union of several clouds with their graphs.
#[derive(Clone, Debug)]
pub struct GraphBatch {
    pub n_graphs: usize,
    pub x: Mat,
    pub coords: Mat,
    pub src: Arc<Vec<usize>>,
    pub dst: Arc<Vec<usize>>,
    pub edge_features: Mat,
    pub edge_weights: Vec<f64>,
    pub graph_of: Arc<Vec<usize>>,
    pub offsets: Vec<usize>,
}

impl GraphBatch {
    pub fn new(items: &[(&PointCloud, &SpatialGraph)]) -> Self {
        let n_nodes: usize = items.iter().map(|(c, _)| c.n()).sum();
        let n_edges: usize = items.iter().map(|(_, g)| g.num_edges()).sum();
        let (fd, cd) = (items[0].0.feature_dim(), items[0].0.dim());
        let mut x = Vec::with_capacity(n_nodes * fd);
        let mut coords = Vec::with_capacity(n_nodes * cd);
        let mut src = Vec::with_capacity(n_edges);
        let mut dst = Vec::with_capacity(n_edges);
        let mut ef = Vec::with_capacity(n_edges * (1 + cd));
        let mut ew = Vec::with_capacity(n_edges);
        let mut graph_of = Vec::with_capacity(n_nodes);
        let mut offsets = Vec::with_capacity(items.len());
        let mut off = 0;
        for (gi, (c, g)) in items.iter().enumerate() {
            assert_eq!(c.n(), g.n, "graph built over a different cloud");
            offsets.push(off);
            x.extend_from_slice(&c.features().data);
            coords.extend_from_slice(&c.coords().data);
            src.extend(g.src.iter().map(|&s| s + off));
            dst.extend(g.dst.iter().map(|&d| d + off));
            ef.extend_from_slice(&g.features.data);
            ew.extend_from_slice(&g.weights);
            graph_of.extend(std::iter::repeat_n(gi, c.n()));
            off += c.n();
        }
        GraphBatch {
            n_graphs: items.len(),
            x: Mat::from_vec(n_nodes, fd, x),
            coords: Mat::from_vec(n_nodes, cd, coords),
            src: Arc::new(src),
            dst: Arc::new(dst),
            edge_features: Mat::from_vec(n_edges, 1 + cd, ef),
            edge_weights: ew,
            graph_of: Arc::new(graph_of),
            offsets,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.x.rows
    }

    pub fn inv_degree(&self) -> Mat {
        inv_degree(&self.dst, self.n_nodes())
    }

    /// Range of node rows belonging to cloud `g`.
    pub fn nodes_of(&self, g: usize) -> std::ops::Range<usize> {
        let end = self.offsets.get(g + 1).copied().unwrap_or(self.n_nodes());
        self.offsets[g]..end
    }
}

pub fn inv_degree(dst: &[usize], n: usize) -> Mat {
    let mut deg = vec![0.0; n];
    for &d in dst {
        deg[d] += 1.0;
    }
    Mat::column(deg.into_iter().map(|d| if d > 0.0 { 1.0 / d } else { 0.0 }).collect())
}

/// Which scalar [`input_gradients`] differentiates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradTarget {
    /// Logit of the predicted class (negated logit when predicting 0).
    Logit,
    /// Binary cross-entropy against the sample's label.
    Loss,
}

#[derive(Clone, Debug)]
pub struct InputGradients {
    pub logit: f64,
    /// `n × D`.
    pub coords: Mat,
    /// Final-layer embeddings `n × hidden`.
    pub embeddings: Mat,
    /// Gradient with respect to the embeddings.
    pub embedding_grads: Mat,
}

/// Exact gradients of a trained classifier's output with respect to the
/// coordinates (through the hard graph's edge features, topology held
/// fixed) and the final embeddings. Dropout is off and normalization uses
/// running statistics.
pub fn input_gradients(
    store: &ParamStore,
    encoder: &Encoder,
    head: &ClassifierHead,
    cloud: &PointCloud,
    graph: &SpatialGraph,
    label: u8,
    target: GradTarget,
) -> InputGradients {
    let mut ctx = Ctx::new(store, false, None);
    let coords = ctx.tape.leaf(cloud.coords().clone());
    let x = ctx.tape.constant(cloud.features().clone());
    let edge_feat = ctx.tape.edge_geom(coords, graph.src.clone(), graph.dst.clone());
    let inv_deg = ctx.tape.constant(inv_degree(&graph.dst, cloud.n()));
    let weights = ctx.tape.constant(Mat::column(graph.weights.clone()));
    let inp = EncoderInputs { x, edge_feat, edge_scale: Some(weights), src: graph.src.clone(), dst: graph.dst.clone(), inv_deg };
    let z = encoder.forward(&mut ctx, &inp);
    let graph_of = Arc::new(vec![0; cloud.n()]);
    let logit = head.pool_and_classify(&mut ctx, z, None, &graph_of, 1);
    let logit_value = ctx.tape.scalar(logit);
    let out = match target {
        GradTarget::Logit if logit_value < 0.0 => ctx.tape.scale(logit, -1.0),
        GradTarget::Logit => logit,
        GradTarget::Loss => ctx.tape.bce_logits(logit, &[label as f64]),
    };
    let grads = ctx.tape.backward(out);
    let d = cloud.dim();
    InputGradients {
        logit: logit_value,
        coords: grads.get_or_zeros(coords, cloud.n(), d),
        embeddings: ctx.tape.value(z).clone(),
        embedding_grads: grads.get_or_zeros(z, cloud.n(), encoder.cfg.hidden),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_knn;
    use rand::SeedableRng;

    fn setup(agg: Aggregation) -> (ParamStore, Encoder, ClassifierHead) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let cfg = EncoderConfig { in_dim: 1, coord_dim: 3, hidden: 8, layers: 2, dropout: 0.0, aggregation: agg };
        let enc = Encoder::new(&mut store, "enc", cfg, &mut rng);
        let head = ClassifierHead::new(&mut store, "head", 8, 0.0, &mut rng);
        (store, enc, head)
    }

    fn cloud(seed: u64, n: usize) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let r = Mat::from_vec(n, 3, (0..n * 3).map(|_| rng.random_range(-1.0..1.0)).collect());
        PointCloud::new(None, r, 1.0).unwrap()
    }

    fn embed(store: &ParamStore, enc: &Encoder, c: &PointCloud, g: &SpatialGraph, mask: Option<&[f64]>) -> Mat {
        let mut ctx = Ctx::new(store, false, None);
        let x = ctx.tape.constant(c.features().clone());
        let edge_feat = ctx.tape.constant(g.features.clone());
        let inv_deg = ctx.tape.constant(inv_degree(&g.dst, c.n()));
        let edge_scale = mask.map(|m| ctx.tape.constant(Mat::column(g.src.iter().map(|&s| m[s]).collect())));
        let inp = EncoderInputs { x, edge_feat, edge_scale, src: g.src.clone(), dst: g.dst.clone(), inv_deg };
        let z = enc.forward(&mut ctx, &inp);
        ctx.tape.value(z).clone()
    }

    #[test]
    fn neutral_mask_matches_unmasked() {
        let (store, enc, _) = setup(Aggregation::Mean);
        let c = cloud(1, 9);
        let g = build_knn(c.coords(), 3).unwrap();
        let a = embed(&store, &enc, &c, &g, None);
        let b = embed(&store, &enc, &c, &g, Some(&[1.0; 9]));
        assert_eq!(a, b);
    }

    #[test]
    fn zero_mask_leaves_only_self_path() {
        let (store, enc, _) = setup(Aggregation::Sum);
        let c = cloud(2, 7);
        let g = build_knn(c.coords(), 3).unwrap();
        let z = embed(&store, &enc, &c, &g, Some(&[0.0; 7]));
        // every point has the same features, so with no messages all rows agree
        for r in 1..7 {
            for k in 0..8 {
                assert!((z.get(r, k) - z.get(0, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let (store, enc, _) = setup(Aggregation::Mean);
        let c = cloud(3, 10);
        let perm: Vec<usize> = vec![3, 7, 1, 0, 9, 2, 8, 5, 4, 6];
        let cp = c.permuted(&perm);
        let z = embed(&store, &enc, &c, &build_knn(c.coords(), 3).unwrap(), None);
        let zp = embed(&store, &enc, &cp, &build_knn(cp.coords(), 3).unwrap(), None);
        for (i, &p) in perm.iter().enumerate() {
            for k in 0..8 {
                assert!((zp.get(i, k) - z.get(p, k)).abs() <= 1e-9 * (1.0 + z.get(p, k).abs()));
            }
        }
    }

    #[test]
    fn translation_gradients_sum_to_zero() {
        let (store, enc, head) = setup(Aggregation::Mean);
        let c = cloud(4, 8);
        let g = build_knn(c.coords(), 3).unwrap();
        let ig = input_gradients(&store, &enc, &head, &c, &g, 1, GradTarget::Logit);
        for k in 0..3 {
            let s: f64 = (0..8).map(|i| ig.coords.get(i, k)).sum();
            assert!(s.abs() < 1e-10, "net gradient {s}");
        }
    }
}
