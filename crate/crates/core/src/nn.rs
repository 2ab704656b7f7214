//! Parameters, layers and the Adam optimizer on top of the tape.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{BatchStats, Grads, Tape, Var};
use crate::error::{LriError, Result};
use crate::tensor::Mat;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BnId(pub usize);

/// Named trainable arrays plus batch-normalization running statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    bn: Vec<RunningStats>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_MOMENTUM: f64 = 0.1;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Mat) -> ParamId {
        self.names.push(name.into());
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn add_bn(&mut self, name: impl Into<String>, width: usize) -> BnId {
        self.bn.push(RunningStats { name: name.into(), mean: vec![0.0; width], var: vec![1.0; width] });
        BnId(self.bn.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn running(&self, id: BnId) -> &RunningStats {
        &self.bn[id.0]
    }

    pub fn update_running(&mut self, id: BnId, stats: &BatchStats, n: usize) {
        let rs = &mut self.bn[id.0];
        let unbias = if n > 1 { n as f64 / (n as f64 - 1.0) } else { 1.0 };
        for j in 0..rs.mean.len() {
            rs.mean[j] = (1.0 - BN_MOMENTUM) * rs.mean[j] + BN_MOMENTUM * stats.mean[j];
            rs.var[j] = (1.0 - BN_MOMENTUM) * rs.var[j] + BN_MOMENTUM * stats.var[j] * unbias;
        }
    }

    pub fn set_running(&mut self, id: BnId, mean: Vec<f64>, var: Vec<f64>) {
        let rs = &mut self.bn[id.0];
        assert!(mean.len() == rs.mean.len() && var.len() == rs.var.len(), "running statistic width mismatch");
        rs.mean = mean;
        rs.var = var;
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|m| m.data.len()).sum()
    }

    /// Order-sensitive digest of every parameter bit and running statistic.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |v: f64| {
            h ^= v.to_bits();
            h = h.wrapping_mul(0x100000001b3);
        };
        for m in &self.values {
            m.data.iter().for_each(|&v| mix(v));
        }
        for b in &self.bn {
            b.mean.iter().chain(&b.var).for_each(|&v| mix(v));
        }
        h
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            params: self.names.iter().cloned().zip(self.values.iter().cloned()).collect(),
            running: self.bn.clone(),
        }
    }

    /// Loads values into a store with identical layout.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint) -> Result<()> {
        for (name, value) in self.names.iter().zip(self.values.iter_mut()) {
            let v = ck
                .params
                .get(name)
                .ok_or_else(|| LriError::Config(format!("checkpoint lacks parameter {name}")))?;
            if v.shape() != value.shape() {
                return Err(LriError::Config(format!("parameter {name}: shape {:?} vs {:?}", v.shape(), value.shape())));
            }
            *value = v.clone();
        }
        for rs in self.bn.iter_mut() {
            let v = ck
                .running
                .iter()
                .find(|r| r.name == rs.name)
                .ok_or_else(|| LriError::Config(format!("checkpoint lacks statistics {}", rs.name)))?;
            *rs = v.clone();
        }
        Ok(())
    }
}

/// Self-describing parameter dump with named arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub params: BTreeMap<String, Mat>,
    pub running: Vec<RunningStats>,
}

/// One forward pass: a tape with every parameter bound as a leaf.
pub struct Ctx<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    params: Vec<Var>,
    pub train: bool,
    dropout_rng: Option<&'a mut ChaCha8Rng>,
    pub bn_updates: Vec<(BnId, BatchStats, usize)>,
}

impl<'a> Ctx<'a> {
    pub fn new(store: &'a ParamStore, train: bool, dropout_rng: Option<&'a mut ChaCha8Rng>) -> Self {
        let mut tape = Tape::new();
        let params = store.values.iter().map(|v| tape.leaf(v.clone())).collect();
        Ctx { tape, store, params, train, dropout_rng, bn_updates: Vec::new() }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id.0]
    }

    /// Gradients of every parameter, in store order.
    pub fn param_grads(&self, grads: &Grads) -> Vec<Mat> {
        self.store
            .values
            .iter()
            .zip(&self.params)
            .map(|(v, &var)| grads.get_or_zeros(var, v.rows, v.cols))
            .collect()
    }

    /// Which parameters the output actually depends on.
    pub fn reached(&self, grads: &Grads) -> Vec<bool> {
        self.params.iter().map(|&v| grads.get(v).is_some()).collect()
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        if !self.train || rate <= 0.0 {
            return x;
        }
        let Some(rng) = self.dropout_rng.as_deref_mut() else { return x };
        let (r, c) = self.tape.value(x).shape();
        let keep = 1.0 - rate;
        let mask = (0..r * c).map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 }).collect();
        let m = self.tape.constant(Mat::from_vec(r, c, mask));
        self.tape.mul(x, m)
    }

    pub fn batch_norm(&mut self, x: Var, bn: &BatchNorm) -> Var {
        let (gamma, beta) = (self.p(bn.gamma), self.p(bn.beta));
        let n = self.tape.value(x).rows;
        if self.train && n > 1 {
            let (out, stats) = self.tape.batch_norm_train(x, gamma, beta);
            self.bn_updates.push((bn.running, stats, n));
            out
        } else {
            let rs = self.store.running(bn.running);
            let c = rs.mean.len();
            let scale: Vec<f64> = rs.var.iter().map(|v| 1.0 / (v + crate::autodiff::BN_EPS).sqrt()).collect();
            let shift: Vec<f64> = rs.mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
            let s = self.tape.constant(Mat::from_vec(1, c, scale));
            let t = self.tape.constant(Mat::from_vec(1, c, shift));
            let ones = self.tape.constant(Mat::filled(n, 1, 1.0));
            // x·s + t, then γ·(…) + β, broadcast over rows
            let srow = self.tape.matmul(ones, s);
            let xs = self.tape.mul(x, srow);
            let xhat = self.tape.add_row(xs, t);
            let grow = self.tape.matmul(ones, gamma);
            let y = self.tape.mul(xhat, grow);
            self.tape.add_row(y, beta)
        }
    }

    /// Applies the collected running-statistic updates to `store`.
    pub fn take_bn_updates(&mut self) -> Vec<(BnId, BatchStats, usize)> {
        std::mem::take(&mut self.bn_updates)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let w = Mat::from_vec(fan_in, fan_out, (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect());
        let b = Mat::from_vec(1, fan_out, (0..fan_out).map(|_| rng.random_range(-bound..bound)).collect());
        Linear { w: store.add(format!("{name}.w"), w), b: store.add(format!("{name}.b"), b) }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        Linear {
            w: store.add(format!("{name}.w"), Mat::zeros(fan_in, fan_out)),
            b: store.add(format!("{name}.b"), Mat::zeros(1, fan_out)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let (w, b) = (ctx.p(self.w), ctx.p(self.b));
        let y = ctx.tape.matmul(x, w);
        ctx.tape.add_row(y, b)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running: BnId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Mat::filled(1, width, 1.0)),
            beta: store.add(format!("{name}.beta"), Mat::zeros(1, width)),
            running: store.add_bn(name, width),
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Mat>,
    v: Vec<Mat>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Mat> = store.values.iter().map(|v| Mat::zeros(v.rows, v.cols)).collect();
        Adam { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    /// Updates the parameters listed in `active` (all when `None`).
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Mat], active: Option<&[bool]>) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            if active.is_some_and(|a| !a[i]) {
                continue;
            }
            let p = &mut store.values[i];
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.data.len() {
                let gj = g.data[j] + self.weight_decay * p.data[j];
                m.data[j] = self.beta1 * m.data[j] + (1.0 - self.beta1) * gj;
                v.data[j] = self.beta2 * v.data[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m.data[j] / bc1;
                let vh = v.data[j] / bc2;
                p.data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn adam_minimizes_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Mat::from_vec(1, 2, vec![3.0, -2.0]));
        let mut adam = Adam::new(&store, 0.1, 0.0);
        for _ in 0..500 {
            let g = vec![store.value(id).map(|x| 2.0 * x)];
            adam.step(&mut store, &g, None);
        }
        assert!(store.value(id).data.iter().all(|v| v.abs() < 1e-2));
    }

    #[test]
    fn eval_batch_norm_matches_formula() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        store.bn[0].mean = vec![1.0, -1.0];
        store.bn[0].var = vec![4.0, 0.25];
        let mut ctx = Ctx::new(&store, false, None);
        let x = ctx.tape.constant(Mat::from_rows(&[vec![3.0, 0.0]]));
        let y = ctx.batch_norm(x, &bn);
        let v = ctx.tape.value(y);
        assert!((v.data[0] - 2.0 / (4.0f64 + 1e-5).sqrt()).abs() < 1e-12);
        assert!((v.data[1] - 1.0 / (0.25f64 + 1e-5).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        Linear::new(&mut store, "l", 4, 3, &mut rng);
        BatchNorm::new(&mut store, "bn", 3);
        let ck = store.to_checkpoint();
        let text = serde_json::to_string(&ck).unwrap();
        let back: Checkpoint = serde_json::from_str(&text).unwrap();
        let mut other = store.clone();
        other.values.iter_mut().for_each(|m| m.data.iter_mut().for_each(|v| *v = 0.0));
        other.load_checkpoint(&back).unwrap();
        assert_eq!(other.fingerprint(), store.fingerprint());
    }
}
