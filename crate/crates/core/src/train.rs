//! Experiment configuration, the training loop and persisted run records.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::analysis::{FieldFit, FineGrainedRow};
use crate::backbone::Aggregation;
use crate::cloud::{choose_rescale_constant, PointCloud, Sample};
use crate::error::{config_err, data_err, LriError, Result};
use crate::eval::{roc_auc, InterpretationMetrics};
use crate::graph::SpatialGraph;
use crate::model::{LriModel, Method, ModelConfig, Phase, PhiKind, Prepared};
use crate::nn::{Adam, BnId, Checkpoint, Ctx};
use crate::rng::stream;
use crate::synth::Splits;

/// Every knob of a run. Defaults follow the desk-scale protocol.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub method: Method,
    pub k: usize,
    pub layers: usize,
    pub hidden_size: usize,
    pub dropout: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub beta: f64,
    pub alpha: f64,
    pub tau: f64,
    /// Coordinate scale; `None` picks it from the training split.
    pub rescale_c: Option<f64>,
    /// Percentile of `|r|` mapped to 1 when `rescale_c` is unset.
    pub rescale_percentile: f64,
    pub expansion: f64,
    pub seed: u64,
    pub aggregation: Aggregation,
    pub soft_graph: bool,
    pub share_encoder: bool,
    pub message_only: bool,
    /// Covariance dimension; 0 uses the coordinate dimension.
    pub cov_dim: usize,
    /// `learned` or `analytic`.
    pub phi: String,
    pub phi_hidden: usize,
    pub phi_length_scale: f64,
    pub split_ratios: [f64; 3],
    pub eval_batch_size: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            method: Method::LriGaussian,
            k: 5,
            layers: 4,
            hidden_size: 64,
            dropout: 0.2,
            epochs: 60,
            pretrain_epochs: 40,
            lr: 1e-3,
            weight_decay: 0.0,
            batch_size: 32,
            beta: 1.0,
            alpha: 0.5,
            tau: 1.0,
            rescale_c: None,
            rescale_percentile: 10.0,
            expansion: 1.5,
            seed: 0,
            aggregation: Aggregation::Mean,
            soft_graph: true,
            share_encoder: true,
            message_only: false,
            cov_dim: 0,
            phi: "learned".into(),
            phi_hidden: 8,
            phi_length_scale: 1.0,
            split_ratios: [0.7, 0.15, 0.15],
            eval_batch_size: 64,
        }
    }
}

fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match raw {
        "auto" | "none" => Value::Null,
        _ => serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.trim_matches('"').to_string())),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.eval_batch_size == 0 {
            return config_err("epochs and batch sizes must be positive");
        }
        if self.method.is_lri() && self.pretrain_epochs >= self.epochs {
            return config_err(format!("pretraining ({}) leaves no joint epochs out of {}", self.pretrain_epochs, self.epochs));
        }
        if !(self.beta > 0.0) || !(self.tau > 0.0) || !(0.5..1.0).contains(&self.alpha) {
            return config_err(format!("need beta > 0, tau > 0 and alpha in [0.5, 1); got {}, {}, {}", self.beta, self.tau, self.alpha));
        }
        if !(self.expansion >= 1.0) || !(0.0..1.0).contains(&self.dropout) || self.k == 0 || self.layers == 0 {
            return config_err("need expansion ≥ 1, dropout in [0, 1), k ≥ 1 and at least one layer");
        }
        let r = self.split_ratios;
        if r.iter().any(|&x| !(x >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return config_err(format!("split ratios must be nonnegative and sum to 1, got {r:?}"));
        }
        if !(self.lr > 0.0) || self.weight_decay < 0.0 {
            return config_err("learning rate must be positive and weight decay nonnegative");
        }
        if self.rescale_c.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return config_err("rescale constant must be positive");
        }
        if !(self.rescale_percentile > 0.0 && self.rescale_percentile < 100.0) {
            return config_err("rescale percentile must lie in (0, 100)");
        }
        if self.phi != "learned" && self.phi != "analytic" {
            return config_err(format!("phi must be learned or analytic, got {:?}", self.phi));
        }
        if self.phi == "analytic" && !(self.phi_length_scale > 0.0) {
            return config_err("analytic phi needs a positive length scale");
        }
        Ok(())
    }

    /// `key = value` pairs of a config text (blank lines and `#` comments
    /// ignored).
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(LriError::Parse { line: i + 1, msg: format!("expected key = value, got {line:?}") });
            };
            pairs.push((k.trim().to_string(), v.to_string()));
        }
        Ok(pairs)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let pairs = Self::parse_pairs(text)?;
        self.apply_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))
    }

    /// Applies overrides such as those given on a command line.
    pub fn apply_pairs<'a>(&mut self, pairs: impl IntoIterator<Item = (&'a str, &'a str)>) -> Result<()> {
        let Value::Object(mut map) = serde_json::to_value(&*self)? else { unreachable!("config serializes to an object") };
        for (k, v) in pairs {
            if !map.contains_key(k) {
                return config_err(format!("unknown config key {k:?}"));
            }
            map.insert(k.to_string(), parse_value(v));
        }
        *self = serde_json::from_value(Value::Object(map)).map_err(|e| LriError::Config(e.to_string()))?;
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = ExperimentConfig::default();
        c.apply_text(text)?;
        Ok(c)
    }

    /// `key = value` lines that [`ExperimentConfig::from_text`] reads back.
    pub fn to_text(&self) -> String {
        let Ok(Value::Object(map)) = serde_json::to_value(self) else { unreachable!("config serializes to an object") };
        map.iter()
            .map(|(k, v)| match v {
                Value::Null => format!("{k} = auto\n"),
                Value::String(s) => format!("{k} = {s}\n"),
                v => format!("{k} = {v}\n"),
            })
            .collect()
    }

    pub fn model_config(&self, in_dim: usize, coord_dim: usize) -> ModelConfig {
        ModelConfig {
            method: self.method,
            in_dim,
            coord_dim,
            hidden: self.hidden_size,
            layers: self.layers,
            dropout: self.dropout,
            aggregation: self.aggregation,
            k: self.k,
            expansion: self.expansion,
            beta: self.beta,
            alpha: self.alpha,
            tau: self.tau,
            share_encoder: self.share_encoder,
            message_only: self.message_only,
            soft_graph: self.soft_graph,
            cov_dim: if self.cov_dim == 0 { coord_dim } else { self.cov_dim },
            phi: if self.phi == "analytic" {
                PhiKind::Analytic { length_scale: self.phi_length_scale }
            } else {
                PhiKind::Learned { hidden: self.phi_hidden }
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub phase: String,
    pub train_loss: f64,
    pub train_ce: f64,
    pub train_kl: Option<f64>,
    pub val_loss: f64,
    pub val_ce: f64,
    pub val_kl: Option<f64>,
    pub val_auc: f64,
}

/// Persisted outcome of one command.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub command: String,
    pub config: ExperimentConfig,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub rescale_c: Option<f64>,
    pub test_classification_auc: Option<f64>,
    pub interpretation: Option<InterpretationMetrics>,
    pub fine_grained: Option<Vec<FineGrainedRow>>,
    pub field_fit: Option<FieldFit>,
    /// Additional named results (tables flattened to `name → value`).
    pub extra: Map<String, Value>,
    pub wall_clock_s: f64,
}

fn all_finite(v: &Value) -> bool {
    match v {
        Value::Number(n) => n.as_f64().is_some_and(f64::is_finite),
        Value::Array(a) => a.iter().all(all_finite),
        Value::Object(o) => o.values().all(all_finite),
        _ => true,
    }
}

impl RunRecord {
    pub fn new(command: &str, config: &ExperimentConfig) -> Self {
        RunRecord {
            command: command.into(),
            config: config.clone(),
            seed: config.seed,
            epochs: vec![],
            best_epoch: None,
            rescale_c: None,
            test_classification_auc: None,
            interpretation: None,
            fine_grained: None,
            field_fit: None,
            extra: Map::new(),
            wall_clock_s: 0.0,
        }
    }

    /// Serializes after checking that every persisted metric is finite.
    pub fn to_json(&self) -> Result<String> {
        let v = serde_json::to_value(self)?;
        // serde_json writes non-finite floats as null, so check the typed values too
        let nonfinite = self.epochs.iter().any(|e| {
            ![e.train_loss, e.train_ce, e.val_loss, e.val_ce, e.val_auc].iter().all(|x| x.is_finite())
                || e.train_kl.is_some_and(|x| !x.is_finite())
                || e.val_kl.is_some_and(|x| !x.is_finite())
        }) || self.test_classification_auc.is_some_and(|x| !x.is_finite())
            || self.interpretation.as_ref().is_some_and(|m| !m.auc.is_finite() || m.precision_at.values().any(|x| !x.is_finite()));
        if nonfinite || !all_finite(&v) {
            return data_err("run record holds a non-finite metric");
        }
        Ok(serde_json::to_string_pretty(&v)?)
    }

    pub fn file_name(&self, timestamp: &str) -> String {
        format!("{timestamp}-{}.json", self.seed)
    }
}

/// A sample after rescaling, with its hard graph.
#[derive(Clone, Debug)]
pub struct Prepped {
    pub cloud: PointCloud,
    pub graph: SpatialGraph,
    pub y: u8,
}

/// Rescales every sample by `c` and builds its hard graph.
pub fn prepare(samples: &[Sample], c: f64, k: usize) -> Result<Vec<Prepped>> {
    samples
        .iter()
        .map(|s| {
            let cloud = s.cloud.rescaled(c)?;
            let graph = crate::graph::build_knn(cloud.coords(), k)?;
            Ok(Prepped { cloud, graph, y: s.y })
        })
        .collect()
}

/// Model file: architecture, coordinate scale and parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub config: ModelConfig,
    pub rescale_c: f64,
    pub checkpoint: Checkpoint,
}

impl ModelFile {
    pub fn load(&self) -> Result<LriModel> {
        LriModel::from_checkpoint(self.config.clone(), &self.checkpoint)
    }
}

pub struct Trained {
    pub model: LriModel,
    pub rescale_c: f64,
    pub record: RunRecord,
    /// Rescaled samples with graphs, aligned with the input dataset.
    pub prepped: Vec<Prepped>,
}

impl Trained {
    /// Wraps a stored model around `samples`, rescaled with its constant.
    pub fn from_model_file(file: &ModelFile, samples: &[Sample], config: &ExperimentConfig) -> Result<Self> {
        let model = file.load()?;
        let prepped = prepare(samples, file.rescale_c, model.cfg.k)?;
        let mut record = RunRecord::new("load", config);
        record.rescale_c = Some(file.rescale_c);
        Ok(Trained { model, rescale_c: file.rescale_c, record, prepped })
    }

    pub fn model_file(&self) -> ModelFile {
        ModelFile { config: self.model.cfg.clone(), rescale_c: self.rescale_c, checkpoint: self.model.store.to_checkpoint() }
    }
}

/// Losses of a deterministic pass over `idx`.
struct EvalOut {
    logits: Vec<f64>,
    loss: f64,
    ce: f64,
    kl: Option<f64>,
}

fn evaluate(model: &LriModel, data: &[Prepped], idx: &[usize], phase: Phase, batch: usize) -> Result<EvalOut> {
    let (mut logits, mut loss, mut ce, mut kl, mut has_kl) = (Vec::with_capacity(idx.len()), 0.0, 0.0, 0.0, false);
    for chunk in idx.chunks(batch) {
        let items: Vec<_> = chunk.iter().map(|&i| (&data[i].cloud, &data[i].graph)).collect();
        let prep = Prepared::new(&items, chunk.iter().map(|&i| data[i].y as f64).collect());
        let mut ctx = Ctx::new(&model.store, false, None);
        let f = model.forward(&mut ctx, &prep, phase, None)?;
        let w = chunk.len() as f64;
        logits.extend_from_slice(&ctx.tape.value(f.logits).data);
        loss += w * ctx.tape.scalar(f.loss);
        ce += w * ctx.tape.scalar(f.ce);
        if let Some(k) = f.kl {
            kl += w * ctx.tape.scalar(k);
            has_kl = true;
        }
    }
    let n = idx.len().max(1) as f64;
    Ok(EvalOut { logits, loss: loss / n, ce: ce / n, kl: has_kl.then_some(kl / n) })
}

/// Replaces every running statistic with its exact population value over
/// `idx`, computed on deterministic (evaluation-time) inputs.
pub fn recalibrate_batch_norm(model: &mut LriModel, data: &[Prepped], idx: &[usize], phase: Phase, batch: usize) -> Result<()> {
    // per BnId: (Σ n·mean, Σ n·(var + mean²), Σ n)
    let mut acc: BTreeMap<usize, (Vec<f64>, Vec<f64>, f64)> = BTreeMap::new();
    for chunk in idx.chunks(batch) {
        let items: Vec<_> = chunk.iter().map(|&i| (&data[i].cloud, &data[i].graph)).collect();
        let prep = Prepared::new(&items, chunk.iter().map(|&i| data[i].y as f64).collect());
        let mut ctx = Ctx::new(&model.store, true, None);
        model.forward(&mut ctx, &prep, phase, None)?;
        for (id, stats, n) in ctx.take_bn_updates() {
            let e = acc.entry(id.0).or_insert_with(|| (vec![0.0; stats.mean.len()], vec![0.0; stats.mean.len()], 0.0));
            let w = n as f64;
            for j in 0..stats.mean.len() {
                e.0[j] += w * stats.mean[j];
                e.1[j] += w * (stats.var[j] + stats.mean[j] * stats.mean[j]);
            }
            e.2 += w;
        }
    }
    for (id, (s1, s2, n)) in acc {
        let mean: Vec<f64> = s1.iter().map(|v| v / n).collect();
        let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
        let var = s2.iter().zip(&mean).map(|(v, m)| ((v / n - m * m) * unbias).max(0.0)).collect();
        model.store.set_running(BnId(id), mean, var);
    }
    Ok(())
}

/// Classification AUC (percent) of `model` over `idx`.
pub fn classification_auc(model: &LriModel, data: &[Prepped], idx: &[usize], batch: usize) -> Result<f64> {
    let out = evaluate(model, data, idx, Phase::Lri, batch)?;
    let labels: Vec<u8> = idx.iter().map(|&i| data[i].y).collect();
    roc_auc(&out.logits, &labels)
}

/// Trains `cfg.method` on `samples[splits.train]`, selecting the epoch with
/// the best validation classification AUC (lower validation loss breaking
/// ties). For the LRI methods only joint-phase epochs are eligible.
pub fn train(
    cfg: &ExperimentConfig,
    samples: &[Sample],
    splits: &Splits,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Trained> {
    cfg.validate()?;
    let start = Instant::now();
    if splits.train.is_empty() || splits.val.is_empty() {
        return data_err("training and validation splits must be non-empty");
    }
    let first = &samples[splits.train[0]].cloud;
    let mcfg = cfg.model_config(first.feature_dim(), first.dim());
    let c = match cfg.rescale_c {
        Some(c) => c,
        None => choose_rescale_constant(splits.train.iter().map(|&i| samples[i].cloud.coords()), cfg.rescale_percentile)?,
    };
    let data = prepare(samples, c, cfg.k)?;
    let mut model = LriModel::new(mcfg, &mut stream(cfg.seed, "init"))?;
    let mut adam = Adam::new(&model.store, cfg.lr, cfg.weight_decay);
    let mut shuffle_rng = stream(cfg.seed, "shuffle");
    let mut dropout_rng = stream(cfg.seed, "dropout");
    let noise_name = if cfg.method == Method::LriBernoulli { "masks" } else { "perturbations" };
    let mut noise_rng = stream(cfg.seed, noise_name);
    let lri = cfg.method.is_lri();
    let mut record = RunRecord::new("train", cfg);
    record.rescale_c = Some(c);
    let mut best: Option<(f64, f64, usize, Checkpoint)> = None;
    let mut order = splits.train.clone();
    for epoch in 0..cfg.epochs {
        let phase = if lri && epoch >= cfg.pretrain_epochs { Phase::Lri } else { Phase::Erm };
        order.shuffle(&mut shuffle_rng);
        let (mut tl, mut tce, mut tkl, mut seen) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(cfg.batch_size) {
            let items: Vec<_> = chunk.iter().map(|&i| (&data[i].cloud, &data[i].graph)).collect();
            let prep = Prepared::new(&items, chunk.iter().map(|&i| data[i].y as f64).collect());
            let draws = if phase == Phase::Lri { model.draw(prep.batch.n_nodes(), &mut noise_rng) } else { None };
            let mut ctx = Ctx::new(&model.store, true, Some(&mut dropout_rng));
            let f = model.forward(&mut ctx, &prep, phase, draws.as_ref())?;
            let loss = ctx.tape.scalar(f.loss);
            if !loss.is_finite() {
                return Err(LriError::Numeric(format!("non-finite training loss at epoch {epoch}")));
            }
            let w = chunk.len() as f64;
            tl += w * loss;
            tce += w * ctx.tape.scalar(f.ce);
            if let Some(k) = f.kl {
                tkl += w * ctx.tape.scalar(k);
            }
            seen += w;
            let grads = ctx.tape.backward(f.loss);
            let g = ctx.param_grads(&grads);
            let active = ctx.reached(&grads);
            let bn = ctx.take_bn_updates();
            drop(ctx);
            adam.step(&mut model.store, &g, Some(&active));
            for (id, stats, n) in &bn {
                model.store.update_running(*id, stats, *n);
            }
        }
        recalibrate_batch_norm(&mut model, &data, &splits.train, phase, cfg.eval_batch_size)?;
        let val = evaluate(&model, &data, &splits.val, phase, cfg.eval_batch_size)?;
        let val_labels: Vec<u8> = splits.val.iter().map(|&i| data[i].y).collect();
        let val_auc = roc_auc(&val.logits, &val_labels).unwrap_or(50.0);
        let rec = EpochRecord {
            epoch,
            phase: if phase == Phase::Lri { "joint".into() } else { "classifier".into() },
            train_loss: tl / seen,
            train_ce: tce / seen,
            train_kl: (phase == Phase::Lri).then_some(tkl / seen),
            val_loss: val.loss,
            val_ce: val.ce,
            val_kl: val.kl,
            val_auc,
        };
        on_epoch(&rec);
        record.epochs.push(rec);
        let eligible = !lri || phase == Phase::Lri;
        let better = best.as_ref().is_none_or(|(a, l, _, _)| val_auc > *a || (val_auc == *a && val.loss < *l));
        if eligible && better {
            best = Some((val_auc, val.loss, epoch, model.store.to_checkpoint()));
        }
    }
    let (_, _, best_epoch, ck) = best.expect("at least one eligible epoch");
    model.store.load_checkpoint(&ck)?;
    record.best_epoch = Some(best_epoch);
    if !splits.test.is_empty() {
        record.test_classification_auc = Some(classification_auc(&model, &data, &splits.test, cfg.eval_batch_size)?);
    }
    record.wall_clock_s = start.elapsed().as_secs_f64();
    Ok(Trained { model, rescale_c: c, record, prepped: data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_text_round_trip() {
        let mut c = ExperimentConfig { rescale_c: Some(0.1 + 0.2), beta: 0.01, ..Default::default() };
        c.method = Method::LriBernoulli;
        let back = ExperimentConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        let json = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ExperimentConfig>(&json).unwrap(), c);
    }

    #[test]
    fn config_parsing() {
        let c = ExperimentConfig::from_text("# desk\nmethod = erm\nk = 7\nrescale_c = auto\nsplit_ratios = [0.8, 0.1, 0.1]\n").unwrap();
        assert_eq!((c.method, c.k, c.rescale_c), (Method::Erm, 7, None));
        assert!(ExperimentConfig::from_text("beta = 0").is_err());
        assert!(ExperimentConfig::from_text("alpha = 0.3").is_err());
        assert!(ExperimentConfig::from_text("tau = -1").is_err());
        assert!(ExperimentConfig::from_text("expansion = 0.5").is_err());
        assert!(ExperimentConfig::from_text("bogus = 1").is_err());
        assert!(matches!(ExperimentConfig::from_text("k 5"), Err(LriError::Parse { line: 1, .. })));
    }
}
