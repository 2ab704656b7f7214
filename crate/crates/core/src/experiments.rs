//! Experiment protocols built on [`crate::train`]: interpretation benchmark,
//! distribution-shift sweep, soft-graph ablation and field-strength sweep.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{ellipse, field_strength_fit, DirectionStats, FieldFit, FineGrainedRow};
use crate::baselines::{grad_gam, grad_geo, random_baseline};
use crate::cloud::Sample;
use crate::error::{config_err, Result};
use crate::eval::{interpretation_metrics, InterpretationMetrics, MetricReport, Stat};
use crate::model::{Interpretation, Method};
use crate::rng::{derive_seed, stream_at};
use crate::synth::{generate_helix_dataset, split_indices, HelixParams, Splits};
use crate::train::{classification_auc, prepare, train, ExperimentConfig, Trained};

/// Interpretation methods that can be scored; `Random` needs no model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scorer {
    LriBernoulli,
    LriGaussian,
    GradGeo,
    GradGam,
    Random,
}

impl Scorer {
    pub fn as_str(self) -> &'static str {
        match self {
            Scorer::LriBernoulli => "lri-bernoulli",
            Scorer::LriGaussian => "lri-gaussian",
            Scorer::GradGeo => "gradgeo",
            Scorer::GradGam => "gradgam",
            Scorer::Random => "random",
        }
    }

    /// Scorer that reads a model trained with `m`.
    pub fn for_method(m: Method) -> Option<Self> {
        match m {
            Method::LriBernoulli => Some(Scorer::LriBernoulli),
            Method::LriGaussian => Some(Scorer::LriGaussian),
            Method::GradGeo => Some(Scorer::GradGeo),
            Method::GradGam => Some(Scorer::GradGam),
            Method::Erm => None,
        }
    }
}

/// Per-point scores of `scorer` on `samples[idx]`. `trained` must hold the
/// matching model (an ERM model for the gradient baselines); it is ignored
/// by `Random`.
pub fn scores_for(scorer: Scorer, trained: Option<&Trained>, idx: &[usize], seed: u64) -> Result<Vec<Vec<f64>>> {
    let need = || match trained {
        Some(t) => Ok(t),
        None => config_err(format!("{} needs a trained model", scorer.as_str())),
    };
    idx.iter()
        .map(|&i| {
            Ok(match scorer {
                Scorer::Random => {
                    let n = trained.map_or(0, |t| t.prepped[i].cloud.n());
                    random_baseline(n, seed, i as u64).scores
                }
                Scorer::GradGeo => {
                    let t = need()?;
                    grad_geo(&t.model, &t.prepped[i].cloud, &t.prepped[i].graph).scores
                }
                Scorer::GradGam => {
                    let t = need()?;
                    grad_gam(&t.model, &t.prepped[i].cloud, &t.prepped[i].graph).scores
                }
                Scorer::LriBernoulli | Scorer::LriGaussian => {
                    let t = need()?;
                    t.model.interpret(&t.prepped[i].cloud, &t.prepped[i].graph)?.scores()
                }
            })
        })
        .collect()
}

/// Interpretation metrics of `scorer` over the positive samples of `idx`.
pub fn evaluate_interpretation(
    scorer: Scorer,
    trained: Option<&Trained>,
    samples: &[Sample],
    idx: &[usize],
    m_list: &[usize],
    pooled: bool,
    seed: u64,
) -> Result<InterpretationMetrics> {
    let pos: Vec<usize> = idx.iter().copied().filter(|&i| samples[i].y == 1).collect();
    let scores = match (scorer, trained) {
        (Scorer::Random, None) => pos.iter().map(|&i| random_baseline(samples[i].cloud.n(), seed, i as u64).scores).collect(),
        _ => scores_for(scorer, trained, &pos, seed)?,
    };
    let refs: Vec<&Sample> = pos.iter().map(|&i| &samples[i]).collect();
    interpretation_metrics(&scores, &refs, m_list, pooled)
}

/// One seed of the interpretation benchmark.
pub struct SeedRun {
    pub seed: u64,
    pub erm: Trained,
    pub bernoulli: Trained,
    pub gaussian: Trained,
}

/// Trains ERM and both LRI variants with `seed` (configs supply every
/// other knob; their `seed` fields are overwritten).
pub fn train_trio(cfgs: [&ExperimentConfig; 3], samples: &[Sample], splits: &Splits, seed: u64) -> Result<SeedRun> {
    let run = |c: &ExperimentConfig, want: Method| {
        if c.method != want {
            return config_err(format!("expected a {} config, got {}", want.as_str(), c.method.as_str()));
        }
        train(&ExperimentConfig { seed, ..c.clone() }, samples, splits, |_| {})
    };
    Ok(SeedRun {
        seed,
        erm: run(cfgs[0], Method::Erm)?,
        bernoulli: run(cfgs[1], Method::LriBernoulli)?,
        gaussian: run(cfgs[2], Method::LriGaussian)?,
    })
}

/// Table-2 style reports (one per scorer, plus ERM classification) over
/// the test split.
pub fn interpretation_benchmark(runs: &[SeedRun], samples: &[Sample], splits: &Splits, m_list: &[usize], pooled: bool) -> Result<Vec<MetricReport>> {
    let mut per: BTreeMap<Scorer, (Vec<InterpretationMetrics>, Vec<f64>)> = BTreeMap::new();
    for run in runs {
        let rows = [
            (Scorer::Random, None),
            (Scorer::GradGeo, Some(&run.erm)),
            (Scorer::GradGam, Some(&run.erm)),
            (Scorer::LriBernoulli, Some(&run.bernoulli)),
            (Scorer::LriGaussian, Some(&run.gaussian)),
        ];
        for (scorer, t) in rows {
            let m = evaluate_interpretation(scorer, t, samples, &splits.test, m_list, pooled, run.seed)?;
            let e = per.entry(scorer).or_default();
            e.0.push(m);
            if matches!(scorer, Scorer::LriBernoulli | Scorer::LriGaussian) {
                e.1.extend(t.and_then(|t| t.record.test_classification_auc));
            }
        }
    }
    let mut reports = vec![MetricReport {
        method: "erm".into(),
        interpretation_auc: None,
        precision_at: BTreeMap::new(),
        classification_auc: Some(Stat::new(runs.iter().filter_map(|r| r.erm.record.test_classification_auc).collect())),
    }];
    for (scorer, (m, clf)) in per {
        reports.push(MetricReport::from_runs(scorer.as_str(), &m, &clf));
    }
    Ok(reports)
}

/// Classification AUC of a trained model on fresh samples.
pub fn auc_on(trained: &Trained, samples: &[Sample], batch: usize) -> Result<f64> {
    let k = trained.model.cfg.k;
    let data = prepare(samples, trained.rescale_c, k)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    classification_auc(&trained.model, &data, &idx, batch)
}

/// `method → test_tracks → per-seed AUCs`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ShiftTable {
    pub train_tracks: usize,
    pub rows: BTreeMap<String, BTreeMap<usize, Vec<f64>>>,
}

impl ShiftTable {
    pub fn mean(&self, method: &str, tracks: usize) -> Option<f64> {
        let v = self.rows.get(method)?.get(&tracks)?;
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn csv(&self) -> String {
        let cols: Vec<usize> = self.rows.values().flat_map(|r| r.keys().copied()).collect::<std::collections::BTreeSet<_>>().into_iter().collect();
        let mut out = String::from("method");
        for c in &cols {
            out.push_str(&format!(",tracks_{c}_mean,tracks_{c}_std"));
        }
        out.push('\n');
        for (m, r) in &self.rows {
            out.push_str(m);
            for c in &cols {
                match r.get(c) {
                    Some(v) => {
                        let s = Stat::new(v.clone());
                        out.push_str(&format!(",{:.4},{:.4}", s.mean, s.std));
                    }
                    None => out.push_str(",,"),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Helix dataset of `n` samples derived from `seed` under `name`.
pub fn helix_data(p: &HelixParams, n: usize, seed: u64, name: &str) -> Result<Vec<Sample>> {
    generate_helix_dataset(p, n, derive_seed(seed, name, 0))
}

/// Trains each config per seed at `params.n_tracks` and evaluates on fresh
/// sets of `n_test` samples for every entry of `test_tracks`.
pub fn shift_sweep(
    cfgs: &[ExperimentConfig],
    params: &HelixParams,
    n_train: usize,
    n_test: usize,
    test_tracks: &[usize],
    seeds: &[u64],
) -> Result<ShiftTable> {
    let mut table = ShiftTable { train_tracks: params.n_tracks, rows: BTreeMap::new() };
    for &seed in seeds {
        let data = helix_data(params, n_train, seed, "shift-train")?;
        let splits = split_indices(data.len(), None, cfgs.first().map_or([0.7, 0.15, 0.15], |c| c.split_ratios), seed)?;
        let tests: Vec<(usize, Vec<Sample>)> = test_tracks
            .iter()
            .map(|&t| Ok((t, helix_data(&HelixParams { n_tracks: t, ..params.clone() }, n_test, seed, &format!("shift-test-{t}"))?)))
            .collect::<Result<_>>()?;
        for cfg in cfgs {
            let trained = train(&ExperimentConfig { seed, ..cfg.clone() }, &data, &splits, |_| {})?;
            for (t, test) in &tests {
                let auc = auc_on(&trained, test, cfg.eval_batch_size)?;
                table.rows.entry(cfg.method.as_str().to_string()).or_default().entry(*t).or_default().push(auc);
            }
        }
    }
    Ok(table)
}

/// Paired interpretation metrics with and without soft-graph reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationResult {
    pub with_reconstruction: Vec<InterpretationMetrics>,
    pub without_reconstruction: Vec<InterpretationMetrics>,
}

impl AblationResult {
    pub fn reports(&self) -> [MetricReport; 2] {
        [
            MetricReport::from_runs("with-reconstruction", &self.with_reconstruction, &[]),
            MetricReport::from_runs("without-reconstruction", &self.without_reconstruction, &[]),
        ]
    }
}

/// Ablation arm without reconstruction for an already trained `with` model.
pub fn ablation_arm(cfg: &ExperimentConfig, samples: &[Sample], splits: &Splits, seed: u64) -> Result<Trained> {
    if cfg.method != Method::LriGaussian {
        return config_err("the soft-graph ablation applies to lri-gaussian");
    }
    train(&ExperimentConfig { seed, soft_graph: false, ..cfg.clone() }, samples, splits, |_| {})
}

pub fn ablation_soft_graph(cfg: &ExperimentConfig, samples: &[Sample], splits: &Splits, seeds: &[u64], m_list: &[usize]) -> Result<AblationResult> {
    if cfg.method != Method::LriGaussian {
        return config_err("the soft-graph ablation applies to lri-gaussian");
    }
    let mut res = AblationResult { with_reconstruction: vec![], without_reconstruction: vec![] };
    for &seed in seeds {
        let with = train(&ExperimentConfig { seed, soft_graph: true, ..cfg.clone() }, samples, splits, |_| {})?;
        let without = ablation_arm(cfg, samples, splits, seed)?;
        let eval = |t: &Trained| evaluate_interpretation(Scorer::LriGaussian, Some(t), samples, &splits.test, m_list, false, seed);
        res.with_reconstruction.push(eval(&with)?);
        res.without_reconstruction.push(eval(&without)?);
    }
    Ok(res)
}

/// Direction statistics over ground-truth points of positive test samples.
pub fn direction_stats(scorer: Scorer, trained: Option<&Trained>, samples: &[Sample], idx: &[usize], seed: u64) -> Result<DirectionStats> {
    let mut st = DirectionStats::default();
    for &i in idx.iter().filter(|&&i| samples[i].y == 1) {
        let s = &samples[i];
        let (Some(vel), Some(interp)) = (&s.velocity, &s.interp) else { continue };
        let gt: Vec<usize> = (0..s.cloud.n()).filter(|&v| interp[v] == 1).collect();
        match scorer {
            Scorer::LriGaussian => {
                let t = trained.ok_or_else(|| crate::error::LriError::Config("lri-gaussian needs a model".into()))?;
                let Interpretation::Gaussian(g) = t.model.interpret(&t.prepped[i].cloud, &t.prepped[i].graph)? else {
                    return config_err("model is not lri-gaussian");
                };
                let d = g.points[0].dim;
                for &v in &gt {
                    let e = ellipse(&g.points[v].sigma(), d)?;
                    st.push(e.e1, vel.row(v), Some(e.eigen_ratio));
                }
            }
            Scorer::GradGeo => {
                let t = trained.ok_or_else(|| crate::error::LriError::Config("gradgeo needs a model".into()))?;
                let dirs = grad_geo(&t.model, &t.prepped[i].cloud, &t.prepped[i].graph).directions.expect("gradgeo gives directions");
                for &v in &gt {
                    st.push(dirs[v], vel.row(v), None);
                }
            }
            Scorer::Random => {
                let mut rng = stream_at(seed, "random-direction", i as u64);
                for &v in &gt {
                    let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
                    st.push(Some([a.cos(), a.sin()]), vel.row(v), None);
                }
            }
            _ => return config_err(format!("{} gives no directions", scorer.as_str())),
        }
    }
    Ok(st)
}

/// Fine-grained rows for every `B` and the eigen-ratio fit of LRI-Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepB {
    pub rows: Vec<FineGrainedRow>,
    pub fit: Option<FieldFit>,
}

/// Trains LRI-Gaussian (`gaussian`, normally 2-D covariance) and ERM per
/// field strength and seed and collects direction statistics on the
/// test split.
pub fn sweep_b(
    gaussian: &ExperimentConfig,
    erm: &ExperimentConfig,
    params: &HelixParams,
    b_list: &[f64],
    n: usize,
    seeds: &[u64],
) -> Result<SweepB> {
    let mut distinct = b_list.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    if distinct.len() < 3 {
        return config_err(format!("the field sweep needs at least 3 distinct values, got {}", distinct.len()));
    }
    let mut rows = Vec::new();
    for &b in b_list {
        let p = HelixParams { b_field: b, ..params.clone() };
        let (mut lri, mut geo, mut rnd) = (DirectionStats::default(), DirectionStats::default(), DirectionStats::default());
        for &seed in seeds {
            let data = helix_data(&p, n, seed, "sweep-b")?;
            let splits = split_indices(data.len(), None, gaussian.split_ratios, seed)?;
            let g = train(&ExperimentConfig { seed, ..gaussian.clone() }, &data, &splits, |_| {})?;
            let e = train(&ExperimentConfig { seed, ..erm.clone() }, &data, &splits, |_| {})?;
            merge(&mut lri, direction_stats(Scorer::LriGaussian, Some(&g), &data, &splits.test, seed)?);
            merge(&mut geo, direction_stats(Scorer::GradGeo, Some(&e), &data, &splits.test, seed)?);
            merge(&mut rnd, direction_stats(Scorer::Random, None, &data, &splits.test, seed)?);
        }
        rows.push(lri.row("lri-gaussian", b));
        rows.push(geo.row("gradgeo", b));
        rows.push(rnd.row("random", b));
    }
    let table: Vec<(f64, f64)> = rows.iter().filter(|r| r.method == "lri-gaussian").filter_map(|r| Some((r.b, r.mean_eigen_ratio?))).collect();
    let fit = field_strength_fit(&table).ok();
    Ok(SweepB { rows, fit })
}

fn merge(into: &mut DirectionStats, other: DirectionStats) {
    into.angles.extend(other.angles);
    into.ratios.extend(other.ratios);
    into.n_degenerate += other.n_degenerate;
}

/// One line of an interpretation output file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretationRecord {
    pub id: String,
    pub method: String,
    pub score: Vec<f64>,
    /// Per-point row-major covariance in rescaled coordinates (LRI-Gaussian).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
}

/// Interpretation records of `scorer` for `samples[idx]`.
pub fn interpretation_records(scorer: Scorer, trained: Option<&Trained>, samples: &[Sample], idx: &[usize], seed: u64) -> Result<Vec<InterpretationRecord>> {
    idx.iter()
        .map(|&i| {
            let (score, sigma) = match (scorer, trained) {
                (Scorer::Random, _) => (random_baseline(samples[i].cloud.n(), seed, i as u64).scores, None),
                (Scorer::LriGaussian | Scorer::LriBernoulli, Some(t)) => match t.model.interpret(&t.prepped[i].cloud, &t.prepped[i].graph)? {
                    Interpretation::Gaussian(g) => (g.scores.clone(), Some(g.sigmas())),
                    b => (b.scores(), None),
                },
                _ => (scores_for(scorer, trained, &[i], seed)?.remove(0), None),
            };
            Ok(InterpretationRecord { id: samples[i].id.clone(), method: scorer.as_str().into(), score, sigma })
        })
        .collect()
}
