//! `lri`: data generation, training, interpretation and the experiment
//! sweeps. Every command writes a run record under `$LRI_RESULTS_DIR`
//! (default `results/`).

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use lri::analysis::fine_grained_csv;
use lri::cloud::{read_dataset, write_dataset, Sample};
use lri::error::LriError;
use lri::eval::{interpretation_metrics, metric_table, MetricReport};
use lri::experiments::{
    ablation_soft_graph, evaluate_interpretation, interpretation_records, shift_sweep, sweep_b, InterpretationRecord, Scorer,
};
use lri::gradcheck::run_suite;
use lri::model::Method;
use lri::synth::{
    generate_helix_dataset, generate_motif_dataset, make_splits, summarize, HelixParams, Manifest, MotifParams, SplitScheme,
    Splits,
};
use lri::train::{train, ExperimentConfig, ModelFile, RunRecord, Trained};

#[derive(Parser)]
#[command(name = "lri", version, about = "Learnable randomness injection experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dataset {
    Helix,
    Motif,
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides, e.g. `--set beta=0.1`; applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset (JSONL) with a manifest.
    GenData {
        #[arg(long, value_enum)]
        dataset: Dataset,
        /// JSON generator parameters; defaults when omitted.
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and store it as JSON.
    Train {
        #[arg(long)]
        method: Method,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "random")]
        split: SplitScheme,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write per-point interpretation scores (JSONL) for a dataset.
    Interpret {
        /// Trained model file; not needed for `--method random`.
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        /// lri-bernoulli, lri-gaussian, gradgeo, gradgam or random.
        #[arg(long)]
        method: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Interpretation metrics of score files against a dataset.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, required = true)]
        scores: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "12,24")]
        m: Vec<usize>,
        /// Rank points of all samples jointly instead of per sample.
        #[arg(long)]
        pooled: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Field-strength sweep: direction and eigen-ratio statistics per B.
    SweepB {
        #[arg(long = "b-list", visible_alias = "B-list", value_delimiter = ',', required = true)]
        b_list: Vec<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 600)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train at one track multiplicity, test at several.
    Shift {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        params: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "erm,lri-bernoulli,lri-gaussian")]
        methods: Vec<Method>,
        #[arg(long, default_value_t = 10)]
        train_tracks: usize,
        #[arg(long, value_delimiter = ',', default_value = "10,30,50,70")]
        test_tracks: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 800)]
        n: usize,
        #[arg(long, default_value_t = 200)]
        n_test: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// LRI-Gaussian with and without soft-graph reconstruction.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "12,24")]
        m: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Finite-difference verification of every analytic gradient.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Summarize the run records in a results directory.
    Report {
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

enum Failure {
    Invalid(String),
    Gradcheck(String),
}

impl From<LriError> for Failure {
    fn from(e: LriError) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

type Outcome = Result<RunRecord, Failure>;

fn results_dir() -> PathBuf {
    std::env::var_os("LRI_RESULTS_DIR").map(PathBuf::from).unwrap_or_else(|| PathBuf::from("results"))
}

fn write_record(record: &RunRecord) -> Result<PathBuf, Failure> {
    let dir = results_dir();
    fs::create_dir_all(&dir)?;
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%S%.6fZ").to_string();
    let path = dir.join(record.file_name(&stamp));
    fs::write(&path, record.to_json()?)?;
    Ok(path)
}

fn load_config(args: &ConfigArgs, method: Option<Method>) -> Result<ExperimentConfig, Failure> {
    let mut pairs = match &args.config {
        Some(p) => ExperimentConfig::parse_pairs(&fs::read_to_string(p)?)?,
        None => Vec::new(),
    };
    for s in &args.set {
        let Some((k, v)) = s.split_once('=') else {
            return Err(Failure::Invalid(format!("override {s:?} is not KEY=VALUE")));
        };
        pairs.push((k.trim().to_string(), v.to_string()));
    }
    if let Some(m) = method {
        pairs.push(("method".into(), m.as_str().into()));
    }
    pairs.push(("seed".into(), args.seed.to_string()));
    let mut cfg = ExperimentConfig::default();
    cfg.apply_pairs(pairs.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    Ok(cfg)
}

fn read_json_or_default<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T, Failure> {
    match path {
        Some(p) => Ok(serde_json::from_str(&fs::read_to_string(p)?)?),
        None => Ok(T::default()),
    }
}

fn load_data(path: &Path) -> Result<Vec<Sample>, Failure> {
    let samples = read_dataset(&fs::read_to_string(path)?)?;
    if samples.is_empty() {
        return Err(Failure::Invalid(format!("{} holds no samples", path.display())));
    }
    Ok(samples)
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn splits_for(samples: &[Sample], cfg: &ExperimentConfig, scheme: SplitScheme) -> Result<Splits, Failure> {
    Ok(make_splits(samples, cfg.split_ratios, scheme, &MotifParams::default(), cfg.seed)?)
}

fn progress(e: &lri::train::EpochRecord) {
    eprintln!(
        "epoch {:>3} [{}] loss {:.4} val_auc {:.2} val_loss {:.4}",
        e.epoch, e.phase, e.train_loss, e.val_auc, e.val_loss
    );
}

fn gen_data(dataset: Dataset, params: Option<&Path>, n: usize, seed: u64, out: &Path) -> Outcome {
    let (samples, name, params) = match dataset {
        Dataset::Helix => {
            let p: HelixParams = read_json_or_default(params)?;
            (generate_helix_dataset(&p, n, seed)?, "helix", serde_json::to_value(&p)?)
        }
        Dataset::Motif => {
            let p: MotifParams = read_json_or_default(params)?;
            (generate_motif_dataset(&p, n, seed)?.0, "motif", serde_json::to_value(&p)?)
        }
    };
    let mut buf = Vec::new();
    write_dataset(&mut buf, &samples)?;
    write_text(out, std::str::from_utf8(&buf).expect("dataset text is UTF-8"))?;
    let summary = summarize(&samples);
    let manifest = Manifest { dataset: name.into(), params, seed, n_samples: n, summary: summary.clone() };
    let manifest_path = out.with_extension("manifest.json");
    write_text(&manifest_path, &serde_json::to_string_pretty(&manifest)?)?;
    println!("dataset,n_samples,avg_points,avg_important,class_ratio");
    println!("{name},{},{:.2},{:.2},{:.4}", summary.n_samples, summary.avg_points, summary.avg_important, summary.class_ratio);
    let mut record = RunRecord::new("gen-data", &ExperimentConfig { seed, ..Default::default() });
    record.extra.insert("manifest".into(), serde_json::to_value(&manifest)?);
    record.extra.insert("out".into(), json!(out.display().to_string()));
    Ok(record)
}

fn train_cmd(method: Method, data: &Path, cfg: &ConfigArgs, split: SplitScheme, out: &Path) -> Outcome {
    let cfg = load_config(cfg, Some(method))?;
    let samples = load_data(data)?;
    let splits = splits_for(&samples, &cfg, split)?;
    let trained = train(&cfg, &samples, &splits, progress)?;
    write_text(out, &serde_json::to_string(&trained.model_file())?)?;
    let mut record = trained.record.clone();
    if let Some(scorer) = Scorer::for_method(method).filter(|s| *s != Scorer::GradGeo && *s != Scorer::GradGam) {
        record.interpretation = Some(evaluate_interpretation(scorer, Some(&trained), &samples, &splits.test, &[12, 24], false, cfg.seed)?);
    }
    if let Some(auc) = record.test_classification_auc {
        println!("test classification AUC {auc:.2}");
    }
    if let Some(m) = &record.interpretation {
        println!("test interpretation AUC {:.2}", m.auc);
    }
    record.extra.insert("model".into(), json!(out.display().to_string()));
    Ok(record)
}

fn parse_scorer(s: &str) -> Result<Scorer, Failure> {
    serde_json::from_value(Value::String(s.to_string()))
        .map_err(|_| Failure::Invalid(format!("unknown interpretation method {s:?}; use lri-bernoulli, lri-gaussian, gradgeo, gradgam or random")))
}

fn interpret(model: Option<&Path>, data: &Path, method: &str, seed: u64, out: &Path) -> Outcome {
    let scorer = parse_scorer(method)?;
    let samples = load_data(data)?;
    let trained = match model {
        Some(p) => {
            let file: ModelFile = serde_json::from_str(&fs::read_to_string(p)?)?;
            let stored = file.config.method;
            let compatible = match scorer {
                Scorer::LriBernoulli => stored == Method::LriBernoulli,
                Scorer::LriGaussian => stored == Method::LriGaussian,
                Scorer::GradGeo | Scorer::GradGam => !stored.is_lri(),
                Scorer::Random => true,
            };
            if !compatible {
                return Err(Failure::Invalid(format!("a {} model cannot give {} scores", stored.as_str(), scorer.as_str())));
            }
            Some(Trained::from_model_file(&file, &samples, &ExperimentConfig { method: stored, seed, ..Default::default() })?)
        }
        None if scorer == Scorer::Random => None,
        None => return Err(Failure::Invalid(format!("{} needs --model", scorer.as_str()))),
    };
    let idx: Vec<usize> = (0..samples.len()).collect();
    let records = interpretation_records(scorer, trained.as_ref(), &samples, &idx, seed)?;
    let mut text = String::new();
    for r in &records {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(out, &text)?;
    let mut record = RunRecord::new("interpret", &ExperimentConfig { seed, ..Default::default() });
    record.extra.insert("method".into(), json!(scorer.as_str()));
    record.extra.insert("n_samples".into(), json!(records.len()));
    record.extra.insert("out".into(), json!(out.display().to_string()));
    Ok(record)
}

fn evaluate(data: &Path, score_files: &[PathBuf], m_list: &[usize], pooled: bool, out: Option<&Path>) -> Outcome {
    let samples = load_data(data)?;
    let by_id: std::collections::HashMap<&str, &Sample> = samples.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut reports = Vec::new();
    let mut record = RunRecord::new("evaluate", &ExperimentConfig::default());
    for path in score_files {
        let text = fs::read_to_string(path)?;
        let mut method = String::new();
        let (mut scores, mut refs) = (Vec::new(), Vec::new());
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let r: InterpretationRecord =
                serde_json::from_str(line).map_err(|e| Failure::Invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
            let s = by_id.get(r.id.as_str()).ok_or_else(|| Failure::Invalid(format!("{}: unknown sample id {:?}", path.display(), r.id)))?;
            if s.cloud.n() != r.score.len() {
                return Err(Failure::Invalid(format!("{}: {} scores for {} points in {}", path.display(), r.score.len(), s.cloud.n(), r.id)));
            }
            method = r.method;
            scores.push(r.score);
            refs.push(*s);
        }
        let m = interpretation_metrics(&scores, &refs, m_list, pooled)?;
        record.extra.insert(format!("{method}:{}", path.display()), serde_json::to_value(&m)?);
        reports.push(MetricReport::from_runs(&method, &[m], &[]));
    }
    let table = metric_table(&reports, m_list);
    print!("{table}");
    if let Some(out) = out {
        write_text(out, &table)?;
    }
    Ok(record)
}

fn sweep_b_cmd(b_list: &[f64], cfg: &ConfigArgs, params: Option<&Path>, seeds: &[u64], n: usize, out: &Path) -> Outcome {
    let base = load_config(cfg, Some(Method::LriGaussian))?;
    let gaussian = ExperimentConfig { cov_dim: 2, ..base.clone() };
    let erm = ExperimentConfig { method: Method::Erm, ..base.clone() };
    let p: HelixParams = read_json_or_default(params)?;
    let res = sweep_b(&gaussian, &erm, &p, b_list, n, seeds)?;
    fs::create_dir_all(out)?;
    let csv = fine_grained_csv(&res.rows);
    write_text(&out.join("fine_grained.csv"), &csv)?;
    print!("{csv}");
    match &res.fit {
        Some(f) => println!("eigen-ratio fit: slope {:.6} intercept {:.6} r {:.4}", f.slope, f.intercept, f.r),
        None => println!("eigen-ratio fit unavailable"),
    }
    let mut record = RunRecord::new("sweep-b", &gaussian);
    record.fine_grained = Some(res.rows);
    record.field_fit = res.fit;
    Ok(record)
}

#[allow(clippy::too_many_arguments)]
fn shift_cmd(
    cfg: &ConfigArgs,
    params: Option<&Path>,
    methods: &[Method],
    train_tracks: usize,
    test_tracks: &[usize],
    seeds: &[u64],
    n: usize,
    n_test: usize,
    out: &Path,
) -> Outcome {
    let base = load_config(cfg, None)?;
    let cfgs: Vec<ExperimentConfig> = methods.iter().map(|&m| ExperimentConfig { method: m, ..base.clone() }).collect();
    let p = HelixParams { n_tracks: train_tracks, ..read_json_or_default(params)? };
    let table = shift_sweep(&cfgs, &p, n, n_test, test_tracks, seeds)?;
    fs::create_dir_all(out)?;
    let csv = table.csv();
    write_text(&out.join("shift.csv"), &csv)?;
    print!("{csv}");
    let mut record = RunRecord::new("shift", &base);
    record.extra.insert("shift".into(), serde_json::to_value(&table)?);
    Ok(record)
}

fn ablate(data: &Path, cfg: &ConfigArgs, seeds: &[u64], m_list: &[usize], out: &Path) -> Outcome {
    let cfg = load_config(cfg, Some(Method::LriGaussian))?;
    let samples = load_data(data)?;
    let splits = splits_for(&samples, &cfg, SplitScheme::Random)?;
    let res = ablation_soft_graph(&cfg, &samples, &splits, seeds, m_list)?;
    fs::create_dir_all(out)?;
    let table = metric_table(&res.reports(), m_list);
    write_text(&out.join("ablation.csv"), &table)?;
    print!("{table}");
    let mut record = RunRecord::new("ablate", &cfg);
    record.extra.insert("ablation".into(), serde_json::to_value(&res)?);
    Ok(record)
}

fn gradcheck(seed: u64) -> Outcome {
    let reports = run_suite(seed)?;
    let mut failed = Vec::new();
    for r in &reports {
        println!("{:<48} max_rel_err {:.3e} over {:>4} {}", r.name, r.max_rel_err, r.checked, if r.passed { "ok" } else { "FAIL" });
        if !r.passed {
            failed.push(r.name.clone());
        }
    }
    let mut record = RunRecord::new("gradcheck", &ExperimentConfig { seed, ..Default::default() });
    record.extra.insert("gradcheck".into(), json!(reports.iter().map(|r| json!({
        "name": r.name, "max_rel_err": r.max_rel_err, "checked": r.checked, "passed": r.passed
    })).collect::<Vec<_>>()));
    if !failed.is_empty() {
        // keep the evidence before signalling failure
        write_record(&record)?;
        return Err(Failure::Gradcheck(format!("gradient check failed: {}", failed.join(", "))));
    }
    Ok(record)
}

fn report(results: Option<&Path>) -> Outcome {
    let dir = results.map(Path::to_path_buf).unwrap_or_else(results_dir);
    let mut entries: Vec<PathBuf> = fs::read_dir(&dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|e| e == "json")).collect();
    entries.sort();
    let mut out = std::io::stdout().lock();
    writeln!(out, "file,command,method,seed,best_epoch,test_clf_auc,interp_auc,wall_clock_s")?;
    let mut n = 0;
    for p in &entries {
        let Ok(r) = serde_json::from_str::<RunRecord>(&fs::read_to_string(p)?) else { continue };
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x:.4}"));
        writeln!(
            out,
            "{},{},{},{},{},{},{},{:.2}",
            p.file_name().map(|f| f.to_string_lossy().into_owned()).unwrap_or_default(),
            r.command,
            r.config.method.as_str(),
            r.seed,
            r.best_epoch.map_or(String::new(), |e| e.to_string()),
            opt(r.test_classification_auc),
            opt(r.interpretation.as_ref().map(|m| m.auc)),
            r.wall_clock_s
        )?;
        n += 1;
    }
    let mut record = RunRecord::new("report", &ExperimentConfig::default());
    record.extra.insert("n_records".into(), json!(n));
    Ok(record)
}

fn run(cli: Cli) -> Outcome {
    let start = std::time::Instant::now();
    let mut record = match &cli.command {
        Command::GenData { dataset, params, n, seed, out } => gen_data(*dataset, params.as_deref(), *n, *seed, out),
        Command::Train { method, data, cfg, split, out } => train_cmd(*method, data, cfg, *split, out),
        Command::Interpret { model, data, method, seed, out } => interpret(model.as_deref(), data, method, *seed, out),
        Command::Evaluate { data, scores, m, pooled, out } => evaluate(data, scores, m, *pooled, out.as_deref()),
        Command::SweepB { b_list, cfg, params, seeds, n, out } => sweep_b_cmd(b_list, cfg, params.as_deref(), seeds, *n, out),
        Command::Shift { cfg, params, methods, train_tracks, test_tracks, seeds, n, n_test, out } => {
            shift_cmd(cfg, params.as_deref(), methods, *train_tracks, test_tracks, seeds, *n, *n_test, out)
        }
        Command::Ablate { data, cfg, seeds, m, out } => ablate(data, cfg, seeds, m, out),
        Command::Gradcheck { seed } => gradcheck(*seed),
        Command::Report { results } => report(results.as_deref()),
    }?;
    record.wall_clock_s = start.elapsed().as_secs_f64();
    let path = write_record(&record)?;
    eprintln!("run record: {}", path.display());
    Ok(record)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(_) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Gradcheck(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
