//! Acceptance criteria at desk scale. Prints one PASS/FAIL line per
//! criterion. Exits nonzero when an exact criterion fails, or when any
//! criterion fails and `LRI_ACCEPTANCE_STRICT` is set.
//!
//! `LRI_ACCEPTANCE_ONLY=1,2,5` restricts the run to the listed criteria
//! (criteria that share trained models train them once).

use std::collections::BTreeSet;
use std::process::ExitCode;
use std::time::Instant;

use lri::bernoulli::bern_kl;
use lri::cloud::{deserialize_sample, serialize_sample, Sample};
use lri::eval::{interpretation_metrics, precision_at_m, roc_auc};
use lri::experiments::{auc_on, evaluate_interpretation, helix_data, sweep_b, train_trio, Scorer, SeedRun, SweepB};
use lri::gaussian::{gauss_kl, sample_perturbation};
use lri::gradcheck::run_suite;
use lri::linalg::{sigma_from_factors, sym_eigen};
use lri::baselines::random_baseline;
use lri::model::{Interpretation, Method, Phase};
use lri::rng::stream;
use lri::synth::{generate_motif_dataset, make_splits, split_indices, HelixParams, MotifParams, SplitScheme, Splits};
use lri::train::{ExperimentConfig, ModelFile, Trained};
use rand::Rng;
use rand_distr::StandardNormal;

const HELIX_N: usize = 1000;
const MOTIF_N: usize = 600;
const SEEDS: [u64; 2] = [0, 1];
const SWEEP_B: [f64; 5] = [2.0, 5.0, 10.0, 15.0, 20.0];
const SWEEP_N: usize = 600;
const SHIFT_TRACKS: [usize; 4] = [10, 30, 50, 70];
const SHIFT_N: usize = 200;
const M_LIST: [usize; 2] = [12, 24];

fn base(method: Method) -> ExperimentConfig {
    let c = ExperimentConfig {
        method,
        hidden_size: 32,
        layers: 3,
        dropout: 0.1,
        batch_size: 8,
        epochs: 30,
        pretrain_epochs: 15,
        ..Default::default()
    };
    match method {
        Method::Erm => ExperimentConfig { epochs: 15, pretrain_epochs: 0, ..c },
        Method::LriBernoulli => ExperimentConfig { beta: 1.0, alpha: 0.7, ..c },
        _ => ExperimentConfig { beta: 0.1, ..c },
    }
}

fn trio_cfgs() -> [ExperimentConfig; 3] {
    [base(Method::Erm), base(Method::LriBernoulli), base(Method::LriGaussian)]
}

fn sweep_cfgs() -> (ExperimentConfig, ExperimentConfig) {
    (ExperimentConfig { cov_dim: 2, ..base(Method::LriGaussian) }, base(Method::Erm))
}

struct Check {
    pass: bool,
    detail: String,
}

fn check(pass: bool, detail: impl Into<String>) -> Check {
    Check { pass, detail: detail.into() }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Trained models shared by several criteria.
#[derive(Default)]
struct Lab {
    helix: Option<(Vec<Sample>, Splits, Vec<SeedRun>)>,
    sweep: Option<SweepB>,
}

impl Lab {
    fn helix(&mut self) -> &(Vec<Sample>, Splits, Vec<SeedRun>) {
        self.helix.get_or_insert_with(|| {
            let t = Instant::now();
            let data = helix_data(&HelixParams::default(), HELIX_N, 0, "acceptance-helix").expect("helix data");
            let splits = split_indices(data.len(), None, [0.7, 0.15, 0.15], 0).expect("splits");
            let cfgs = trio_cfgs();
            let runs = SEEDS
                .iter()
                .map(|&s| train_trio([&cfgs[0], &cfgs[1], &cfgs[2]], &data, &splits, s).expect("training"))
                .collect();
            eprintln!("  (helix models trained in {:.0} s)", t.elapsed().as_secs_f64());
            (data, splits, runs)
        })
    }

    fn sweep(&mut self) -> &SweepB {
        self.sweep.get_or_insert_with(|| {
            let t = Instant::now();
            let (g, e) = sweep_cfgs();
            let s = sweep_b(&g, &e, &HelixParams::default(), &SWEEP_B, SWEEP_N, &SEEDS[..1]).expect("field sweep");
            eprintln!("  (field sweep trained in {:.0} s)", t.elapsed().as_secs_f64());
            s
        })
    }
}

fn gradient_suite(_: &mut Lab) -> Check {
    let t = Instant::now();
    let reports = run_suite(0).expect("gradient suite");
    let secs = t.elapsed().as_secs_f64();
    let worst = reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max);
    let failed: Vec<&str> = reports.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    check(failed.is_empty() && secs < 60.0, format!("{} checks, worst rel err {worst:.2e}, {secs:.1} s, failed {failed:?}", reports.len()))
}

fn reparameterization(_: &mut Lab) -> Check {
    let t = Instant::now();
    let mut rng = stream(2, "acceptance-reparam");
    let mut worst: f64 = 0.0;
    for _ in 0..10 {
        let u: Vec<f64> = (0..9).map(|_| rng.random_range(-1.5..1.5)).collect();
        let (a1, a2) = (rng.random_range(0.05..3.0), rng.random_range(0.05..3.0));
        let sigma = sigma_from_factors(&u, a1, a2, 3);
        let mut emp = [0.0; 9];
        let draws = 100_000;
        for _ in 0..draws {
            let s1: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let s2: Vec<f64> = (0..3).map(|_| rng.sample(StandardNormal)).collect();
            let e = sample_perturbation(&u, a1, a2, &s1, &s2);
            for i in 0..3 {
                for j in 0..3 {
                    emp[i * 3 + j] += e[i] * e[j] / draws as f64;
                }
            }
        }
        let diff: f64 = emp.iter().zip(&sigma).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let norm: f64 = sigma.iter().map(|v| v * v).sum::<f64>().sqrt();
        worst = worst.max(diff / norm);
    }
    let secs = t.elapsed().as_secs_f64();
    check(worst <= 0.05 && secs < 30.0, format!("worst Frobenius-relative error {:.4} over 10 factors, {secs:.1} s", worst))
}

/// `∫ p ln(p/q)` for zero-mean normals with variances `vp`, `vq`, by
/// composite Simpson quadrature.
fn normal_kl_quadrature(vp: f64, vq: f64) -> f64 {
    let ln_pdf = |x: f64, v: f64| -x * x / (2.0 * v) - 0.5 * (2.0 * std::f64::consts::PI * v).ln();
    let (lo, hi, n) = (-30.0 * vp.sqrt(), 30.0 * vp.sqrt(), 20_000);
    let h = (hi - lo) / n as f64;
    let f = |x: f64| ln_pdf(x, vp).exp() * (ln_pdf(x, vp) - ln_pdf(x, vq));
    let mut s = f(lo) + f(hi);
    for i in 1..n {
        s += f(lo + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn kl_oracles(_: &mut Lab) -> Check {
    let b = bern_kl(0.9, 0.5).unwrap();
    let b_oracle = 0.9 * (0.9f64 / 0.5).ln() + 0.1 * (0.1f64 / 0.5).ln();
    let diag = [2.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
    let g = gauss_kl(&diag, 3, 1.0).unwrap();
    let g_oracle = normal_kl_quadrature(2.0, 1.0) + 2.0 * normal_kl_quadrature(1.0, 1.0);
    let exact = (b - 0.368064).abs() <= 1e-5 && (g - 0.153426).abs() <= 1e-5 && (b - b_oracle).abs() <= 1e-5 && (g - g_oracle).abs() <= 1e-5;

    let mut rng = stream(3, "acceptance-kl");
    let mut grid_ok = true;
    for _ in 0..100 {
        let alpha = rng.random_range(0.5..0.99);
        let p = rng.random_range(1e-3..0.999);
        grid_ok &= bern_kl(p, alpha).unwrap() > 0.0 || p == alpha;
        grid_ok &= bern_kl(alpha, alpha).unwrap() == 0.0;
        let u: Vec<f64> = (0..9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let s = sigma_from_factors(&u, rng.random_range(0.01..2.0), rng.random_range(0.01..2.0), 3);
        let prior = rng.random_range(0.2..2.0);
        grid_ok &= gauss_kl(&s, 3, prior).unwrap() > 0.0;
        let iso: Vec<f64> = (0..9).map(|i| if i % 4 == 0 { prior } else { 0.0 }).collect();
        grid_ok &= gauss_kl(&iso, 3, prior).unwrap().abs() <= 1e-12;
    }
    check(exact && grid_ok, format!("bern_kl {b:.6} (oracle {b_oracle:.6}), gauss_kl {g:.6} (oracle {g_oracle:.6}), grids ok {grid_ok}"))
}

fn metric_oracles(_: &mut Lab) -> Check {
    let mut rng = stream(4, "acceptance-metrics");
    let (mut auc_ok, mut prec_ok, mut cases) = (true, true, 0);
    while cases < 200 {
        let n = rng.random_range(2..=12);
        let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..6) as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let (pos, neg): (Vec<usize>, Vec<usize>) = (0..n).partition(|&i| labels[i] == 1);
        if pos.is_empty() || neg.is_empty() {
            continue;
        }
        cases += 1;
        let wins: f64 = pos
            .iter()
            .flat_map(|&p| neg.iter().map(move |&q| (p, q)))
            .map(|(p, q)| match scores[p].total_cmp(&scores[q]) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Equal => 0.5,
                std::cmp::Ordering::Less => 0.0,
            })
            .sum();
        auc_ok &= (roc_auc(&scores, &labels).unwrap() - 100.0 * wins / (pos.len() * neg.len()) as f64).abs() < 1e-9;
        for m in 1..=n {
            let mut order: Vec<usize> = (0..n).collect();
            order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
            let hits = order[..m].iter().filter(|&&i| labels[i] == 1).count();
            prec_ok &= (precision_at_m(&scores, &labels, m).unwrap() - 100.0 * hits as f64 / m as f64).abs() < 1e-12;
        }
    }
    let data = helix_data(&HelixParams::default(), 200, 4, "acceptance-random").unwrap();
    let pos: Vec<&Sample> = data.iter().filter(|s| s.y == 1).take(100).collect();
    let scores: Vec<Vec<f64>> = pos.iter().enumerate().map(|(i, s)| random_baseline(s.cloud.n(), 4, i as u64).scores).collect();
    let random = interpretation_metrics(&scores, &pos, &M_LIST, false).unwrap().auc;
    check(
        auc_ok && prec_ok && pos.len() == 100 && (random - 50.0).abs() <= 2.0,
        format!("AUC oracle ok {auc_ok}, precision oracle ok {prec_ok} on {cases} cases; random interpretation AUC {random:.2}"),
    )
}

struct Interp {
    gaussian: f64,
    bernoulli: f64,
    gradgeo: f64,
    random: f64,
}

fn interp_means(lab: &mut Lab) -> Interp {
    let (data, splits, runs) = lab.helix();
    let eval = |s: Scorer, t: Option<&Trained>, seed: u64| evaluate_interpretation(s, t, data, &splits.test, &M_LIST, false, seed).unwrap().auc;
    let per = |f: &dyn Fn(&SeedRun) -> f64| mean(&runs.iter().map(f).collect::<Vec<_>>());
    Interp {
        gaussian: per(&|r| eval(Scorer::LriGaussian, Some(&r.gaussian), r.seed)),
        bernoulli: per(&|r| eval(Scorer::LriBernoulli, Some(&r.bernoulli), r.seed)),
        gradgeo: per(&|r| eval(Scorer::GradGeo, Some(&r.erm), r.seed)),
        random: per(&|r| eval(Scorer::Random, None, r.seed)),
    }
}

fn interpretation_quality(lab: &mut Lab) -> Check {
    let i = interp_means(lab);
    let pass = i.gaussian >= 80.0
        && i.bernoulli >= 75.0
        && i.gaussian >= i.random + 25.0
        && i.bernoulli >= i.random + 25.0
        && i.gaussian > i.gradgeo
        && i.bernoulli > i.gradgeo;
    check(
        pass,
        format!(
            "interpretation AUC over {} seeds: lri-gaussian {:.2}, lri-bernoulli {:.2}, gradgeo {:.2}, random {:.2}",
            SEEDS.len(),
            i.gaussian,
            i.bernoulli,
            i.gradgeo,
            i.random
        ),
    )
}

fn fine_grained_direction(lab: &mut Lab) -> Check {
    let sweep = lab.sweep();
    let row = |m: &str, b: f64| sweep.rows.iter().find(|r| r.method == m && r.b == b).expect("row per method and field");
    let mut pass = true;
    let mut parts = Vec::new();
    for &b in &SWEEP_B {
        let (l, g) = (row("lri-gaussian", b).mean_angle_deg, row("gradgeo", b).mean_angle_deg);
        pass &= l <= 20.0 && g >= 35.0 && l < g;
        parts.push(format!("B={b}: {l:.1}/{g:.1}"));
    }
    let random: Vec<f64> = sweep.rows.iter().filter(|r| r.method == "random").map(|r| r.mean_angle_deg * r.n_points_used as f64).collect();
    let n_rand: usize = sweep.rows.iter().filter(|r| r.method == "random").map(|r| r.n_points_used).sum();
    let random = random.iter().sum::<f64>() / n_rand as f64;
    pass &= (random - 45.0).abs() <= 2.0;
    check(pass, format!("mean angle lri-gaussian/gradgeo per field [{}]; random {random:.2}", parts.join(", ")))
}

fn field_strength(lab: &mut Lab) -> Check {
    let sweep = lab.sweep();
    let ratios: Vec<String> = sweep
        .rows
        .iter()
        .filter(|r| r.method == "lri-gaussian")
        .map(|r| format!("{}:{:.3}", r.b, r.mean_eigen_ratio.unwrap_or(f64::NAN)))
        .collect();
    match &sweep.fit {
        Some(f) => check(f.r >= 0.9, format!("Pearson r {:.4} (slope {:.4}); mean eigen-ratio per B [{}]", f.r, f.slope, ratios.join(", "))),
        None => check(false, format!("no fit; ratios [{}]", ratios.join(", "))),
    }
}

fn non_degradation(lab: &mut Lab) -> Check {
    let clf = |runs: &[SeedRun], f: &dyn Fn(&SeedRun) -> &Trained| {
        mean(&runs.iter().map(|r| f(r).record.test_classification_auc.expect("test AUC")).collect::<Vec<_>>())
    };
    let (_, _, runs) = lab.helix();
    let h = [clf(runs, &|r| &r.erm), clf(runs, &|r| &r.bernoulli), clf(runs, &|r| &r.gaussian)];

    let mp = MotifParams::default();
    let (motif, _) = generate_motif_dataset(&mp, MOTIF_N, 0).expect("motif data");
    let splits = make_splits(&motif, [0.7, 0.15, 0.15], SplitScheme::BalancedMotif, &mp, 0).expect("motif splits");
    let cfgs = trio_cfgs();
    let t = Instant::now();
    let mruns: Vec<SeedRun> = SEEDS[..1].iter().map(|&s| train_trio([&cfgs[0], &cfgs[1], &cfgs[2]], &motif, &splits, s).expect("motif training")).collect();
    eprintln!("  (motif models trained in {:.0} s)", t.elapsed().as_secs_f64());
    let m = [clf(&mruns, &|r| &r.erm), clf(&mruns, &|r| &r.bernoulli), clf(&mruns, &|r| &r.gaussian)];
    let ok = |v: [f64; 3]| v[1] >= v[0] - 2.0 && v[2] >= v[0] - 2.0;
    check(
        ok(h) && ok(m),
        format!(
            "test AUC erm/lri-bernoulli/lri-gaussian: helix {:.2}/{:.2}/{:.2}, motif {:.2}/{:.2}/{:.2}",
            h[0], h[1], h[2], m[0], m[1], m[2]
        ),
    )
}

fn shift_robustness(lab: &mut Lab) -> Check {
    let (_, _, runs) = lab.helix();
    let mut parts = Vec::new();
    let mut at70 = (0.0, 0.0);
    for &t in &SHIFT_TRACKS {
        let test = helix_data(&HelixParams { n_tracks: t, ..HelixParams::default() }, SHIFT_N, 9, &format!("acceptance-shift-{t}")).unwrap();
        let e = mean(&runs.iter().map(|r| auc_on(&r.erm, &test, 64).unwrap()).collect::<Vec<_>>());
        let g = mean(&runs.iter().map(|r| auc_on(&r.gaussian, &test, 64).unwrap()).collect::<Vec<_>>());
        parts.push(format!("{t} tracks {e:.2}/{g:.2}"));
        if t == 70 {
            at70 = (e, g);
        }
    }
    check(at70.1 >= at70.0, format!("AUC erm/lri-gaussian trained at 10 tracks: {}", parts.join(", ")))
}

fn ablation(lab: &mut Lab) -> Check {
    let with = interp_means(lab).gaussian;
    let (data, splits, runs) = lab.helix();
    let t = Instant::now();
    let without: Vec<f64> = runs
        .iter()
        .map(|r| {
            let cfg = ExperimentConfig { seed: r.seed, soft_graph: false, ..base(Method::LriGaussian) };
            let m = lri::train::train(&cfg, data, splits, |_| {}).expect("ablation training");
            evaluate_interpretation(Scorer::LriGaussian, Some(&m), data, &splits.test, &M_LIST, false, r.seed).unwrap().auc
        })
        .collect();
    eprintln!("  (ablation arm trained in {:.0} s)", t.elapsed().as_secs_f64());
    let without = mean(&without);
    check(with - without >= 10.0, format!("interpretation AUC with reconstruction {with:.2}, without {without:.2}, drop {:.2}", with - without))
}

fn structural(lab: &mut Lab) -> Check {
    let t = Instant::now();
    let (data, splits, runs) = lab.helix();
    let run = &runs[0];
    let mut worst_perm: f64 = 0.0;
    let mut worst_shift: f64 = 0.0;
    let mut spd = true;
    let mut rng = stream(11, "acceptance-structural");
    for tr in [&run.erm, &run.bernoulli, &run.gaussian] {
        let phase = if tr.model.cfg.method.is_lri() { Phase::Lri } else { Phase::Erm };
        for &i in splits.test.iter().take(20) {
            let p = &tr.prepped[i];
            let base = tr.model.predict(&[&p.cloud], &[&p.graph], phase, 1).unwrap()[0];
            let n = p.cloud.n();
            let mut perm: Vec<usize> = (0..n).collect();
            for j in (1..n).rev() {
                perm.swap(j, rng.random_range(0..=j));
            }
            let pc = p.cloud.permuted(&perm);
            let pg = tr.model.hard_graph(&pc).unwrap();
            let permuted = tr.model.predict(&[&pc], &[&pg], phase, 1).unwrap()[0];
            worst_perm = worst_perm.max((base - permuted).abs() / base.abs().max(1.0));

            let mut moved = data[i].clone();
            let shift: Vec<f64> = (0..3).map(|_| rng.random_range(-100.0..100.0)).collect();
            let mut r = moved.cloud.coords().clone();
            for row in 0..r.rows {
                r.row_mut(row).iter_mut().zip(&shift).for_each(|(v, s)| *v += s);
            }
            moved.cloud = lri::cloud::PointCloud::new(Some(moved.cloud.features().clone()), r, 1.0).unwrap();
            let mp = &lri::train::prepare(std::slice::from_ref(&moved), tr.rescale_c, tr.model.cfg.k).unwrap()[0];
            let shifted = tr.model.predict(&[&mp.cloud], &[&mp.graph], phase, 1).unwrap()[0];
            worst_shift = worst_shift.max((base - shifted).abs() / base.abs().max(1.0));
        }
    }
    for &i in &splits.test {
        let p = &run.gaussian.prepped[i];
        let Interpretation::Gaussian(g) = run.gaussian.model.interpret(&p.cloud, &p.graph).unwrap() else { unreachable!() };
        for s in g.sigmas() {
            let (ev, _) = sym_eigen(&s, 3);
            spd &= (0..3).all(|a| (0..3).all(|b| s[a * 3 + b] == s[b * 3 + a])) && ev.iter().all(|&l| l >= 1e-9);
        }
    }
    let mut round_trip = data.iter().all(|s| deserialize_sample(&serialize_sample(s)).is_ok_and(|b| &b == s));
    for tr in [&run.erm, &run.bernoulli, &run.gaussian] {
        let text = serde_json::to_string(&tr.model_file()).unwrap();
        let file: ModelFile = serde_json::from_str(&text).unwrap();
        let back = Trained::from_model_file(&file, data, &tr.record.config).unwrap();
        let phase = if tr.model.cfg.method.is_lri() { Phase::Lri } else { Phase::Erm };
        let idx: Vec<usize> = splits.test.iter().take(20).copied().collect();
        let logits = |t: &Trained| {
            let c: Vec<_> = idx.iter().map(|&i| &t.prepped[i].cloud).collect();
            let g: Vec<_> = idx.iter().map(|&i| &t.prepped[i].graph).collect();
            t.model.predict(&c, &g, phase, 8).unwrap()
        };
        round_trip &= logits(tr) == logits(&back);
        let cfg = &tr.record.config;
        round_trip &= ExperimentConfig::from_text(&cfg.to_text()).is_ok_and(|c| &c == cfg);
    }
    let secs = t.elapsed().as_secs_f64();
    check(
        worst_perm <= 1e-5 && worst_shift <= 1e-5 && spd && round_trip && secs < 60.0,
        format!("permutation {worst_perm:.1e}, translation {worst_shift:.1e}, SPD {spd}, round trips {round_trip}, {secs:.1} s"),
    )
}

type Criterion = (u32, &'static str, fn(&mut Lab) -> Check);

/// Criteria whose outcome depends on training dynamics.
const EMPIRICAL: [u32; 6] = [5, 6, 7, 8, 9, 10];

const CRITERIA: [Criterion; 11] = [
    (1, "gradient suite", gradient_suite),
    (2, "reparameterization law", reparameterization),
    (3, "KL oracles", kl_oracles),
    (4, "metric oracles", metric_oracles),
    (5, "interpretation quality", interpretation_quality),
    (6, "fine-grained direction", fine_grained_direction),
    (7, "field-strength recovery", field_strength),
    (8, "non-degradation", non_degradation),
    (9, "shift robustness", shift_robustness),
    (10, "soft-graph ablation", ablation),
    (11, "structural invariants", structural),
];

fn main() -> ExitCode {
    let only: Option<BTreeSet<u32>> = std::env::var("LRI_ACCEPTANCE_ONLY").ok().map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut lab = Lab::default();
    let mut failed = Vec::new();
    for (id, name, f) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let c = f(&mut lab);
        let verdict = if c.pass { "PASS" } else { "FAIL" };
        println!("criterion {id:>2} {verdict}: {name}: {} [{:.0} s]", c.detail, t.elapsed().as_secs_f64());
        if !c.pass {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        return ExitCode::SUCCESS;
    }
    println!("failed criteria: {failed:?}");
    let strict = std::env::var_os("LRI_ACCEPTANCE_STRICT").is_some();
    if strict || failed.iter().any(|id| !EMPIRICAL.contains(id)) {
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
