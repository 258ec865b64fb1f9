//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any
//! criterion fails. Run with `cargo test --release -p nclab --test acceptance`.

use std::fs;
use std::process::ExitCode;
use std::time::Instant;

use nclab::data::{long_tail_counts, LongTailSpec};
use nclab::etf::{etf_deviation, make_etf, optimal_angle_deg};
use nclab::harness::{
    build_objective, effective_eta, emit_outputs, run_train, LossLog, Mode, RunOutput, StepInput, TrainConfig,
};
use nclab::losses::{
    cross_entropy, eta, hycon, inverse_frequency_weights, p2p, per_sample_class_means, reweighted_ce, P2pInput,
};
use nclab::model::{init_params, Dims, NetworkParams};
use nclab::ncmetrics::{
    centered_pairwise_cosines, class_stats, icpa_degrees, ncc_agreement, NcReport,
};
use nclab::numerics::{grad_check, Graph, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = (bool, String);

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

// ---------------------------------------------------------------- ETF

fn etf_geometry() -> Outcome {
    let mut worst = 0.0f64;
    for c in [2usize, 4, 10, 16] {
        let frame = make_etf(2 * c, c, 7).unwrap();
        worst = worst.max(etf_deviation(&frame.vertices).unwrap());
    }
    let frame = make_etf(20, 10, 7).unwrap();
    let rows = frame.vertex_rows();
    let vs: Vec<Vec<f64>> = (0..10).map(|c| rows.row(c).to_vec()).collect();
    let cos = centered_pairwise_cosines(&vs, &[0.0; 20]).unwrap();
    let ang = icpa_degrees(&cos);
    let mut angle_err = 0.0f64;
    for i in 0..10 {
        for j in 0..10 {
            if i != j {
                angle_err = angle_err.max((ang[i][j] - 96.379).abs());
            }
        }
    }
    let opt = optimal_angle_deg(10).unwrap();
    let ok = worst < 1e-9 && angle_err <= 1e-3 && (opt - 96.379).abs() <= 1e-3;
    (ok, format!("max deviation {worst:.2e}; C=10 ICPA off 96.379° by ≤ {angle_err:.2e}°"))
}

// ---------------------------------------------------------------- gradients

const STEP: f64 = 1e-5;

fn suite<F>(name: &str, instances: usize, tol: f64, mut one: F) -> (bool, String)
where
    F: FnMut(&mut ChaCha8Rng) -> f64,
{
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 1000 + 17);
    let worst = (0..instances).map(|_| one(&mut rng)).fold(0.0, f64::max);
    (worst < tol, format!("{name} {worst:.1e}"))
}

fn check(f: impl Fn(&mut Graph, &[Var]) -> nclab::Result<Var>, params: &[Tensor], tol: f64) -> f64 {
    grad_check(f, params, STEP, tol).unwrap().max_rel_err
}

/// Smallest |pre-activation| of any relu unit for inputs `x`.
fn kink_margin(p: &NetworkParams, x: &Tensor) -> f64 {
    let affine = |a: &Tensor, name: &str| {
        let y = a.matmul(p.get(&format!("{name}.weight")).unwrap()).unwrap();
        let b = p.get(&format!("{name}.bias")).unwrap();
        let data = y.data().chunks(y.cols()).flat_map(|r| r.iter().zip(b.data()).map(|(u, v)| u + v)).collect();
        Tensor::matrix(y.rows(), y.cols(), data).unwrap()
    };
    let mut margin = f64::INFINITY;
    let mut relu = |t: Tensor| {
        margin = margin.min(t.data().iter().fold(f64::INFINITY, |m, v| m.min(v.abs())));
        t.map(|v| v.max(0.0))
    };
    let mut a = x.clone();
    for l in 0..p.dims.hidden.len() + 1 {
        a = relu(affine(&a, &format!("encoder.{l}")));
    }
    let z = affine(&relu(affine(&a, "proj1.0")), "proj1.1");
    relu(affine(&z, "proj2.0"));
    margin
}

fn composite_instance(rng: &mut ChaCha8Rng) -> f64 {
    let dims = Dims { input: 5, hidden: vec![6, 6], feature: 4, proj: 3, classes: 3 };
    let n = 6;
    loop {
        let mut params = init_params(&dims, rng.random()).unwrap();
        for t in params.tensors_mut() {
            for v in t.data_mut() {
                let e: f64 = StandardNormal.sample(rng);
                *v += 0.3 * e;
            }
        }
        let v1 = randn(rng, n, dims.input);
        let v2 = randn(rng, n, dims.input);
        if kink_margin(&params, &v1).min(kink_margin(&params, &v2)) < 1e-3 {
            continue;
        }
        let mut labels = vec![0, 1, 2];
        labels.extend(random_labels(rng, n - 3, 3));
        let counts = [4usize, 2, 1];
        let weights = inverse_frequency_weights(&counts).unwrap();
        let config = TrainConfig {
            classes: 3,
            alpha: rng.random_range(0.1..2.0),
            ..TrainConfig::default()
        };
        let eta_val = rng.random_range(0.0..1.0);
        let f = |g: &mut Graph, vars: &[Var]| {
            let bound = params.bind_vars(vars)?;
            let input = StepInput { view1: &v1, view2: &v2, labels: &labels, eta: eta_val, class_weights: &weights };
            build_objective(g, &config, &bound, &input, None).map(|(root, _)| root)
        };
        return check(f, params.tensors(), 1e-4);
    }
}

fn gradient_suite() -> Outcome {
    let n_inst = 100;
    let mut parts = Vec::new();
    parts.push(suite("ce", n_inst, 1e-5, |rng| {
        let (n, c) = (rng.random_range(1..8), rng.random_range(2..6));
        let labels = random_labels(rng, n, c);
        let logits = randn(rng, n, c).scale(2.0);
        check(|g, v| cross_entropy(g, v[0], &labels), &[logits], 1e-5)
    }));
    parts.push(suite("reweighted-ce", n_inst, 1e-5, |rng| {
        let (n, c) = (rng.random_range(1..8), rng.random_range(2..6));
        let labels = random_labels(rng, n, c);
        let counts: Vec<usize> = (0..c).map(|_| rng.random_range(1..50)).collect();
        let w = inverse_frequency_weights(&counts).unwrap();
        let logits = randn(rng, n, c).scale(2.0);
        check(|g, v| reweighted_ce(g, v[0], &labels, &w), &[logits], 1e-5)
    }));
    parts.push(suite("hycon", n_inst, 1e-5, |rng| {
        let (n, p) = (rng.random_range(2..7), rng.random_range(2..5));
        let labels = random_labels(rng, n, 3);
        let ps: Vec<Tensor> = (0..4).map(|_| randn(rng, n, p)).collect();
        let f = |g: &mut Graph, v: &[Var]| {
            let u1 = per_sample_class_means(g, v[2], &labels)?;
            let u2 = per_sample_class_means(g, v[3], &labels)?;
            hycon(g, v[0], v[1], v[2], v[3], u1, u2)
        };
        check(f, &ps, 1e-5)
    }));
    parts.push(suite("p2p-raw", n_inst, 1e-5, |rng| {
        let (c, d) = (rng.random_range(2..7), rng.random_range(2..9));
        check(|g, v| p2p(g, v[0], &P2pInput::Raw), &[randn(rng, c, d)], 1e-5)
    }));
    parts.push(suite("p2p-centered", n_inst, 1e-5, |rng| {
        let (c, d) = (rng.random_range(2..7), rng.random_range(2..9));
        check(|g, v| p2p(g, v[0], &P2pInput::CenterNormalize), &[randn(rng, c, d)], 1e-5)
    }));
    parts.push(suite("composite", n_inst, 1e-4, composite_instance));
    let ok = parts.iter().all(|p| p.0);
    let detail = parts.into_iter().map(|p| p.1).collect::<Vec<_>>().join(", ");
    (ok, format!("max rel. err: {detail} (100 instances each)"))
}

// ---------------------------------------------------------------- P2P

fn descend(params: &mut [Tensor], lr: f64, steps: usize, f: impl Fn(&mut Graph, &[Var]) -> nclab::Result<Var>) -> f64 {
    for _ in 0..steps {
        let mut g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        let root = f(&mut g, &vars).unwrap();
        let grads = g.backward(root).unwrap();
        for (p, v) in params.iter_mut().zip(&vars) {
            *p = p.sub(&grads.get(*v).scale(lr)).unwrap();
        }
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars).unwrap();
    g.value(root).item()
}

/// Pairwise cosines of rows centered by their mean, as the classifier
/// diagnostics measure them.
fn cosines_ok(v: &Tensor, target: f64, tol: f64) -> bool {
    let rows: Vec<Vec<f64>> = (0..v.rows()).map(|i| v.row(i).to_vec()).collect();
    let cos = centered_pairwise_cosines(&rows, v.mean_rows().data()).unwrap();
    (0..v.rows()).all(|i| (0..v.rows()).all(|j| i == j || (cos.get(i, j) - target).abs() <= tol))
}

fn gram_of(v: &Tensor) -> Tensor {
    v.matmul(&v.transpose()).unwrap()
}

fn centered_normalized(v: &Tensor) -> Tensor {
    let mean = v.mean_rows();
    let rows: Vec<Vec<f64>> = (0..v.rows())
        .map(|i| {
            let r: Vec<f64> = v.row(i).iter().zip(mean.data()).map(|(a, b)| a - b).collect();
            nclab::numerics::tensor::l2_normalize(&r).unwrap()
        })
        .collect();
    Tensor::from_rows(&rows).unwrap()
}

fn p2p_minimizer() -> Outcome {
    let (c, d) = (4, 8);
    let mut good = 0;
    for s in 0..32u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut ps = [randn(&mut rng, c, d)];
        let loss = descend(&mut ps, 0.1, 5000, |g, v| p2p(g, v[0], &P2pInput::Raw));
        if loss < 1e-6 && cosines_ok(&ps[0], -1.0 / 3.0, 1e-3) {
            good += 1;
        }
    }
    let mut joint = 0.0f64;
    for s in 100..104u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        let mut ps = [randn(&mut rng, c, d), randn(&mut rng, c, d)];
        descend(&mut ps, 0.1, 20000, |g, v| {
            let a = p2p(g, v[0], &P2pInput::CenterNormalize)?;
            let b = p2p(g, v[1], &P2pInput::Raw)?;
            g.add(a, b)
        });
        let diff = gram_of(&centered_normalized(&ps[0])).max_abs_diff(&gram_of(&ps[1]));
        joint = joint.max(diff);
    }
    let ok = good >= 30 && joint < 1e-3;
    (ok, format!("{good}/32 starts reach loss < 1e-6 with cosines −1/3 ± 1e-3; joint mean/W Gram gap {joint:.1e}"))
}

// ---------------------------------------------------------------- HyCon

fn hycon_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, 5, 4);

    // identical vectors everywhere
    let mut g = Graph::new();
    let v: Vec<Var> = (0..6).map(|_| g.param(x.clone())).collect();
    let val = hycon(&mut g, v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
    let coincide = g.value(val).item();
    let coincide_ok = (coincide + 4.0).abs() < 1e-12;

    // z enters only through the stop-gradient
    let mut g = Graph::new();
    let v: Vec<Var> = (0..6).map(|_| g.param(randn(&mut rng, 5, 4))).collect();
    let root = hycon(&mut g, v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
    let grads = g.backward(root).unwrap();
    let sg_max = [v[2], v[3]]
        .iter()
        .flat_map(|&z| grads.get(z).into_data())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let sg_ok = sg_max == 0.0;

    // free vectors driven to the minimum; z only receives gradient through
    // the stop-gradient, so it stays where it started
    let mut ps: Vec<Tensor> = (0..6).map(|_| randn(&mut rng, 5, 4)).collect();
    let z_start = (ps[2].clone(), ps[3].clone());
    let f = |g: &mut Graph, v: &[Var]| hycon(g, v[0], v[1], v[2], v[3], v[4], v[5]);
    let mut loss = 0.0;
    for _ in 0..100 {
        loss = descend(&mut ps, 0.5, 100, f);
        if loss < -3.9999 {
            break;
        }
    }
    let cos = |a: &Tensor, b: &Tensor| {
        (0..a.rows())
            .map(|i| {
                let (x, y) = (a.row(i), b.row(i));
                nclab::numerics::tensor::dot(x, y)
                    / (nclab::numerics::tensor::norm(x) * nclab::numerics::tensor::norm(y))
            })
            .fold(f64::INFINITY, f64::min)
    };
    let min_cos = [
        cos(&ps[0], &ps[3]),
        cos(&ps[5], &ps[3]),
        cos(&ps[1], &ps[2]),
        cos(&ps[4], &ps[2]),
    ]
    .into_iter()
    .fold(f64::INFINITY, f64::min);
    let z_fixed = ps[2] == z_start.0 && ps[3] == z_start.1;
    let min_ok = loss < -3.999 && min_cos > 0.999 && z_fixed;
    (
        coincide_ok && sg_ok && min_ok,
        format!(
            "coincident value {coincide:.15}; max |grad| through sg {sg_max:.1e}; optimized loss {loss:.5} with min cosine {min_cos:.5}"
        ),
    )
}

// ---------------------------------------------------------------- training runs

struct Runs {
    /// `ce[seed][k]` for beta = 1, 10, 100.
    ce: Vec<Vec<RunOutput>>,
    allnc: Vec<RunOutput>,
}

const BETAS: [f64; 3] = [1.0, 10.0, 100.0];
const SEEDS: [u64; 3] = [0, 1, 2];

fn config(mode: Mode, beta: f64, seed: u64) -> TrainConfig {
    TrainConfig { mode, beta, seed, data_seed: seed, ..TrainConfig::default() }
}

fn train_all() -> Runs {
    let mut ce = Vec::new();
    let mut allnc = Vec::new();
    for seed in SEEDS {
        ce.push(BETAS.iter().map(|&b| run_train(&config(Mode::CeBaseline, b, seed)).unwrap()).collect());
        allnc.push(run_train(&config(Mode::AllNc, 100.0, seed)).unwrap());
    }
    Runs { ce, allnc }
}

fn minority_collapse(runs: &Runs) -> Outcome {
    let mut factor_votes = 0;
    let mut mono_votes = 0;
    let mut lines = Vec::new();
    for (s, per_beta) in runs.ce.iter().enumerate() {
        let r: Vec<&NcReport> = per_beta.iter().map(|o| &o.final_report).collect();
        let factor = r[2].std_cos_mu >= 2.0 * r[0].std_cos_mu && r[2].std_cos_w >= 2.0 * r[0].std_cos_w;
        let mono = r.windows(2).all(|w| w[0].std_cos_mu <= w[1].std_cos_mu && w[0].std_cos_w <= w[1].std_cos_w);
        factor_votes += factor as usize;
        mono_votes += mono as usize;
        lines.push(format!(
            "seed {s}: mu {:.3}/{:.3}/{:.3} w {:.3}/{:.3}/{:.3}",
            r[0].std_cos_mu, r[1].std_cos_mu, r[2].std_cos_mu, r[0].std_cos_w, r[1].std_cos_w, r[2].std_cos_w
        ));
    }
    let ok = factor_votes >= 2 && mono_votes >= 2;
    (
        ok,
        format!(
            "factor ≥ 2 in {factor_votes}/3 seeds, non-decreasing in {mono_votes}/3 (Std at beta 1/10/100: {})",
            lines.join("; ")
        ),
    )
}

fn allnc_recovery(runs: &Runs) -> Outcome {
    let mut strict = 0;
    let mut half = 0;
    let mut lines = Vec::new();
    for (s, a) in runs.allnc.iter().enumerate() {
        let (a, c) = (&a.final_report, &runs.ce[s][2].final_report);
        let below = a.std_cos_mu < c.std_cos_mu && a.std_cos_w < c.std_cos_w && a.delta < c.delta;
        strict += below as usize;
        half += (a.delta < 0.5 * c.delta) as usize;
        lines.push(format!(
            "seed {s}: mu {:.3}<{:.3} w {:.4}<{:.3} delta {:.3} vs {:.3}",
            a.std_cos_mu, c.std_cos_mu, a.std_cos_w, c.std_cos_w, a.delta, c.delta
        ));
    }
    let ok = strict == 3 && half == 3;
    (
        ok,
        format!(
            "all three below CE in {strict}/3 seeds, delta < 50% of CE in {half}/3 ({}); \
             delta floor for an exact-ETF classifier with class means on the same ETF: {:.3}",
            lines.join("; "),
            etf_delta_floor(&runs.allnc[0].train_counts)
        ),
    )
}

/// Δ when W is an exact simplex ETF and the class means are exactly the
/// same ETF: the count-weighted global mean still shifts the centered means.
fn etf_delta_floor(counts: &[usize]) -> f64 {
    let c = counts.len();
    let w = make_etf(c, c, 0).unwrap().vertex_rows();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for (k, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            rows.push(w.row(k).to_vec());
            labels.push(k);
        }
    }
    let stats = class_stats(&Tensor::from_rows(&rows).unwrap(), &labels, c).unwrap();
    nclab::ncmetrics::self_duality_delta(&w, &stats).unwrap()
}

fn minority_benefit(runs: &Runs) -> Outcome {
    let mut wins = 0;
    let mut lines = Vec::new();
    for (s, a) in runs.allnc.iter().enumerate() {
        let (a, c) = (&a.final_accuracy, &runs.ce[s][2].final_accuracy);
        let (af, cf) = (a.few.unwrap_or(f64::NAN), c.few.unwrap_or(f64::NAN));
        wins += (af > cf && a.overall >= c.overall) as usize;
        lines.push(format!("seed {s}: few {af:.3} vs {cf:.3}, all {:.3} vs {:.3}", a.overall, c.overall));
    }
    (wins == 3, format!("{wins}/3 seeds ({})", lines.join("; ")))
}

fn nc4_closure(runs: &Runs) -> Outcome {
    let frame = make_etf(20, 10, 3).unwrap();
    let means = frame.vertex_rows().scale(5.0);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for c in 0..10 {
        for _ in 0..4 {
            rows.push(means.row(c).to_vec());
            labels.push(c);
        }
    }
    let features = Tensor::from_rows(&rows).unwrap();
    let stats = class_stats(&features, &labels, 10).unwrap();
    let exact = ncc_agreement(&features, &means, &[0.0; 10], &stats).unwrap();
    let trained = runs.allnc[0].final_report.ncc_agreement;
    (
        exact == 1.0 && trained >= 0.95,
        format!("exact ETF agreement {exact}; converged AllNC agreement {trained:.4}"),
    )
}

fn additivity(epochs: &[LossLog], alpha: f64) -> f64 {
    epochs
        .iter()
        .map(|l| (l.total - (l.branch1 + l.branch2 + alpha * (l.hycon + l.p2p_mu))).abs())
        .fold(0.0, f64::max)
}

fn schedule_and_plumbing(runs: &Runs) -> Outcome {
    let endpoints = eta(0, 100, 2.0).unwrap() == 1.0
        && eta(100, 100, 2.0).unwrap() == 0.0
        && eta(50, 100, 1.0).unwrap() == 0.5
        && eta(50, 100, 2.0).unwrap() == 0.75;
    let decreasing = [0.5, 1.0, 2.0, 4.0]
        .iter()
        .all(|&gm| (0..100).all(|t| eta(t + 1, 100, gm).unwrap() < eta(t, 100, gm).unwrap()));
    let increasing = (1..100).all(|t| {
        [0.5, 1.0, 2.0, 4.0]
            .windows(2)
            .all(|w| eta(t, 100, w[0]).unwrap() < eta(t, 100, w[1]).unwrap())
    });
    let trained = runs.allnc.iter().chain(runs.ce.iter().flatten());
    let mut worst_add = 0.0f64;
    for r in trained {
        for e in &r.epochs {
            worst_add = worst_add.max(additivity(&[e.losses], e.alpha));
        }
    }
    let eta_logged = runs.allnc[0]
        .epochs
        .iter()
        .all(|e| e.eta == effective_eta(&runs.allnc[0].config, e.epoch).unwrap());

    let small = TrainConfig {
        n_max: 80,
        beta: 10.0,
        t_max: 4,
        test_per_class: 10,
        ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let mut identical = true;
    let mut texts: Vec<Vec<Vec<u8>>> = Vec::new();
    for k in 0..2 {
        let out = dir.path().join(format!("run{k}"));
        emit_outputs(&run_train(&small).unwrap(), &out).unwrap();
        texts.push(
            ["epochs.csv", "features.csv", "weights.csv", "report.json"]
                .iter()
                .map(|f| fs::read(out.join(f)).unwrap())
                .collect(),
        );
    }
    identical &= texts[0] == texts[1];

    let ok = endpoints && decreasing && increasing && eta_logged && worst_add <= 1e-10 && identical;
    (
        ok,
        format!(
            "eta endpoints {endpoints}, strictly decreasing in T {decreasing}, increasing in gamma {increasing}; \
             logged eta matches schedule {eta_logged}; max additivity gap {worst_add:.1e}; byte-identical reruns {identical}"
        ),
    )
}

// ---------------------------------------------------------------- driver

fn report(name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let (ok, detail) = f();
    println!(
        "{} {name} ({:.1}s): {detail}",
        if ok { "PASS" } else { "FAIL" },
        t.elapsed().as_secs_f64()
    );
    ok
}

fn main() -> ExitCode {
    // Optional name filters: `-- gradient p2p` runs only matching criteria.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let selected = |name: &str| filters.is_empty() || filters.iter().any(|f| name.contains(f.as_str()));

    // The desk-scale long-tail geometry the comparative criteria use.
    let counts = long_tail_counts(&LongTailSpec { classes: 10, n_max: 500, beta: 100.0 }).unwrap();
    assert_eq!((counts[0], counts[9]), (500, 5));

    let mut ok = true;
    let standalone: [(&str, fn() -> Outcome); 4] = [
        ("etf-geometry", etf_geometry),
        ("gradient-suite", gradient_suite),
        ("p2p-minimizer", p2p_minimizer),
        ("hycon-semantics", hycon_semantics),
    ];
    for (name, f) in standalone {
        if selected(name) {
            ok &= report(name, f);
        }
    }

    let trained: [(&str, fn(&Runs) -> Outcome); 5] = [
        ("minority-collapse", minority_collapse),
        ("allnc-recovery", allnc_recovery),
        ("minority-benefit", minority_benefit),
        ("nc4-closure", nc4_closure),
        ("schedule-and-plumbing", schedule_and_plumbing),
    ];
    if trained.iter().any(|(name, _)| selected(name)) {
        let t = Instant::now();
        let runs = train_all();
        println!(
            "     trained {} comparative runs in {:.1}s",
            runs.allnc.len() + runs.ce.iter().map(Vec::len).sum::<usize>(),
            t.elapsed().as_secs_f64()
        );
        for (name, f) in trained {
            if selected(name) {
                ok &= report(name, || f(&runs));
            }
        }
    }

    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
