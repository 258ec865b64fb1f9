use std::fs;

use nclab::data::{
    dataset_from_rows, gen_gaussian_mixture, load_csv, parse_labeled_csv, write_labeled_csv, MeanPlacement,
    SyntheticSpec,
};
use nclab::harness::output::EPOCHS_HEADER;
use nclab::harness::sweep::sweep_table;
use nclab::harness::train::accuracy_from_logits;
use nclab::harness::{
    build_objective, effective_eta, emit_outputs, emit_sweep, metrics_from_files, run_train, step_gradients, sweep,
    Component, Groups, Mode, RunStatus, StepInput, SweepParam, TrainConfig,
};
use nclab::losses::inverse_frequency_weights;
use nclab::model::{forward, init_params, Dims};
use nclab::ncmetrics::NcReport;
use nclab::numerics::{grad_check, Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// A few-second configuration with every component active.
fn small() -> TrainConfig {
    TrainConfig {
        classes: 4,
        input_dim: 8,
        n_max: 60,
        beta: 10.0,
        test_per_class: 20,
        hidden: vec![16],
        feature_dim: 6,
        proj_dim: 5,
        batch_size: 16,
        t_max: 6,
        ..TrainConfig::default()
    }
}

fn small_step() -> (TrainConfig, nclab::model::NetworkParams, Tensor, Tensor, Vec<usize>, Vec<f64>) {
    let config = small();
    let params = init_params(&config.dims(), 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let v1 = randn(&mut rng, 10, config.input_dim);
    let v2 = randn(&mut rng, 10, config.input_dim);
    let labels = vec![0, 1, 2, 3, 0, 1, 2, 0, 0, 1];
    let weights = inverse_frequency_weights(&[4, 3, 2, 1]).unwrap();
    (config, params, v1, v2, labels, weights)
}

#[test]
fn combined_backward_equals_sum_of_component_backwards() {
    let (config, params, v1, v2, labels, weights) = small_step();
    let input = StepInput { view1: &v1, view2: &v2, labels: &labels, eta: 0.3, class_weights: &weights };
    let (_, full) = step_gradients(&config, &params, &input, None).unwrap();
    let parts: Vec<_> = [Component::Branches, Component::Hycon, Component::P2pMu]
        .into_iter()
        .map(|c| step_gradients(&config, &params, &input, Some(c)).unwrap().1)
        .collect();
    for (k, total) in full.iter().enumerate() {
        let total = total.clone().unwrap_or_else(|| Tensor::zeros(params.tensors()[k].shape()));
        let mut sum = Tensor::zeros(total.shape());
        for p in &parts {
            if let Some(g) = &p[k] {
                sum = sum.add(g).unwrap();
            }
        }
        assert!(total.max_abs_diff(&sum) <= 1e-10, "{}", params.names()[k]);
    }
}

#[test]
fn both_views_read_the_same_parameters() {
    let (config, params, v1, _, _, _) = small_step();
    let mut g = Graph::new();
    let bound = params.bind(&mut g, &[]);
    let x = g.constant(v1);
    let a = forward(&mut g, &bound, x).unwrap();
    let b = forward(&mut g, &bound, x).unwrap();
    assert_eq!(g.value(a.logits), g.value(b.logits));
    let d = g.sub(a.logits, b.logits).unwrap();
    let s = g.sum(d);
    let grads = g.backward(s).unwrap();
    for v in bound.vars() {
        assert!(grads.get(*v).data().iter().all(|&x| x == 0.0));
    }
    assert_eq!(config.dims().hidden.len() + 1, 2);
}

#[test]
fn full_objective_through_three_layer_stack_passes_grad_check() {
    let dims = Dims { input: 4, hidden: vec![5, 5], feature: 4, proj: 3, classes: 3 };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut params = init_params(&dims, 9).unwrap();
    for t in params.tensors_mut() {
        let noise = randn(&mut rng, 1, t.len());
        for (v, e) in t.data_mut().iter_mut().zip(noise.data()) {
            *v += 0.3 * e;
        }
    }
    let v1 = randn(&mut rng, 5, 4);
    let v2 = randn(&mut rng, 5, 4);
    let labels = vec![0, 1, 2, 0, 1];
    let weights = inverse_frequency_weights(&[3, 2, 1]).unwrap();
    let config = TrainConfig { classes: 3, ..TrainConfig::default() };
    let f = |g: &mut Graph, vars: &[Var]| {
        let bound = params.bind_vars(vars)?;
        let input = StepInput { view1: &v1, view2: &v2, labels: &labels, eta: 0.6, class_weights: &weights };
        build_objective(g, &config, &bound, &input, None).map(|(r, _)| r)
    };
    let rep = grad_check(f, params.tensors(), 1e-5, 1e-4).unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn alpha_zero_sends_no_gradient_to_the_predictor_head() {
    let (mut config, params, v1, v2, labels, weights) = small_step();
    config.alpha = 0.0;
    let input = StepInput { view1: &v1, view2: &v2, labels: &labels, eta: 0.3, class_weights: &weights };
    let (_, grads) = step_gradients(&config, &params, &input, None).unwrap();
    for k in params.group("proj2") {
        let norm = grads[k].as_ref().map_or(0.0, |g| g.frobenius_norm());
        assert_eq!(norm, 0.0, "{}", params.names()[k]);
    }
    config.alpha = 1.0;
    let (_, grads) = step_gradients(&config, &params, &input, None).unwrap();
    assert!(params.group("proj2").iter().any(|&k| grads[k].as_ref().is_some_and(|g| g.frobenius_norm() > 0.0)));
}

#[test]
fn gamma_sweep_orders_eta_pointwise() {
    let gammas = [0.5, 1.0, 2.0, 4.0];
    let configs: Vec<TrainConfig> = gammas.iter().map(|&g| TrainConfig { gamma: g, ..small() }).collect();
    let t_max = configs[0].t_max;
    for t in 1..t_max {
        let etas: Vec<f64> = configs.iter().map(|c| effective_eta(c, t).unwrap()).collect();
        assert!(etas.windows(2).all(|w| w[0] < w[1]), "{etas:?}");
    }
}

#[test]
fn random_classifier_scores_chance() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 10_000;
    let logits = randn(&mut rng, n, 10);
    let labels: Vec<usize> = (0..n).map(|i| i % 10).collect();
    let groups = Groups::from_counts(&[500; 10], 500);
    let acc = accuracy_from_logits(&logits, &labels, &groups);
    assert!((acc.overall - 0.1).abs() <= 0.02, "{}", acc.overall);
    assert_eq!(groups.many.len() + groups.medium.len() + groups.few.len(), 10);
}

#[test]
fn perfect_classifier_scores_one_everywhere() {
    let labels: Vec<usize> = (0..30).map(|i| i % 3).collect();
    let rows: Vec<Vec<f64>> = labels.iter().map(|&y| (0..3).map(|c| if c == y { 1.0 } else { 0.0 }).collect()).collect();
    let groups = Groups::from_counts(&[100, 10, 2], 100);
    let acc = accuracy_from_logits(&Tensor::from_rows(&rows).unwrap(), &labels, &groups);
    assert_eq!(acc.overall, 1.0);
    assert_eq!((acc.many, acc.medium, acc.few), (Some(1.0), Some(1.0), Some(1.0)));
}

#[test]
fn training_outputs_are_deterministic_and_complete() {
    let config = small();
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let run = run_train(&config).unwrap();
    assert_eq!(run.status, RunStatus::Completed);
    emit_outputs(&run, &a).unwrap();
    emit_outputs(&run_train(&config).unwrap(), &b).unwrap();

    let epochs = fs::read_to_string(a.join("epochs.csv")).unwrap();
    assert_eq!(epochs, fs::read_to_string(b.join("epochs.csv")).unwrap());
    let mut lines = epochs.lines();
    assert_eq!(lines.next(), Some(EPOCHS_HEADER));
    assert_eq!(lines.count(), config.t_max);

    for f in ["config.resolved", "report.json", "summary.json", "features.csv", "weights.csv", "icpa_mu.csv", "icpa_w.csv"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    let resolved = TrainConfig::from_file(&a.join("config.resolved")).unwrap();
    assert_eq!(resolved, config);

    // logged eta follows the schedule and the total adds up
    for e in &run.epochs {
        assert_eq!(e.eta, 1.0 - (e.epoch as f64 / config.t_max as f64).powf(config.gamma));
        let l = e.losses;
        assert!((l.total - (l.branch1 + l.branch2 + e.alpha * (l.hycon + l.p2p_mu))).abs() <= 1e-10);
    }
}

#[test]
fn metrics_on_exported_files_reproduce_the_report() {
    let run = run_train(&small()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    emit_outputs(&run, dir.path()).unwrap();
    let saved: NcReport = serde_json::from_str(&fs::read_to_string(dir.path().join("report.json")).unwrap()).unwrap();
    let again = metrics_from_files(&dir.path().join("features.csv"), &dir.path().join("weights.csv"), None).unwrap();
    for (x, y) in [
        (saved.nc1, again.nc1),
        (saved.std_cos_mu, again.std_cos_mu),
        (saved.std_cos_w, again.std_cos_w),
        (saved.delta, again.delta),
        (saved.ncc_agreement, again.ncc_agreement),
    ] {
        assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
    }
    for (r, s) in saved.icpa_mu.iter().zip(&again.icpa_mu) {
        for (x, y) in r.iter().zip(s) {
            assert!((x - y).abs() <= 1e-9);
        }
    }
}

#[test]
fn ablated_components_contribute_nothing() {
    let config = TrainConfig {
        mode: Mode::Ablation,
        disable: nclab::harness::Disabled { hycon: true, p2p_w: true, ..Default::default() },
        t_max: 2,
        ..small()
    };
    let run = run_train(&config).unwrap();
    for e in &run.epochs {
        assert_eq!(e.losses.hycon, 0.0);
        assert_eq!(e.losses.p2p_w, 0.0);
        assert!(e.losses.p2p_mu > 0.0);
    }
}

#[test]
fn balanced_data_makes_reweighting_a_no_op() {
    let config = TrainConfig { beta: 1.0, t_max: 3, ..small() };
    let run = run_train(&config).unwrap();
    for e in &run.epochs {
        assert_eq!(e.losses.ce, e.losses.re);
    }
}

#[test]
fn divergence_stops_with_last_good_epoch() {
    let config = TrainConfig { lr: 1e6, momentum: 0.99, t_max: 6, ..small() };
    let run = run_train(&config).unwrap();
    match &run.status {
        RunStatus::Diverged { epoch, .. } => assert_eq!(run.epochs.len(), epoch - 1),
        RunStatus::Completed => panic!("expected divergence"),
    }
    assert!(run.params.tensors().iter().all(Tensor::is_finite));
}

#[test]
fn sweep_runs_every_value_and_marks_failures() {
    let dir = tempfile::tempdir().unwrap();
    let config = TrainConfig { t_max: 2, out_dir: dir.path().to_path_buf(), ..small() };
    let rows = sweep(&config, SweepParam::Beta, &[1.0, 10.0, 1e9]).unwrap();
    assert_eq!(rows.len(), 3);
    assert!(rows[0].outcome.is_ok() && rows[1].outcome.is_ok());
    assert!(rows[2].outcome.is_err());
    emit_sweep(&rows, dir.path()).unwrap();
    let table = fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
    assert_eq!(table, sweep_table(&rows));
    assert_eq!(table.lines().count(), 4);
    assert!(dir.path().join("beta=10").join("epochs.csv").is_file());
}

#[test]
fn test_split_is_balanced_whatever_the_training_beta() {
    let config = TrainConfig { beta: 10.0, ..small() };
    let (train, test) = nclab::harness::build_datasets(&config).unwrap();
    assert_eq!(test.counts(), vec![config.test_per_class; config.classes]);
    assert_eq!(train.counts()[0], config.n_max);
    assert_eq!(*train.counts().last().unwrap(), 6);
}

#[test]
fn csv_datasets_round_trip() {
    let spec = SyntheticSpec {
        classes: 3,
        input_dim: 4,
        placement: MeanPlacement::Random,
        radius: 2.0,
        noise_std: 0.5,
        mean_seed: 1,
    };
    let ds = gen_gaussian_mixture(&spec, &[5, 4, 3], 8).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("data.csv");
    write_labeled_csv(&path, &ds.x, &ds.y).unwrap();
    let back = load_csv(&path).unwrap();
    assert_eq!(back.y, ds.y);
    assert_eq!(back.label_base, 1);
    assert!(back.x.max_abs_diff(&ds.x) <= 1e-8 * 10.0);

    // a training run on the CSV input
    let config = TrainConfig {
        data: nclab::harness::DataSource::Csv,
        train_path: Some(path.clone()),
        classes: 3,
        input_dim: 4,
        hidden: vec![8],
        feature_dim: 4,
        proj_dim: 3,
        t_max: 2,
        ..TrainConfig::default()
    };
    assert_eq!(run_train(&config).unwrap().epochs.len(), 2);
}

#[test]
fn csv_parsing_errors_name_the_line() {
    match parse_labeled_csv("1.0,2.0,1\n3.0,2\n") {
        Err(nclab::Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    match parse_labeled_csv("a,b,label\n1.0,x,1\n") {
        Err(nclab::Error::Parse { line, .. }) => assert_eq!(line, 2),
        other => panic!("{other:?}"),
    }
    let ds = dataset_from_rows(parse_labeled_csv("0.5,1\n0.1,0\n0.2,2\n").unwrap()).unwrap();
    assert_eq!((ds.y.clone(), ds.label_base, ds.classes), (vec![1, 0, 2], 0, 3));
    assert!(dataset_from_rows(parse_labeled_csv("0.5,1\n0.1,3\n").unwrap()).is_err());
}

#[test]
fn unknown_config_keys_are_rejected() {
    assert!(TrainConfig::parse_text("alpha = 1\nlearning_rate = 0.1\n").is_err());
    let c = TrainConfig::parse_text("# comment\n\nalpha = 2\nmode = ce\n").unwrap();
    assert_eq!((c.alpha, c.mode), (2.0, Mode::CeBaseline));
    assert!(TrainConfig::parse_text("disable = hycon\n").is_err());
}

/// AllNC with the regularizers on helps the Few group relative to alpha = 0.
#[test]
fn alpha_helps_the_minority_classes() {
    let few = |alpha: f64| {
        let run = run_train(&TrainConfig { alpha, ..TrainConfig::default() }).unwrap();
        run.final_accuracy.few.unwrap()
    };
    let (without, with) = (few(0.0), few(1.0));
    assert!(with > without, "few accuracy alpha=1 {with} vs alpha=0 {without}");
}
