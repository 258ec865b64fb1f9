//! The AllNC training loop and its evaluation.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{self, batch_indices, gen_gaussian_mixture, long_tail_counts, round_sig9, Dataset};
use crate::error::{Error, Result};
use crate::harness::config::{DataSource, Mode, P2pCenter, TrainConfig};
use crate::losses::{
    batch_class_means, branch_loss, eta, hycon, inverse_frequency_weights, p2p, per_sample_class_means,
    total_loss, P2pInput,
};
use crate::model::{forward, infer, init_params, sgd_step, BoundParams, NetworkParams, OptimizerState};
use crate::ncmetrics::{nc_report, NcReport};
use crate::numerics::{Graph, Tensor, Var};

/// Class groups by training count.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Groups {
    pub many: Vec<usize>,
    pub medium: Vec<usize>,
    pub few: Vec<usize>,
}

impl Groups {
    /// Many: `n > 0.2·n_max`; Medium: `0.04·n_max < n ≤ 0.2·n_max`;
    /// Few: `n ≤ 0.04·n_max`.
    pub fn from_counts(counts: &[usize], n_max: usize) -> Self {
        let hi = 0.2 * n_max as f64;
        let lo = 0.04 * n_max as f64;
        let mut g = Groups {
            many: vec![],
            medium: vec![],
            few: vec![],
        };
        for (c, &n) in counts.iter().enumerate() {
            let n = n as f64;
            if n > hi {
                g.many.push(c);
            } else if n > lo {
                g.medium.push(c);
            } else {
                g.few.push(c);
            }
        }
        g
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub overall: f64,
    pub per_class: Vec<Option<f64>>,
    pub many: Option<f64>,
    pub medium: Option<f64>,
    pub few: Option<f64>,
}

/// Mean per-class accuracy over the group's classes; `None` if the group is
/// empty or none of its classes occur in the evaluation set.
fn group_accuracy(per_class: &[Option<f64>], members: &[usize]) -> Option<f64> {
    let vals: Vec<f64> = members.iter().filter_map(|&c| per_class[c]).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

pub fn accuracy_from_logits(logits: &Tensor, labels: &[usize], groups: &Groups) -> Accuracy {
    let classes = logits.cols();
    let mut hit = vec![0usize; classes];
    let mut total = vec![0usize; classes];
    for (i, &y) in labels.iter().enumerate() {
        let row = logits.row(i);
        let mut best = 0;
        for c in 1..classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        total[y] += 1;
        if best == y {
            hit[y] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = hit
        .iter()
        .zip(&total)
        .map(|(&h, &t)| (t > 0).then(|| h as f64 / t as f64))
        .collect();
    Accuracy {
        overall: hit.iter().sum::<usize>() as f64 / labels.len().max(1) as f64,
        many: group_accuracy(&per_class, &groups.many),
        medium: group_accuracy(&per_class, &groups.medium),
        few: group_accuracy(&per_class, &groups.few),
        per_class,
    }
}

/// Accuracy by argmax logits on `test`, plus diagnostics on its features.
pub fn evaluate(params: &NetworkParams, test: &Dataset, groups: &Groups) -> Result<(Accuracy, NcReport)> {
    let (features, logits) = infer(params, &test.x)?;
    let acc = accuracy_from_logits(&logits, &test.y, groups);
    let report = nc_report(
        &features,
        &test.y,
        params.dims.classes,
        params.classifier_weight(),
        params.classifier_bias().data(),
    )?;
    Ok((acc, report))
}

/// Batch-averaged loss components of one step or one epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub ce: f64,
    pub re: f64,
    pub hycon: f64,
    pub p2p_mu: f64,
    pub p2p_w: f64,
    pub branch1: f64,
    pub branch2: f64,
    pub total: f64,
}

impl LossLog {
    fn accumulate(&mut self, o: &LossLog) {
        self.ce += o.ce;
        self.re += o.re;
        self.hycon += o.hycon;
        self.p2p_mu += o.p2p_mu;
        self.p2p_w += o.p2p_w;
        self.branch1 += o.branch1;
        self.branch2 += o.branch2;
        self.total += o.total;
    }

    fn scaled(mut self, s: f64) -> Self {
        for v in [
            &mut self.ce,
            &mut self.re,
            &mut self.hycon,
            &mut self.p2p_mu,
            &mut self.p2p_w,
            &mut self.branch1,
            &mut self.branch2,
            &mut self.total,
        ] {
            *v *= s;
        }
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub eta: f64,
    /// α as applied to `hycon + p2p_mu` in the total.
    pub alpha: f64,
    pub losses: LossLog,
    pub train_report: NcReport,
    pub test_accuracy: Accuracy,
}

/// The parts of the objective that a step evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Branches,
    Hycon,
    P2pMu,
}

/// Inputs to one optimization step.
pub struct StepInput<'a> {
    pub view1: &'a Tensor,
    pub view2: &'a Tensor,
    pub labels: &'a [usize],
    pub eta: f64,
    pub class_weights: &'a [f64],
}

/// Builds the objective for one batch and returns the per-parameter
/// gradients (`None` for frozen or unreached parameters).
///
/// `only` restricts the total to one component (for additivity checks); the
/// full objective is `None`.
pub fn step_gradients(
    config: &TrainConfig,
    params: &NetworkParams,
    input: &StepInput<'_>,
    only: Option<Component>,
) -> Result<(LossLog, Vec<Option<Tensor>>)> {
    let mut g = Graph::new();
    let frozen: &[&str] = if config.freeze_bias { &["classifier.bias"] } else { &[] };
    let bound = params.bind(&mut g, frozen);
    let (root, log) = build_objective(&mut g, config, &bound, input, only)?;
    let grads = g.backward(root)?;
    let out = bound.vars().iter().map(|&v| grads.try_get(v).cloned()).collect();
    Ok((log, out))
}

/// Places the training objective for one batch on `g`; returns the root and
/// the logged components.
pub fn build_objective(
    g: &mut Graph,
    config: &TrainConfig,
    bound: &BoundParams,
    input: &StepInput<'_>,
    only: Option<Component>,
) -> Result<(Var, LossLog)> {
    let off = config.disabled();
    let labels = input.labels;
    let x1 = g.constant(input.view1.clone());
    let x2 = g.constant(input.view2.clone());
    let o1 = forward(g, bound, x1)?;
    let o2 = forward(g, bound, x2)?;
    let w = bound.classifier();
    let p2p_w = (!off.p2p_w).then_some(w);

    let b1 = branch_loss(g, o1.logits, labels, input.eta, input.class_weights, p2p_w)?;
    let b2 = branch_loss(g, o2.logits, labels, input.eta, input.class_weights, p2p_w)?;

    let alpha = effective_alpha(config);
    let zero = g.constant(Tensor::scalar(0.0));

    let hy = if off.hycon {
        zero
    } else {
        let u1 = per_sample_class_means(g, o1.z, labels)?;
        let u2 = per_sample_class_means(g, o2.z, labels)?;
        hycon(g, o1.h, o2.h, o1.z, o2.z, u1, u2)?
    };

    let pm = if off.p2p_mu {
        zero
    } else {
        let classes = config.classes;
        let (m1, _, counts) = batch_class_means(g, o1.features, labels, classes)?;
        let (m2, _, _) = batch_class_means(g, o2.features, labels, classes)?;
        if counts.len() < 2 {
            zero
        } else {
            let sum = g.add(m1, m2)?;
            let means = g.scale(sum, 0.5);
            let input = match config.p2p_center {
                P2pCenter::Global => P2pInput::CenterNormalizeWeighted(counts.iter().map(|&n| n as f64).collect()),
                P2pCenter::Row => P2pInput::CenterNormalize,
            };
            p2p(g, means, &input)?
        }
    };

    let root = match only {
        None => total_loss(g, b1.total, b2.total, hy, pm, alpha)?,
        Some(Component::Branches) => g.add(b1.total, b2.total)?,
        Some(Component::Hycon) => g.scale(hy, alpha),
        Some(Component::P2pMu) => g.scale(pm, alpha),
    };
    let val = |g: &Graph, v: Var| g.value(v).item();
    let log = LossLog {
        ce: 0.5 * (val(g, b1.ce) + val(g, b2.ce)),
        re: 0.5 * (val(g, b1.re) + val(g, b2.re)),
        hycon: val(g, hy),
        p2p_mu: val(g, pm),
        p2p_w: b1.p2p_w.map_or(0.0, |v| val(g, v)),
        branch1: val(g, b1.total),
        branch2: val(g, b2.total),
        total: val(g, root),
    };
    Ok((root, log))
}

/// α applied to the regularizers; zero in the CE baseline.
pub fn effective_alpha(config: &TrainConfig) -> f64 {
    match config.mode {
        Mode::CeBaseline => 0.0,
        _ => config.alpha,
    }
}

/// η used at 1-based `epoch`.
pub fn effective_eta(config: &TrainConfig, epoch: usize) -> Result<f64> {
    let off = config.disabled();
    match config.mode {
        Mode::CeBaseline => Ok(1.0),
        _ if off.gbbn => Ok(config.fixed_eta),
        _ => eta(epoch, config.t_max, config.gamma),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum RunStatus {
    Completed,
    /// Training stopped; outputs hold the last completed epoch.
    Diverged { epoch: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub config: TrainConfig,
    pub train_counts: Vec<usize>,
    pub groups: Groups,
    pub epochs: Vec<EpochLog>,
    pub status: RunStatus,
    pub params: NetworkParams,
    /// Clean training-set features of the final parameters, rounded to the
    /// 9 significant digits used in exported files.
    pub features: Tensor,
    pub labels: Vec<usize>,
    /// Classifier weights and bias rounded like `features`.
    pub weights: Tensor,
    pub bias: Vec<f64>,
    /// Diagnostics of the exported `features`/`weights`/`bias`.
    pub final_report: NcReport,
    pub final_accuracy: Accuracy,
}

/// Training and balanced test sets for a config.
pub fn build_datasets(config: &TrainConfig) -> Result<(Dataset, Dataset)> {
    match config.data {
        DataSource::Synthetic => {
            let spec = config.synthetic();
            let counts = long_tail_counts(&config.long_tail())?;
            let train = gen_gaussian_mixture(&spec, &counts, config.data_seed.wrapping_mul(2))?;
            let test = gen_gaussian_mixture(
                &spec,
                &vec![config.test_per_class; config.classes],
                config.data_seed.wrapping_mul(2).wrapping_add(1),
            )?;
            Ok((train, test))
        }
        DataSource::Csv => {
            let path = config.train_path.as_ref().expect("validated");
            let train = data::load_csv(path)?;
            let test = match &config.test_path {
                Some(p) => data::load_csv(p)?,
                None => train.clone(),
            };
            if train.classes != config.classes || train.dim() != config.input_dim {
                return Err(Error::Config(format!(
                    "{} has {} classes and {} features; config says {} and {}",
                    path.display(),
                    train.classes,
                    train.dim(),
                    config.classes,
                    config.input_dim
                )));
            }
            Ok((train, test))
        }
    }
}

fn rounded(t: &Tensor) -> Tensor {
    t.map(round_sig9)
}

/// Runs the full training procedure for `config`.
pub fn run_train(config: &TrainConfig) -> Result<RunOutput> {
    config.validate()?;
    let (train, test) = build_datasets(config)?;
    run_train_on(config, &train, &test)
}

pub fn run_train_on(config: &TrainConfig, train: &Dataset, test: &Dataset) -> Result<RunOutput> {
    let counts = train.counts();
    let n_max = counts.iter().copied().max().unwrap_or(0);
    let groups = Groups::from_counts(&counts, n_max);
    let class_weights = inverse_frequency_weights(&counts)?;
    let aug = config.augmenter();

    let mut params = init_params(&config.dims(), config.seed)?;
    let mut opt = OptimizerState::new(&params, config.lr, config.momentum, config.weight_decay);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(config.seed);
    aug_rng.set_stream(1);

    let mut epochs = Vec::with_capacity(config.t_max);
    let mut status = RunStatus::Completed;

    'epochs: for epoch in 1..=config.t_max {
        let eta_val = effective_eta(config, epoch)?;
        let snapshot = params.clone();
        let mut acc = LossLog::default();
        let plan = batch_indices(train.len(), config.batch_size, config.seed, epoch as u64)?;
        let nb = plan.len();
        for idx in plan {
            let (xb, yb) = train.subset(&idx);
            let (v1, v2) = aug.two_view_batch(&xb, &mut aug_rng);
            let input = StepInput {
                view1: &v1,
                view2: &v2,
                labels: &yb,
                eta: eta_val,
                class_weights: &class_weights,
            };
            let step = step_gradients(config, &params, &input, None).and_then(|(log, grads)| {
                if !log.total.is_finite() {
                    return Err(Error::Diverged {
                        param: "total loss".into(),
                        epoch,
                    });
                }
                sgd_step(&mut params, &grads, &mut opt)?;
                Ok(log)
            });
            match step {
                Ok(log) => acc.accumulate(&log),
                // A blown-up step either overflows or kills every unit and
                // leaves a vector the losses cannot normalize.
                Err(e @ (Error::Diverged { .. } | Error::Degenerate(_))) => {
                    params = snapshot;
                    let reason = match e {
                        Error::Diverged { param, .. } => format!("non-finite value in {param}"),
                        other => other.to_string(),
                    };
                    status = RunStatus::Diverged { epoch, reason };
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
        }
        let losses = acc.scaled(1.0 / nb as f64);

        let (features, _) = infer(&params, &train.x)?;
        let train_report = nc_report(
            &features,
            &train.y,
            config.classes,
            params.classifier_weight(),
            params.classifier_bias().data(),
        )?;
        let (test_accuracy, _) = evaluate(&params, test, &groups)?;
        epochs.push(EpochLog {
            epoch,
            eta: eta_val,
            alpha: effective_alpha(config),
            losses,
            train_report,
            test_accuracy,
        });
    }

    let (raw_features, _) = infer(&params, &train.x)?;
    let features = rounded(&raw_features);
    let weights = rounded(params.classifier_weight());
    let bias: Vec<f64> = params.classifier_bias().data().iter().map(|&b| round_sig9(b)).collect();
    let final_report = nc_report(&features, &train.y, config.classes, &weights, &bias)?;
    let (final_accuracy, _) = evaluate(&params, test, &groups)?;

    Ok(RunOutput {
        config: config.clone(),
        train_counts: counts,
        groups,
        epochs,
        status,
        params,
        features,
        labels: train.y.clone(),
        weights,
        bias,
        final_report,
        final_accuracy,
    })
}
