//! Training objectives built on [`Graph`] nodes.
//!
//! Batch tensors are class-by-row / sample-by-row. Every batch loss is an
//! arithmetic mean over samples.

use crate::error::{Error, Result};
use crate::etf::rho_matrix;
use crate::numerics::{Graph, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LossConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub t_max: usize,
    pub class_weights: Vec<f64>,
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.gamma > 0.0) {
            return Err(Error::Config(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if self.t_max < 1 {
            return Err(Error::Config("t_max must be at least 1".into()));
        }
        if self.class_weights.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Config("class weights must be positive".into()));
        }
        let mean = self.class_weights.iter().sum::<f64>() / self.class_weights.len() as f64;
        if (mean - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("class weights must average 1, got {mean}")));
        }
        Ok(())
    }
}

/// Inverse-frequency weights `∝ N/(C·n_c)`, normalized to mean 1.
pub fn inverse_frequency_weights(counts: &[usize]) -> Result<Vec<f64>> {
    if counts.is_empty() || counts.contains(&0) {
        return Err(Error::Contract(
            "inverse-frequency weights need a positive count for every class".into(),
        ));
    }
    let raw: Vec<f64> = counts.iter().map(|&n| 1.0 / n as f64).collect();
    let mean = raw.iter().sum::<f64>() / raw.len() as f64;
    Ok(raw.into_iter().map(|w| w / mean).collect())
}

fn check_labels(labels: &[usize], classes: usize) -> Result<()> {
    match labels.iter().find(|&&y| y >= classes) {
        Some(y) => Err(Error::Contract(format!(
            "label {y} is outside 0..{classes}"
        ))),
        None => Ok(()),
    }
}

/// Per-sample `−log softmax(logits)[y]` as an `N×1` column.
pub fn cross_entropy_per_sample(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    check_labels(labels, g.value(logits).cols())?;
    let ls = g.log_softmax(logits);
    let picked = g.pick(ls, labels)?;
    Ok(g.scale(picked, -1.0))
}

/// Mean cross-entropy over the batch.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    let per = cross_entropy_per_sample(g, logits, labels)?;
    Ok(g.mean(per))
}

/// Mean of `class_weights[y] · CE`.
pub fn reweighted_ce(g: &mut Graph, logits: Var, labels: &[usize], class_weights: &[f64]) -> Result<Var> {
    let classes = g.value(logits).cols();
    if class_weights.len() != classes {
        return Err(Error::dim(
            "reweighted_ce",
            format!("{} class weights for {classes} logits", class_weights.len()),
        ));
    }
    let per = cross_entropy_per_sample(g, logits, labels)?;
    let w: Vec<f64> = labels.iter().map(|&y| class_weights[y]).collect();
    let wv = g.constant(Tensor::matrix(labels.len(), 1, w)?);
    let weighted = g.mul(per, wv)?;
    Ok(g.mean(weighted))
}

/// `N×N` matrix whose row `i` averages the rows sharing label `labels[i]`.
fn same_class_averaging(labels: &[usize]) -> Result<Tensor> {
    let n = labels.len();
    let mut data = vec![0.0; n * n];
    for (i, &yi) in labels.iter().enumerate() {
        let k = labels.iter().filter(|&&y| y == yi).count() as f64;
        for (j, &yj) in labels.iter().enumerate() {
            if yj == yi {
                data[i * n + j] = 1.0 / k;
            }
        }
    }
    Tensor::matrix(n, n, data)
}

/// Each row replaced by the batch mean of its class (anchor included).
/// Gradient flows into every contributing row.
pub fn per_sample_class_means(g: &mut Graph, x: Var, labels: &[usize]) -> Result<Var> {
    if g.value(x).rows() != labels.len() {
        return Err(Error::dim(
            "per_sample_class_means",
            format!("{} labels for {} rows", labels.len(), g.value(x).rows()),
        ));
    }
    let a = g.constant(same_class_averaging(labels)?);
    g.matmul(a, x)
}

/// Class means of the classes present in the batch, stacked by ascending
/// class index. Returns the means node, the present classes and their counts.
pub fn batch_class_means(
    g: &mut Graph,
    x: Var,
    labels: &[usize],
    classes: usize,
) -> Result<(Var, Vec<usize>, Vec<usize>)> {
    check_labels(labels, classes)?;
    let n = labels.len();
    if g.value(x).rows() != n {
        return Err(Error::dim(
            "batch_class_means",
            format!("{n} labels for {} rows", g.value(x).rows()),
        ));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        counts[y] += 1;
    }
    let present: Vec<usize> = (0..classes).filter(|&c| counts[c] > 0).collect();
    let mut data = vec![0.0; present.len() * n];
    for (r, &c) in present.iter().enumerate() {
        for (j, &y) in labels.iter().enumerate() {
            if y == c {
                data[r * n + j] = 1.0 / counts[c] as f64;
            }
        }
    }
    let a = g.constant(Tensor::matrix(present.len(), n, data)?);
    let means = g.matmul(a, x)?;
    let present_counts = present.iter().map(|&c| counts[c]).collect();
    Ok((means, present, present_counts))
}

/// `−cos(h, z) − cos(u, z)` per row with `z` gradient-stopped.
fn sim(g: &mut Graph, h: Var, u: Var, z: Var) -> Result<Var> {
    let z = g.stop_gradient(z);
    let zn = g.normalize_rows(z)?;
    let hn = g.normalize_rows(h)?;
    let un = g.normalize_rows(u)?;
    let a = g.row_dot(hn, zn)?;
    let b = g.row_dot(un, zn)?;
    let s = g.add(a, b)?;
    Ok(g.scale(s, -1.0))
}

/// Hybrid contrastive loss averaged over the batch:
/// `sim(h1, u2, sg(z2)) + sim(h2, u1, sg(z1))`, in `[−4, 4]`.
pub fn hycon(g: &mut Graph, h1: Var, h2: Var, z1: Var, z2: Var, u1: Var, u2: Var) -> Result<Var> {
    let s1 = sim(g, h1, u2, z2)?;
    let s2 = sim(g, h2, u1, z1)?;
    let s = g.add(s1, s2)?;
    Ok(g.mean(s))
}

/// How rows are prepared before their Gram matrix is compared with the ETF
/// target.
#[derive(Debug, Clone, PartialEq)]
pub enum P2pInput {
    /// Rows used as-is (classifier vectors).
    Raw,
    /// Rows centered by their unweighted mean, then l2-normalized.
    CenterNormalize,
    /// Rows centered by the weighted mean `Σ w_c v_c / Σ w_c`, then
    /// l2-normalized. With per-class sample counts as weights the center is
    /// the global feature mean.
    CenterNormalizeWeighted(Vec<f64>),
}

/// `(1/C²) Σ_ij (v_iᵀ v_j − ρ_ij)²` over the `C` rows of `vectors`.
pub fn p2p(g: &mut Graph, vectors: Var, input: &P2pInput) -> Result<Var> {
    let c = g.value(vectors).rows();
    if c < 2 {
        return Err(Error::Domain(format!("P2P needs at least 2 rows, got {c}")));
    }
    let rows = match input {
        P2pInput::Raw => vectors,
        P2pInput::CenterNormalize => {
            let w = vec![1.0; c];
            center_normalize(g, vectors, &w)?
        }
        P2pInput::CenterNormalizeWeighted(w) => {
            if w.len() != c || w.iter().any(|&x| !(x >= 0.0)) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Contract(format!(
                    "{} centering weights for {c} rows (need nonnegative, nonzero sum)",
                    w.len()
                )));
            }
            center_normalize(g, vectors, w)?
        }
    };
    let t = g.transpose(rows);
    let gram = g.matmul(rows, t)?;
    let target = g.constant(rho_matrix(c)?);
    let diff = g.sub(gram, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

fn center_normalize(g: &mut Graph, vectors: Var, weights: &[f64]) -> Result<Var> {
    let c = weights.len();
    let total: f64 = weights.iter().sum();
    let mut data = vec![0.0; c * c];
    for i in 0..c {
        for j in 0..c {
            data[i * c + j] = if i == j { 1.0 } else { 0.0 } - weights[j] / total;
        }
    }
    let m = g.constant(Tensor::matrix(c, c, data)?);
    let centered = g.matmul(m, vectors)?;
    g.normalize_rows(centered).map_err(|_| {
        Error::Degenerate("a class mean coincides with the center".into())
    })
}

/// `η = 1 − (T/T_max)^γ`.
pub fn eta(epoch: usize, t_max: usize, gamma: f64) -> Result<f64> {
    if t_max == 0 || epoch > t_max {
        return Err(Error::Contract(format!(
            "epoch {epoch} outside 0..={t_max}"
        )));
    }
    if !(gamma > 0.0) {
        return Err(Error::Contract(format!("gamma must be positive, got {gamma}")));
    }
    Ok(1.0 - (epoch as f64 / t_max as f64).powf(gamma))
}

/// Nodes of one bilateral branch.
#[derive(Debug, Clone, Copy)]
pub struct BranchLoss {
    pub total: Var,
    pub ce: Var,
    pub re: Var,
    /// `None` when the classifier P2P term is disabled.
    pub p2p_w: Option<Var>,
}

/// `η·L_ce + (1 − η)·(L_re + L_p(W))`, batch-averaged. Passing `None` for the
/// classifier drops the `L_p(W)` term.
pub fn branch_loss(
    g: &mut Graph,
    logits: Var,
    labels: &[usize],
    eta_val: f64,
    class_weights: &[f64],
    classifier: Option<Var>,
) -> Result<BranchLoss> {
    if !(0.0..=1.0).contains(&eta_val) {
        return Err(Error::Contract(format!("eta {eta_val} outside [0, 1]")));
    }
    let ce = cross_entropy(g, logits, labels)?;
    let re = reweighted_ce(g, logits, labels, class_weights)?;
    let p2p_w = classifier
        .map(|w| p2p(g, w, &P2pInput::Raw))
        .transpose()?;
    let rebalance = match p2p_w {
        Some(p) => g.add(re, p)?,
        None => re,
    };
    let a = g.scale(ce, eta_val);
    let b = g.scale(rebalance, 1.0 - eta_val);
    let total = g.add(a, b)?;
    Ok(BranchLoss { total, ce, re, p2p_w })
}

/// `L_cls¹ + L_cls² + α·(L_con + L_p(μ̃))`.
pub fn total_loss(g: &mut Graph, branch1: Var, branch2: Var, hycon_val: Var, p2p_mu_val: Var, alpha: f64) -> Result<Var> {
    if !(alpha >= 0.0) {
        return Err(Error::Contract(format!("alpha must be >= 0, got {alpha}")));
    }
    let branches = g.add(branch1, branch2)?;
    let reg = g.add(hycon_val, p2p_mu_val)?;
    let reg = g.scale(reg, alpha);
    g.add(branches, reg)
}
