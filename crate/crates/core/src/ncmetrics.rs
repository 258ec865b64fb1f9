//! Neural-collapse diagnostics over last-layer features.
//!
//! Labels are 0-based class indices throughout. Classes that do not occur in
//! a feature batch are left out of every mean-based quantity; the report lists
//! the classes it covers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::tensor::{dot, norm, Tensor};

#[derive(Debug, Clone)]
pub struct ClassStats {
    /// `None` for classes with no samples.
    pub means: Vec<Option<Vec<f64>>>,
    pub global_mean: Vec<f64>,
    pub counts: Vec<usize>,
}

impl ClassStats {
    pub fn classes(&self) -> usize {
        self.counts.len()
    }

    pub fn present(&self) -> Vec<usize> {
        (0..self.counts.len()).filter(|&c| self.counts[c] > 0).collect()
    }

    pub fn all_present(&self) -> bool {
        self.counts.iter().all(|&n| n > 0)
    }

    /// Means of present classes, centered by the global mean, class-by-row.
    pub fn centered_means(&self) -> Vec<Vec<f64>> {
        self.present()
            .into_iter()
            .map(|c| {
                self.means[c]
                    .as_ref()
                    .expect("present class has a mean")
                    .iter()
                    .zip(&self.global_mean)
                    .map(|(m, g)| m - g)
                    .collect()
            })
            .collect()
    }
}

pub fn class_stats(features: &Tensor, labels: &[usize], classes: usize) -> Result<ClassStats> {
    let (n, d) = (features.rows(), features.cols());
    if n == 0 || labels.is_empty() {
        return Err(Error::Contract("class statistics need at least one sample".into()));
    }
    if labels.len() != n {
        return Err(Error::dim(
            "class_stats",
            format!("{} labels for {n} feature rows", labels.len()),
        ));
    }
    let mut sums = vec![vec![0.0; d]; classes];
    let mut counts = vec![0usize; classes];
    let mut global = vec![0.0; d];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Contract(format!(
                "label {y} at row {i} is outside 0..{classes}"
            )));
        }
        counts[y] += 1;
        for ((s, g), x) in sums[y].iter_mut().zip(global.iter_mut()).zip(features.row(i)) {
            *s += x;
            *g += x;
        }
    }
    let means = sums
        .into_iter()
        .zip(&counts)
        .map(|(s, &k)| (k > 0).then(|| s.into_iter().map(|v| v / k as f64).collect()))
        .collect();
    global.iter_mut().for_each(|g| *g /= n as f64);
    Ok(ClassStats {
        means,
        global_mean: global,
        counts,
    })
}

/// `trace(Σ_W)`: mean squared distance of each sample to its class mean.
pub fn nc1_within_class(features: &Tensor, labels: &[usize], stats: &ClassStats) -> f64 {
    let n = features.rows();
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let mu = stats.means[y].as_ref().expect("label present in stats");
        total += features
            .row(i)
            .iter()
            .zip(mu)
            .map(|(x, m)| (x - m) * (x - m))
            .sum::<f64>();
    }
    total / n as f64
}

/// Cosines between `vectors[c] − center`, as a `C×C` matrix.
pub fn centered_pairwise_cosines(vectors: &[Vec<f64>], center: &[f64]) -> Result<Tensor> {
    let c = vectors.len();
    let centered: Vec<(Vec<f64>, f64)> = vectors
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let r: Vec<f64> = v.iter().zip(center).map(|(a, b)| a - b).collect();
            let n = norm(&r);
            if n == 0.0 {
                return Err(Error::Degenerate(format!(
                    "class {k} coincides with the center"
                )));
            }
            Ok((r, n))
        })
        .collect::<Result<_>>()?;
    let mut out = vec![0.0; c * c];
    for i in 0..c {
        out[i * c + i] = 1.0;
        for j in i + 1..c {
            let cos = dot(&centered[i].0, &centered[j].0) / (centered[i].1 * centered[j].1);
            out[i * c + j] = cos;
            out[j * c + i] = cos;
        }
    }
    Tensor::matrix(c, c, out)
}

/// Population standard deviation over the distinct off-diagonal pairs.
pub fn std_of_pairwise_cosines(cos: &Tensor) -> f64 {
    let c = cos.rows();
    let vals: Vec<f64> = (0..c)
        .flat_map(|i| (i + 1..c).map(move |j| (i, j)))
        .map(|(i, j)| cos.get(i, j))
        .collect();
    if vals.len() < 2 {
        return 0.0;
    }
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt()
}

/// Angle matrix in degrees with an exact zero diagonal.
pub fn icpa_degrees(cos: &Tensor) -> Vec<Vec<f64>> {
    let c = cos.rows();
    (0..c)
        .map(|i| {
            (0..c)
                .map(|j| {
                    if i == j {
                        0.0
                    } else {
                        cos.get(i, j).clamp(-1.0, 1.0).acos().to_degrees()
                    }
                })
                .collect()
        })
        .collect()
}

fn rows_of(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn mean_vector(rows: &[Vec<f64>]) -> Vec<f64> {
    let d = rows.first().map_or(0, Vec::len);
    let mut m = vec![0.0; d];
    for r in rows {
        m.iter_mut().zip(r).for_each(|(a, b)| *a += b);
    }
    m.iter_mut().for_each(|a| *a /= rows.len() as f64);
    m
}

/// `‖A/‖A‖_F − B/‖B‖_F‖_F`, with classifier vectors `A` and centered class
/// means `B` both stacked class-by-row over the classes present in `stats`.
pub fn self_duality_delta(weights: &Tensor, stats: &ClassStats) -> Result<f64> {
    if weights.rows() != stats.classes() {
        return Err(Error::dim(
            "self_duality_delta",
            format!("{} classifier rows for {} classes", weights.rows(), stats.classes()),
        ));
    }
    let present = stats.present();
    let a: Vec<&[f64]> = present.iter().map(|&c| weights.row(c)).collect();
    let b = stats.centered_means();
    let fro = |rows: &mut dyn Iterator<Item = &[f64]>| -> f64 {
        rows.map(|r| r.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
    };
    let na = fro(&mut a.iter().copied());
    let nb = fro(&mut b.iter().map(Vec::as_slice));
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Degenerate(
            "self-duality needs nonzero classifier and centered-mean matrices".into(),
        ));
    }
    let mut acc = 0.0;
    for (ra, rb) in a.iter().zip(&b) {
        for (x, y) in ra.iter().zip(rb) {
            let diff = x / na - y / nb;
            acc += diff * diff;
        }
    }
    Ok(acc.sqrt())
}

fn argmax_first(v: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (i, x) in v.enumerate() {
        if x > best.1 {
            best = (i, x);
        }
    }
    best.0
}

/// Fraction of samples on which the linear classifier and the
/// nearest-class-center rule agree. Ties go to the lowest class index.
pub fn ncc_agreement(features: &Tensor, weights: &Tensor, bias: &[f64], stats: &ClassStats) -> Result<f64> {
    let n = features.rows();
    if weights.cols() != features.cols() || bias.len() != weights.rows() {
        return Err(Error::dim(
            "ncc_agreement",
            format!(
                "features {:?}, weights {:?}, bias {}",
                features.shape(),
                weights.shape(),
                bias.len()
            ),
        ));
    }
    let present = stats.present();
    let mut agree = 0usize;
    for i in 0..n {
        let h = features.row(i);
        let linear = argmax_first((0..weights.rows()).map(|c| dot(weights.row(c), h) + bias[c]));
        let mut nearest = (usize::MAX, f64::INFINITY);
        for &c in &present {
            let mu = stats.means[c].as_ref().expect("present");
            let dist: f64 = h.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < nearest.1 {
                nearest = (c, dist);
            }
        }
        if linear == nearest.0 {
            agree += 1;
        }
    }
    Ok(agree as f64 / n as f64)
}

/// NC1–NC4 diagnostics for one snapshot.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct NcReport {
    pub classes: usize,
    /// Classes that occur in the feature batch; `icpa_mu` is indexed by these.
    pub present_classes: Vec<usize>,
    pub partial_coverage: bool,
    pub nc1: f64,
    pub icpa_mu: Vec<Vec<f64>>,
    pub icpa_w: Vec<Vec<f64>>,
    pub std_cos_mu: f64,
    pub std_cos_w: f64,
    pub delta: f64,
    pub ncc_agreement: f64,
}

pub fn nc_report(
    features: &Tensor,
    labels: &[usize],
    classes: usize,
    weights: &Tensor,
    bias: &[f64],
) -> Result<NcReport> {
    let stats = class_stats(features, labels, classes)?;
    let nc1 = nc1_within_class(features, labels, &stats);

    let present = stats.present();
    let means: Vec<Vec<f64>> = present
        .iter()
        .map(|&c| stats.means[c].clone().expect("present"))
        .collect();
    let cos_mu = centered_pairwise_cosines(&means, &stats.global_mean)?;

    let w_rows = rows_of(weights);
    let w_center = mean_vector(&w_rows);
    let cos_w = centered_pairwise_cosines(&w_rows, &w_center)?;

    Ok(NcReport {
        classes,
        partial_coverage: present.len() < classes,
        present_classes: present,
        nc1,
        icpa_mu: icpa_degrees(&cos_mu),
        icpa_w: icpa_degrees(&cos_w),
        std_cos_mu: std_of_pairwise_cosines(&cos_mu),
        std_cos_w: std_of_pairwise_cosines(&cos_w),
        delta: self_duality_delta(weights, &stats)?,
        ncc_agreement: ncc_agreement(features, weights, bias, &stats)?,
    })
}
