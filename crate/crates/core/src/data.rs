//! Synthetic long-tailed data, two-view augmentation, batching and CSV I/O.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::etf::{make_etf, random_orthonormal};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LongTailSpec {
    pub classes: usize,
    pub n_max: usize,
    /// `N_max / N_min`
    pub beta: f64,
}

/// `n_c = round(n_max · β^(−c/(C−1)))` for 0-based `c`, rounding half up.
pub fn long_tail_counts(spec: &LongTailSpec) -> Result<Vec<usize>> {
    let LongTailSpec { classes, n_max, beta } = *spec;
    if classes < 1 || n_max < 1 {
        return Err(Error::Spec(format!(
            "need at least one class and n_max >= 1, got C={classes}, n_max={n_max}"
        )));
    }
    if !(beta >= 1.0) || !beta.is_finite() {
        return Err(Error::Spec(format!("beta must be >= 1, got {beta}")));
    }
    if classes == 1 {
        return Ok(vec![n_max]);
    }
    let mut out = Vec::with_capacity(classes);
    for c in 0..classes {
        let exact = n_max as f64 * beta.powf(-(c as f64) / (classes - 1) as f64);
        let n = (exact + 0.5).floor();
        if n < 1.0 {
            return Err(Error::Spec(format!(
                "class {} would have {exact:.3} samples; beta {beta} is too large for n_max {n_max}",
                c + 1
            )));
        }
        out.push(n as usize);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MeanPlacement {
    /// Vertices of a simplex ETF scaled to the radius (needs `input_dim >= C`).
    Etf,
    /// Seeded random directions scaled to the radius.
    Random,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub input_dim: usize,
    pub placement: MeanPlacement,
    pub radius: f64,
    pub noise_std: f64,
    /// Seed for class-mean placement; shared by train and test sets.
    pub mean_seed: u64,
}

impl SyntheticSpec {
    pub fn class_means(&self) -> Result<Vec<Vec<f64>>> {
        let (c, d) = (self.classes, self.input_dim);
        let dirs: Vec<Vec<f64>> = match self.placement {
            MeanPlacement::Etf => {
                let f = make_etf(d, c, self.mean_seed)?;
                (0..c).map(|k| f.vertex(k)).collect()
            }
            MeanPlacement::Random => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.mean_seed);
                (0..c)
                    .map(|_| {
                        let v: Vec<f64> = (0..d).map(|_| rng.sample(rand_distr::StandardNormal)).collect();
                        crate::numerics::tensor::l2_normalize(&v)
                    })
                    .collect::<Result<_>>()?
            }
        };
        Ok(dirs
            .into_iter()
            .map(|v| v.into_iter().map(|x| x * self.radius).collect())
            .collect())
    }
}

/// Labelled rows. Labels are 0-based; `label_base` records how they appeared
/// in the source file (0 or 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub classes: usize,
    pub label_base: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.classes];
        for &y in &self.y {
            c[y] += 1;
        }
        c
    }

    pub fn subset(&self, idx: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(self.x.row(i));
        }
        (
            Tensor::matrix(idx.len(), d, data).expect("sized"),
            idx.iter().map(|&i| self.y[i]).collect(),
        )
    }

    /// Writes `x0..x{d-1},label` with 1-based labels.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_labeled_csv(path, &self.x, &self.y)
    }
}

pub fn gen_gaussian_mixture(spec: &SyntheticSpec, counts: &[usize], seed: u64) -> Result<Dataset> {
    if counts.len() != spec.classes {
        return Err(Error::dim(
            "gen_gaussian_mixture",
            format!("{} counts for {} classes", counts.len(), spec.classes),
        ));
    }
    let means = spec.class_means()?;
    let d = spec.input_dim;
    let noise = Normal::new(0.0, spec.noise_std.max(0.0))
        .map_err(|e| Error::Config(format!("noise std: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = counts.iter().sum();
    let mut data = Vec::with_capacity(n * d);
    let mut y = Vec::with_capacity(n);
    for (c, &k) in counts.iter().enumerate() {
        for _ in 0..k {
            data.extend(means[c].iter().map(|m| m + noise.sample(&mut rng)));
            y.push(c);
        }
    }
    Ok(Dataset {
        x: Tensor::matrix(n, d, data)?,
        y,
        classes: spec.classes,
        label_base: 1,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ViewAugmenter {
    pub noise_std: f64,
    pub mask_prob: f64,
}

impl ViewAugmenter {
    /// One stochastic view: additive Gaussian noise, then coordinate masking.
    pub fn view(&self, x: &[f64], rng: &mut impl Rng) -> Vec<f64> {
        x.iter()
            .map(|&v| {
                let noisy = if self.noise_std > 0.0 {
                    v + self.noise_std * rng.sample::<f64, _>(rand_distr::StandardNormal)
                } else {
                    v
                };
                if self.mask_prob > 0.0 && rng.random::<f64>() < self.mask_prob {
                    0.0
                } else {
                    noisy
                }
            })
            .collect()
    }

    pub fn two_views(&self, x: &[f64], rng: &mut impl Rng) -> (Vec<f64>, Vec<f64>) {
        let a = self.view(x, rng);
        let b = self.view(x, rng);
        (a, b)
    }

    /// Two independently augmented copies of every row.
    pub fn two_view_batch(&self, x: &Tensor, rng: &mut impl Rng) -> (Tensor, Tensor) {
        let (n, d) = (x.rows(), x.cols());
        let mut a = Vec::with_capacity(n * d);
        let mut b = Vec::with_capacity(n * d);
        for i in 0..n {
            let (v1, v2) = self.two_views(x.row(i), rng);
            a.extend(v1);
            b.extend(v2);
        }
        (
            Tensor::matrix(n, d, a).expect("sized"),
            Tensor::matrix(n, d, b).expect("sized"),
        )
    }
}

/// Seeded per-epoch shuffle split into batches; the last short batch is kept.
pub fn batch_indices(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::Contract("batch size must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    Ok(idx.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

pub fn batches(
    dataset: &Dataset,
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<impl Iterator<Item = (Tensor, Vec<usize>)> + '_> {
    let plan = batch_indices(dataset.len(), batch_size, seed, epoch)?;
    Ok(plan.into_iter().map(move |idx| dataset.subset(&idx)))
}

/// Rows of `d` numeric cells followed by an integer label, exactly as read.
#[derive(Debug, Clone)]
pub struct LabeledRows {
    pub x: Tensor,
    pub labels: Vec<i64>,
}

fn parse_number(cell: &str) -> Option<f64> {
    cell.trim().parse::<f64>().ok()
}

/// Parses a labelled CSV. A first row that is not fully numeric is treated
/// as a header.
pub fn read_labeled_csv(path: &Path) -> Result<LabeledRows> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labeled_csv(&text)
}

pub fn parse_labeled_csv(text: &str) -> Result<LabeledRows> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let mut width = None;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 1;
        let rec = rec.map_err(|e| Error::Parse {
            line,
            msg: e.to_string(),
        })?;
        if rec.iter().all(|c| c.is_empty()) {
            continue;
        }
        if k == 0 && rec.iter().any(|c| parse_number(c).is_none()) {
            continue;
        }
        let w = *width.get_or_insert(rec.len());
        if rec.len() != w {
            return Err(Error::Parse {
                line,
                msg: format!("expected {w} columns, found {}", rec.len()),
            });
        }
        if w < 2 {
            return Err(Error::Parse {
                line,
                msg: "need at least one feature column and a label".into(),
            });
        }
        for cell in rec.iter().take(w - 1) {
            data.push(parse_number(cell).ok_or_else(|| Error::Parse {
                line,
                msg: format!("non-numeric cell {cell:?}"),
            })?);
        }
        let lab = rec.get(w - 1).unwrap_or_default();
        labels.push(lab.parse::<i64>().map_err(|_| Error::Parse {
            line,
            msg: format!("label {lab:?} is not an integer"),
        })?);
    }
    let Some(w) = width else {
        return Err(Error::Parse {
            line: 1,
            msg: "file contains no data rows".into(),
        });
    };
    Ok(LabeledRows {
        x: Tensor::matrix(labels.len(), w - 1, data)?,
        labels,
    })
}

/// Shifts raw labels to 0-based: a file containing label 0 is 0-based,
/// otherwise 1-based. Returns the labels and the detected base.
pub fn normalize_labels(raw: &[i64]) -> Result<(Vec<usize>, usize)> {
    let min = raw.iter().copied().min().unwrap_or(0);
    if min < 0 {
        return Err(Error::Parse {
            line: 0,
            msg: format!("negative label {min}"),
        });
    }
    let base = if min == 0 { 0 } else { 1 };
    Ok((raw.iter().map(|&l| (l as usize) - base).collect(), base))
}

/// Loads a dataset CSV; labels must be contiguous from 0 or from 1.
pub fn load_csv(path: &Path) -> Result<Dataset> {
    let rows = read_labeled_csv(path)?;
    dataset_from_rows(rows)
}

pub fn dataset_from_rows(rows: LabeledRows) -> Result<Dataset> {
    let (y, label_base) = normalize_labels(&rows.labels)?;
    let classes = y.iter().max().map_or(0, |m| m + 1);
    let mut seen = vec![false; classes];
    y.iter().for_each(|&c| seen[c] = true);
    if let Some(gap) = seen.iter().position(|s| !s) {
        return Err(Error::Parse {
            line: 0,
            msg: format!("labels are not contiguous: label {} never occurs", gap + label_base),
        });
    }
    Ok(Dataset {
        x: rows.x,
        y,
        classes,
        label_base,
    })
}

/// Shortest-form value of `x` rounded to 9 significant digits.
pub fn round_sig9(x: f64) -> f64 {
    fmt9(x).parse().expect("formatted float parses")
}

/// 9 significant digits.
pub fn fmt9(x: f64) -> String {
    format!("{x:.8e}")
}

pub fn write_labeled_csv(path: &Path, x: &Tensor, y: &[usize]) -> Result<()> {
    let d = x.cols();
    let mut out = String::new();
    let header: Vec<String> = (0..d).map(|j| format!("x{j}")).chain(["label".to_string()]).collect();
    out.push_str(&header.join(","));
    out.push('\n');
    for (i, &lab) in y.iter().enumerate() {
        for v in x.row(i) {
            out.push_str(&fmt9(*v));
            out.push(',');
        }
        out.push_str(&(lab + 1).to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Random orthogonal `d×d` matrix; handy for invariance checks.
pub fn random_rotation(d: usize, seed: u64) -> Tensor {
    random_orthonormal(d, d, seed).expect("square")
}
