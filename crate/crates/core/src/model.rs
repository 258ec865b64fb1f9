//! MLP stack: encoder `φ`, projection head, predictor head, linear classifier,
//! and an SGD-with-momentum optimizer.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

const SNAPSHOT_VERSION: &str = "nclab-params v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Dims {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub feature: usize,
    pub proj: usize,
    pub classes: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            input: 32,
            hidden: vec![128, 64],
            feature: 16,
            proj: 16,
            classes: 10,
        }
    }
}

impl Dims {
    pub fn validate(&self) -> Result<()> {
        let all = [self.input, self.feature, self.proj, self.classes]
            .into_iter()
            .chain(self.hidden.iter().copied());
        if all.into_iter().any(|d| d == 0) {
            return Err(Error::Config(format!("zero-sized dimension in {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::Config("need at least 2 classes".into()));
        }
        Ok(())
    }

    fn encoder_chain(&self) -> Vec<usize> {
        let mut c = vec![self.input];
        c.extend(&self.hidden);
        c.push(self.feature);
        c
    }
}

/// Named parameter tensors in a fixed order.
///
/// Affine weights are stored `in×out` (applied as `x·W + b`); the classifier
/// is stored class-by-row as `C×d` and applied as `h·Wᵀ + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub dims: Dims,
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl NetworkParams {
    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    fn index(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"))
    }

    pub fn classifier_weight(&self) -> &Tensor {
        &self.tensors[self.index("classifier.weight")]
    }

    pub fn classifier_bias(&self) -> &Tensor {
        &self.tensors[self.index("classifier.bias")]
    }

    /// Parameters whose names start with `prefix`.
    pub fn group(&self, prefix: &str) -> Vec<usize> {
        (0..self.names.len())
            .filter(|&i| self.names[i].starts_with(prefix))
            .collect()
    }

    /// Places every parameter on `g`. Frozen names become constants.
    pub fn bind(&self, g: &mut Graph, frozen: &[&str]) -> BoundParams {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                if frozen.contains(&n.as_str()) {
                    g.constant(t.clone())
                } else {
                    g.param(t.clone())
                }
            })
            .collect();
        BoundParams {
            names: self.names.clone(),
            vars,
            encoder_layers: self.dims.hidden.len() + 1,
        }
    }

    /// Wraps graph nodes already holding these parameters (same order as
    /// [`names`](Self::names)).
    pub fn bind_vars(&self, vars: &[Var]) -> Result<BoundParams> {
        if vars.len() != self.names.len() {
            return Err(Error::Contract(format!(
                "{} vars for {} parameters",
                vars.len(),
                self.names.len()
            )));
        }
        Ok(BoundParams {
            names: self.names.clone(),
            vars: vars.to_vec(),
            encoder_layers: self.dims.hidden.len() + 1,
        })
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("{SNAPSHOT_VERSION}\n");
        for (name, t) in self.names.iter().zip(&self.tensors) {
            let file = format!("{name}.csv");
            let _ = writeln!(manifest, "{name} {} {} {file}", t.rows(), t.cols());
            let mut body = String::new();
            for i in 0..t.rows() {
                let line: Vec<String> = t.row(i).iter().map(|v| format!("{v:e}")).collect();
                body.push_str(&line.join(","));
                body.push('\n');
            }
            let path = dir.join(&file);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        let path = dir.join("manifest.txt");
        fs::write(&path, manifest).map_err(|e| Error::io(&path, e))
    }

    /// Reads a snapshot written by [`NetworkParams::write_snapshot`] into a
    /// parameter set with the given dims.
    pub fn read_snapshot(dir: &Path, dims: Dims) -> Result<Self> {
        let mut params = init_params(&dims, 0)?;
        let path = dir.join("manifest.txt");
        let manifest = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut lines = manifest.lines();
        if lines.next() != Some(SNAPSHOT_VERSION) {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected header {SNAPSHOT_VERSION:?}"),
            });
        }
        let mut seen = 0;
        for (k, line) in lines.enumerate() {
            let parts: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: String| Error::Parse { line: k + 2, msg };
            let [name, rows, cols, file] = parts[..] else {
                return Err(bad(format!("expected 4 fields, got {}", parts.len())));
            };
            let idx = params
                .names
                .iter()
                .position(|n| n == name)
                .ok_or_else(|| bad(format!("unknown parameter {name}")))?;
            let rows: usize = rows.parse().map_err(|_| bad("bad row count".into()))?;
            let cols: usize = cols.parse().map_err(|_| bad("bad column count".into()))?;
            let want = &params.tensors[idx];
            if want.rows() != rows || want.cols() != cols {
                return Err(bad(format!(
                    "{name} is {rows}x{cols}, expected {}x{}",
                    want.rows(),
                    want.cols()
                )));
            }
            let fpath = dir.join(file);
            let text = fs::read_to_string(&fpath).map_err(|e| Error::io(&fpath, e))?;
            let mut data = Vec::with_capacity(rows * cols);
            for (ln, l) in text.lines().enumerate() {
                for cell in l.split(',') {
                    data.push(cell.trim().parse::<f64>().map_err(|_| Error::Parse {
                        line: ln + 1,
                        msg: format!("non-numeric cell {cell:?} in {}", fpath.display()),
                    })?);
                }
            }
            let shape = want.shape().to_vec();
            params.tensors[idx] = Tensor::new(shape, data)?;
            seen += 1;
        }
        if seen != params.names.len() {
            return Err(Error::Parse {
                line: 0,
                msg: format!("manifest lists {seen} of {} parameters", params.names.len()),
            });
        }
        Ok(params)
    }
}

/// Graph handles for one forward pass; both views and both branches reuse it.
#[derive(Debug, Clone)]
pub struct BoundParams {
    names: Vec<String>,
    vars: Vec<Var>,
    encoder_layers: usize,
}

impl BoundParams {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn var(&self, name: &str) -> Var {
        let i = self
            .names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }

    pub fn classifier(&self) -> Var {
        self.var("classifier.weight")
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    pub features: Var,
    pub z: Var,
    pub h: Var,
    pub logits: Var,
}

fn affine(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"));
    let b = p.var(&format!("{name}.bias"));
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn head(g: &mut Graph, p: &BoundParams, name: &str, x: Var) -> Result<Var> {
    let a = affine(g, p, &format!("{name}.0"), x)?;
    let a = g.relu(a);
    affine(g, p, &format!("{name}.1"), a)
}

/// features = φ(x), z = proj₁(features), h = proj₂(z), logits = features·Wᵀ + b.
pub fn forward(g: &mut Graph, p: &BoundParams, x: Var) -> Result<ForwardOut> {
    let mut a = x;
    for l in 0..p.encoder_layers {
        a = affine(g, p, &format!("encoder.{l}"), a)?;
        a = g.relu(a);
    }
    let features = a;
    let z = head(g, p, "proj1", features)?;
    let h = head(g, p, "proj2", z)?;
    let wt = g.transpose(p.classifier());
    let logits = g.matmul(features, wt)?;
    let logits = g.add_row(logits, p.var("classifier.bias"))?;
    Ok(ForwardOut {
        features,
        z,
        h,
        logits,
    })
}

/// Evaluation-mode forward pass returning plain `(features, logits)`.
pub fn infer(params: &NetworkParams, x: &Tensor) -> Result<(Tensor, Tensor)> {
    if x.cols() != params.dims.input {
        return Err(Error::dim(
            "forward",
            format!("input has {} columns, encoder expects {}", x.cols(), params.dims.input),
        ));
    }
    let mut g = Graph::new();
    let all: Vec<&str> = params.names.iter().map(String::as_str).collect();
    let p = params.bind(&mut g, &all);
    let xv = g.constant(x.clone());
    let out = forward(&mut g, &p, xv)?;
    Ok((g.value(out.features).clone(), g.value(out.logits).clone()))
}

/// Initial bias of encoder and head layers. Slightly positive so an input
/// whose relu features are all zero still projects to a nonzero `z` (the
/// contrastive loss normalizes it); the classifier bias starts at zero.
const HIDDEN_BIAS: f64 = 0.01;

/// He-scaled Gaussian weights for relu layers, small constant biases,
/// classifier drawn with std 0.01 and zero bias. Deterministic per seed.
pub fn init_params(dims: &Dims, seed: u64) -> Result<NetworkParams> {
    dims.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    let mut push_affine = |name: String, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng| {
        let std = (2.0 / fan_in as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("positive std");
        let w = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
        names.push(format!("{name}.weight"));
        tensors.push(Tensor::matrix(fan_in, fan_out, w).expect("sized"));
        names.push(format!("{name}.bias"));
        tensors.push(Tensor::full(&[fan_out], HIDDEN_BIAS));
    };

    let chain = dims.encoder_chain();
    for (l, pair) in chain.windows(2).enumerate() {
        push_affine(format!("encoder.{l}"), pair[0], pair[1], &mut rng);
    }
    push_affine("proj1.0".into(), dims.feature, dims.proj, &mut rng);
    push_affine("proj1.1".into(), dims.proj, dims.proj, &mut rng);
    push_affine("proj2.0".into(), dims.proj, dims.proj, &mut rng);
    push_affine("proj2.1".into(), dims.proj, dims.proj, &mut rng);

    let normal = Normal::new(0.0, 0.01).expect("positive std");
    let w = (0..dims.classes * dims.feature).map(|_| normal.sample(&mut rng)).collect();
    names.push("classifier.weight".into());
    tensors.push(Tensor::matrix(dims.classes, dims.feature, w)?);
    names.push("classifier.bias".into());
    tensors.push(Tensor::zeros(&[dims.classes]));

    Ok(NetworkParams {
        dims: dims.clone(),
        names,
        tensors,
    })
}

#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &NetworkParams, learning_rate: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            learning_rate,
            momentum,
            weight_decay,
            velocity: params.tensors.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    pub fn velocity(&self) -> &[Tensor] {
        &self.velocity
    }
}

/// `v ← m·v + g + wd·θ`, then `θ ← θ − lr·v`.
///
/// Parameters with `None` gradient (frozen) are left untouched.
pub fn sgd_step(params: &mut NetworkParams, grads: &[Option<Tensor>], state: &mut OptimizerState) -> Result<()> {
    if grads.len() != params.tensors.len() || state.velocity.len() != params.tensors.len() {
        return Err(Error::dim(
            "sgd_step",
            format!(
                "{} gradients / {} velocities for {} parameters",
                grads.len(),
                state.velocity.len(),
                params.tensors.len()
            ),
        ));
    }
    for (i, g) in grads.iter().enumerate() {
        if let Some(g) = g {
            if !g.is_finite() {
                return Err(Error::Diverged {
                    param: params.names[i].clone(),
                    epoch: 0,
                });
            }
            if g.len() != params.tensors[i].len() {
                return Err(Error::dim(
                    "sgd_step",
                    format!("gradient for {} has the wrong size", params.names[i]),
                ));
            }
        }
    }
    let (m, lr, wd) = (state.momentum, state.learning_rate, state.weight_decay);
    for ((theta, v), g) in params.tensors.iter_mut().zip(&mut state.velocity).zip(grads) {
        let Some(g) = g else { continue };
        for ((t, vi), gi) in theta.data_mut().iter_mut().zip(v.data_mut()).zip(g.data()) {
            *vi = m * *vi + gi + wd * *t;
            *t -= lr * *vi;
        }
    }
    Ok(())
}
