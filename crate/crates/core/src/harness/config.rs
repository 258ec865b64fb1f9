//! Flat `key = value` experiment configuration.
//!
//! Blank lines and `#` comments are ignored. Unknown keys are rejected. List
//! values are comma-separated. [`TrainConfig::to_text`] writes every key, so
//! a resolved config re-parses to the same value.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{LongTailSpec, MeanPlacement, SyntheticSpec, ViewAugmenter};
use crate::error::{Error, Result};
use crate::model::Dims;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    AllNc,
    CeBaseline,
    Ablation,
}

impl FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "allnc" => Ok(Mode::AllNc),
            "ce" | "ce-baseline" => Ok(Mode::CeBaseline),
            "ablation" => Ok(Mode::Ablation),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::AllNc => "allnc",
            Mode::CeBaseline => "ce",
            Mode::Ablation => "ablation",
        }
    }
}

/// Components switched off in `ablation` mode.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Disabled {
    pub hycon: bool,
    pub p2p_mu: bool,
    pub p2p_w: bool,
    pub gbbn: bool,
}

impl Disabled {
    fn parse(s: &str) -> Result<Self> {
        let mut d = Disabled::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part {
                "hycon" => d.hycon = true,
                "p2p_mu" | "p2p-mu" => d.p2p_mu = true,
                "p2p_w" | "p2p-w" => d.p2p_w = true,
                "gbbn" => d.gbbn = true,
                "none" => {}
                other => return Err(Error::Config(format!("unknown component {other:?} in disable"))),
            }
        }
        Ok(d)
    }

    fn to_text(self) -> String {
        let mut parts = vec![];
        if self.hycon {
            parts.push("hycon");
        }
        if self.p2p_mu {
            parts.push("p2p_mu");
        }
        if self.p2p_w {
            parts.push("p2p_w");
        }
        if self.gbbn {
            parts.push("gbbn");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join(",")
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Csv,
}

/// Which mean the class means are centered by before the P2P loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum P2pCenter {
    /// Count-weighted mean of the batch class means (the batch feature mean).
    Global,
    /// Unweighted mean of the batch class means.
    Row,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub data: DataSource,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub classes: usize,
    pub input_dim: usize,
    pub n_max: usize,
    pub beta: f64,
    pub placement: MeanPlacement,
    pub radius: f64,
    pub noise_std: f64,
    pub test_per_class: usize,

    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub proj_dim: usize,

    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub freeze_bias: bool,

    pub alpha: f64,
    pub gamma: f64,
    pub t_max: usize,
    pub mode: Mode,
    pub disable: Disabled,
    pub fixed_eta: f64,
    pub p2p_center: P2pCenter,

    pub aug_noise_std: f64,
    pub aug_mask_prob: f64,

    pub seed: u64,
    pub data_seed: u64,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synthetic,
            train_path: None,
            test_path: None,
            classes: 10,
            input_dim: 32,
            n_max: 500,
            beta: 100.0,
            placement: MeanPlacement::Etf,
            radius: 4.0,
            noise_std: 1.0,
            test_per_class: 100,
            hidden: vec![128, 64],
            feature_dim: 16,
            proj_dim: 16,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 5e-3,
            batch_size: 64,
            freeze_bias: false,
            alpha: 1.0,
            gamma: 2.0,
            t_max: 100,
            mode: Mode::AllNc,
            disable: Disabled::default(),
            fixed_eta: 0.5,
            p2p_center: P2pCenter::Row,
            aug_noise_std: 0.5,
            aug_mask_prob: 0.1,
            seed: 0,
            data_seed: 0,
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

impl TrainConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_text(&text)
    }

    /// Overlays `key = value` lines on the defaults.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        for (k, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: k + 1,
                    msg: format!("expected key = value, got {line:?}"),
                });
            };
            c.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: k + 1,
                msg: e.to_string(),
            })?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data" => {
                self.data = match v {
                    "synthetic" => DataSource::Synthetic,
                    "csv" => DataSource::Csv,
                    _ => return Err(Error::Config(format!("unknown data source {v:?}"))),
                }
            }
            "train_path" => self.train_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "test_path" => self.test_path = (!v.is_empty()).then(|| PathBuf::from(v)),
            "classes" => self.classes = parse(key, v)?,
            "input_dim" => self.input_dim = parse(key, v)?,
            "n_max" => self.n_max = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "placement" => {
                self.placement = match v {
                    "etf" => MeanPlacement::Etf,
                    "random" => MeanPlacement::Random,
                    _ => return Err(Error::Config(format!("unknown placement {v:?}"))),
                }
            }
            "radius" => self.radius = parse(key, v)?,
            "noise_std" => self.noise_std = parse(key, v)?,
            "test_per_class" => self.test_per_class = parse(key, v)?,
            "hidden" => {
                self.hidden = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "feature_dim" => self.feature_dim = parse(key, v)?,
            "proj_dim" => self.proj_dim = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "freeze_bias" => self.freeze_bias = parse_bool(key, v)?,
            "alpha" => self.alpha = parse(key, v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "t_max" => self.t_max = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "disable" => self.disable = Disabled::parse(v)?,
            "fixed_eta" => self.fixed_eta = parse(key, v)?,
            "p2p_center" => {
                self.p2p_center = match v {
                    "global" => P2pCenter::Global,
                    "row" => P2pCenter::Row,
                    _ => return Err(Error::Config(format!("unknown p2p_center {v:?}"))),
                }
            }
            "aug_noise_std" => self.aug_noise_std = parse(key, v)?,
            "aug_mask_prob" => self.aug_mask_prob = parse(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "data_seed" => self.data_seed = parse(key, v)?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.dims().validate()?;
        let bad = |m: String| Err(Error::Config(m));
        if self.data == DataSource::Csv && self.train_path.is_none() {
            return bad("data = csv requires train_path".into());
        }
        if !(self.beta >= 1.0) {
            return bad(format!("beta must be >= 1, got {}", self.beta));
        }
        if self.n_max == 0 || self.test_per_class == 0 {
            return bad("n_max and test_per_class must be positive".into());
        }
        if self.batch_size == 0 || self.t_max == 0 {
            return bad("batch_size and t_max must be positive".into());
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.momentum) || !(self.weight_decay >= 0.0) {
            return bad("need lr > 0, 0 <= momentum < 1, weight_decay >= 0".into());
        }
        if !(self.alpha >= 0.0) || !(self.gamma > 0.0) {
            return bad("need alpha >= 0 and gamma > 0".into());
        }
        if !(0.0..=1.0).contains(&self.fixed_eta) {
            return bad(format!("fixed_eta must be in [0, 1], got {}", self.fixed_eta));
        }
        if !(self.radius > 0.0) || !(self.noise_std >= 0.0) {
            return bad("need radius > 0 and noise_std >= 0".into());
        }
        if !(self.aug_noise_std >= 0.0) || !(0.0..=1.0).contains(&self.aug_mask_prob) {
            return bad("need aug_noise_std >= 0 and aug_mask_prob in [0, 1]".into());
        }
        if self.mode != Mode::Ablation && self.disable != Disabled::default() {
            return bad(format!("disable is only valid with mode = ablation (mode is {})", self.mode.as_str()));
        }
        if self.data == DataSource::Synthetic
            && self.placement == MeanPlacement::Etf
            && self.input_dim < self.classes
        {
            return bad("etf placement needs input_dim >= classes".into());
        }
        Ok(())
    }

    pub fn dims(&self) -> Dims {
        Dims {
            input: self.input_dim,
            hidden: self.hidden.clone(),
            feature: self.feature_dim,
            proj: self.proj_dim,
            classes: self.classes,
        }
    }

    pub fn long_tail(&self) -> LongTailSpec {
        LongTailSpec {
            classes: self.classes,
            n_max: self.n_max,
            beta: self.beta,
        }
    }

    pub fn synthetic(&self) -> SyntheticSpec {
        SyntheticSpec {
            classes: self.classes,
            input_dim: self.input_dim,
            placement: self.placement,
            radius: self.radius,
            noise_std: self.noise_std,
            mean_seed: self.data_seed,
        }
    }

    pub fn augmenter(&self) -> ViewAugmenter {
        ViewAugmenter {
            noise_std: self.aug_noise_std,
            mask_prob: self.aug_mask_prob,
        }
    }

    /// Effective component switches after applying the mode.
    pub fn disabled(&self) -> Disabled {
        match self.mode {
            Mode::AllNc => Disabled::default(),
            Mode::CeBaseline => Disabled {
                hycon: true,
                p2p_mu: true,
                p2p_w: true,
                gbbn: true,
            },
            Mode::Ablation => self.disable,
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let hidden: Vec<String> = self.hidden.iter().map(ToString::to_string).collect();
        let lines: Vec<(&str, String)> = vec![
            ("data", match self.data {
                DataSource::Synthetic => "synthetic".into(),
                DataSource::Csv => "csv".into(),
            }),
            ("train_path", path(&self.train_path)),
            ("test_path", path(&self.test_path)),
            ("classes", self.classes.to_string()),
            ("input_dim", self.input_dim.to_string()),
            ("n_max", self.n_max.to_string()),
            ("beta", self.beta.to_string()),
            ("placement", match self.placement {
                MeanPlacement::Etf => "etf".into(),
                MeanPlacement::Random => "random".into(),
            }),
            ("radius", self.radius.to_string()),
            ("noise_std", self.noise_std.to_string()),
            ("test_per_class", self.test_per_class.to_string()),
            ("hidden", hidden.join(",")),
            ("feature_dim", self.feature_dim.to_string()),
            ("proj_dim", self.proj_dim.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("freeze_bias", self.freeze_bias.to_string()),
            ("alpha", self.alpha.to_string()),
            ("gamma", self.gamma.to_string()),
            ("t_max", self.t_max.to_string()),
            ("mode", self.mode.as_str().into()),
            ("disable", self.disable.to_text()),
            ("fixed_eta", self.fixed_eta.to_string()),
            ("p2p_center", match self.p2p_center {
                P2pCenter::Global => "global".into(),
                P2pCenter::Row => "row".into(),
            }),
            ("aug_noise_std", self.aug_noise_std.to_string()),
            ("aug_mask_prob", self.aug_mask_prob.to_string()),
            ("seed", self.seed.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("out_dir", self.out_dir.display().to_string()),
        ];
        for (k, v) in lines {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}
