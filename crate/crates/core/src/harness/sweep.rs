use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::data::fmt9;
use crate::error::{Error, Result};
use crate::harness::config::TrainConfig;
use crate::harness::output::emit_outputs;
use crate::harness::train::{run_train, RunOutput, RunStatus};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Gamma,
    Alpha,
    Beta,
}

impl FromStr for SweepParam {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gamma" => Ok(SweepParam::Gamma),
            "alpha" => Ok(SweepParam::Alpha),
            "beta" => Ok(SweepParam::Beta),
            _ => Err(Error::Config(format!("cannot sweep {s:?}; use gamma, alpha or beta"))),
        }
    }
}

impl SweepParam {
    pub fn name(self) -> &'static str {
        match self {
            SweepParam::Gamma => "gamma",
            SweepParam::Alpha => "alpha",
            SweepParam::Beta => "beta",
        }
    }

    pub fn apply(self, config: &mut TrainConfig, v: f64) {
        match self {
            SweepParam::Gamma => config.gamma = v,
            SweepParam::Alpha => config.alpha = v,
            SweepParam::Beta => config.beta = v,
        }
    }
}

#[derive(Debug)]
pub struct SweepRow {
    pub value: f64,
    /// `Err` holds the failure message of a run that could not finish.
    pub outcome: std::result::Result<RunOutput, String>,
}

pub const SWEEP_HEADER: &str = "value,status,many,medium,few,all,std_cos_mu,std_cos_w,delta,ncc_agreement";

/// Runs one training per value with shared seeds. Runs are independent and
/// execute on the rayon pool; a failed run is recorded, not propagated.
pub fn sweep(config: &TrainConfig, param: SweepParam, values: &[f64]) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    Ok(values
        .par_iter()
        .map(|&v| {
            let mut c = config.clone();
            param.apply(&mut c, v);
            c.out_dir = config.out_dir.join(format!("{}={v}", param.name()));
            let outcome = c.validate().and_then(|_| run_train(&c)).map_err(|e| e.to_string());
            SweepRow { value: v, outcome }
        })
        .collect())
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = format!("{SWEEP_HEADER}\n");
    let na = "NA".to_string();
    for r in rows {
        match &r.outcome {
            Ok(run) => {
                let a = &run.final_accuracy;
                let rep = &run.final_report;
                let status = match &run.status {
                    RunStatus::Completed => "ok",
                    RunStatus::Diverged { .. } => "diverged",
                };
                let o = |v: Option<f64>| v.map_or_else(|| na.clone(), fmt9);
                let _ = writeln!(
                    s,
                    "{},{status},{},{},{},{},{},{},{},{}",
                    r.value,
                    o(a.many),
                    o(a.medium),
                    o(a.few),
                    fmt9(a.overall),
                    fmt9(rep.std_cos_mu),
                    fmt9(rep.std_cos_w),
                    fmt9(rep.delta),
                    fmt9(rep.ncc_agreement)
                );
            }
            Err(_) => {
                let _ = writeln!(s, "{},failed{}", r.value, ",NA".repeat(8));
            }
        }
    }
    s
}

/// Writes each run directory under `out_dir/<param>=<value>/` and the table
/// as `out_dir/sweep.csv`.
pub fn emit_sweep(rows: &[SweepRow], out_dir: &Path) -> Result<()> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    for r in rows {
        if let Ok(run) = &r.outcome {
            emit_outputs(run, &run.config.out_dir)?;
        }
    }
    let path = out_dir.join("sweep.csv");
    std::fs::write(&path, sweep_table(rows)).map_err(|e| Error::io(&path, e))
}
