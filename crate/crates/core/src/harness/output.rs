//! Run directories and the `metrics` file interface.
//!
//! Files written by [`emit_outputs`]:
//!
//! | file | content |
//! |------|---------|
//! | `config.resolved` | every config key, `key = value` |
//! | `epochs.csv` | one row per epoch, header [`EPOCHS_HEADER`] |
//! | `report.json` | final diagnostics on `features.csv` / `weights.csv` |
//! | `summary.json` | run status, class counts, groups, final accuracy |
//! | `features.csv` | `x0..x{d-1},label`, training-set features, 1-based labels |
//! | `weights.csv` | `w0..w{d-1},bias`, one row per class |
//! | `icpa_mu.csv`, `icpa_w.csv` | angle matrices in degrees, header `class,<ids>` |
//! | `params/` | parameter snapshot (`manifest.txt` + one CSV per tensor) |
//!
//! Floats in CSV files carry 9 significant digits.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::data::{fmt9, normalize_labels, read_labeled_csv, write_labeled_csv};
use crate::error::{Error, Result};
use crate::harness::train::{Accuracy, EpochLog, Groups, RunOutput, RunStatus};
use crate::ncmetrics::{nc_report, NcReport};
use crate::numerics::Tensor;

pub const EPOCHS_HEADER: &str = "epoch,eta,alpha,ce,re,hycon,p2p_mu,p2p_w,branch1,branch2,total,\
nc1,std_cos_mu,std_cos_w,delta,ncc_agreement,acc_all,acc_many,acc_medium,acc_few";

fn write(path: &Path, body: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn opt9(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), fmt9)
}

pub fn epochs_csv(epochs: &[EpochLog]) -> String {
    let mut s = String::from(EPOCHS_HEADER);
    s.push('\n');
    for e in epochs {
        let l = &e.losses;
        let r = &e.train_report;
        let a = &e.test_accuracy;
        let cells: Vec<String> = [
            e.eta, e.alpha, l.ce, l.re, l.hycon, l.p2p_mu, l.p2p_w, l.branch1, l.branch2, l.total, r.nc1,
            r.std_cos_mu, r.std_cos_w, r.delta, r.ncc_agreement, a.overall,
        ]
        .into_iter()
        .map(fmt9)
        .chain([opt9(a.many), opt9(a.medium), opt9(a.few)])
        .collect();
        s.push_str(&format!("{},{}\n", e.epoch, cells.join(",")));
    }
    s
}

/// Angle matrix with 1-based class ids.
pub fn icpa_csv(angles: &[Vec<f64>], classes: &[usize]) -> String {
    let ids: Vec<String> = classes.iter().map(|c| (c + 1).to_string()).collect();
    let mut s = format!("class,{}\n", ids.join(","));
    for (row, id) in angles.iter().zip(&ids) {
        let cells: Vec<String> = row.iter().map(|&v| fmt9(v)).collect();
        s.push_str(&format!("{id},{}\n", cells.join(",")));
    }
    s
}

pub fn weights_csv(weights: &Tensor, bias: &[f64]) -> String {
    let d = weights.cols();
    let header: Vec<String> = (0..d).map(|j| format!("w{j}")).chain(["bias".into()]).collect();
    let mut s = header.join(",");
    s.push('\n');
    for (c, b) in bias.iter().enumerate() {
        let cells: Vec<String> = weights.row(c).iter().chain([b]).map(|&v| fmt9(v)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

#[derive(Serialize)]
struct Summary<'a> {
    status: &'a RunStatus,
    epochs_completed: usize,
    train_counts: &'a [usize],
    groups: &'a Groups,
    final_accuracy: &'a Accuracy,
}

pub fn write_report(dir: &Path, report: &NcReport) -> Result<()> {
    let json = serde_json::to_string_pretty(report).expect("report serializes");
    write(&dir.join("report.json"), json)?;
    let all: Vec<usize> = (0..report.classes).collect();
    write(&dir.join("icpa_mu.csv"), icpa_csv(&report.icpa_mu, &report.present_classes))?;
    write(&dir.join("icpa_w.csv"), icpa_csv(&report.icpa_w, &all))
}

pub fn emit_outputs(run: &RunOutput, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write(&out_dir.join("config.resolved"), run.config.to_text())?;
    write(&out_dir.join("epochs.csv"), epochs_csv(&run.epochs))?;
    write_report(out_dir, &run.final_report)?;
    let summary = Summary {
        status: &run.status,
        epochs_completed: run.epochs.len(),
        train_counts: &run.train_counts,
        groups: &run.groups,
        final_accuracy: &run.final_accuracy,
    };
    write(
        &out_dir.join("summary.json"),
        serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    write_labeled_csv(&out_dir.join("features.csv"), &run.features, &run.labels)?;
    write(&out_dir.join("weights.csv"), weights_csv(&run.weights, &run.bias))?;
    run.params.write_snapshot(&out_dir.join("params"))
}

fn read_numeric_rows(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cells: Vec<Option<f64>> = line.split(',').map(|c| c.trim().parse().ok()).collect();
        if k == 0 && cells.iter().any(Option::is_none) {
            continue;
        }
        let row: Vec<f64> = cells
            .into_iter()
            .collect::<Option<_>>()
            .ok_or_else(|| Error::Parse {
                line: k + 1,
                msg: format!("non-numeric cell in {}", path.display()),
            })?;
        if let Some(first) = rows.first() {
            let first: &Vec<f64> = first;
            if first.len() != row.len() {
                return Err(Error::Parse {
                    line: k + 1,
                    msg: format!("expected {} columns, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    if rows.is_empty() {
        return Err(Error::Parse {
            line: 1,
            msg: format!("{} contains no data rows", path.display()),
        });
    }
    Ok(rows)
}

/// Computes diagnostics from a features CSV and a weights CSV.
///
/// `weights` has one row per class with `d` columns, optionally followed by
/// a bias column. A separate `bias` file (one value per class, as a column or
/// a single row) overrides it; with neither, the bias is zero.
pub fn metrics_from_files(features: &Path, weights: &Path, bias: Option<&Path>) -> Result<NcReport> {
    let rows = read_labeled_csv(features)?;
    let d = rows.x.cols();
    let (labels, _) = normalize_labels(&rows.labels)?;

    let wrows = read_numeric_rows(weights)?;
    let classes = wrows.len();
    let width = wrows[0].len();
    let (w, mut b): (Vec<Vec<f64>>, Vec<f64>) = if width == d + 1 {
        wrows.iter().map(|r| (r[..d].to_vec(), r[d])).unzip()
    } else if width == d {
        (wrows, vec![0.0; classes])
    } else {
        return Err(Error::dim(
            "metrics",
            format!("weights have {width} columns; features have {d}"),
        ));
    };
    if let Some(bp) = bias {
        let vals: Vec<f64> = read_numeric_rows(bp)?.concat();
        if vals.len() != classes {
            return Err(Error::dim(
                "metrics",
                format!("{} bias values for {classes} classes", vals.len()),
            ));
        }
        b = vals;
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Contract(format!(
            "feature label {y} exceeds the {classes} classifier rows"
        )));
    }
    let wt = Tensor::from_rows(&w)?;
    nc_report(&rows.x, &labels, classes, &wt, &b)
}
