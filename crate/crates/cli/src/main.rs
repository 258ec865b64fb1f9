use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use nclab::data::fmt9;
use nclab::etf::{etf_deviation, make_etf};
use nclab::harness::{self, Mode, RunStatus, SweepParam, TrainConfig};

#[derive(Parser)]
#[command(name = "nclab", version, about = "Neural-collapse experiments on small networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model and write a run directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// allnc, ce or ablation; overrides the config file.
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Diagnostics for exported features and classifier weights.
    Metrics {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        bias: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a simplex ETF and print its Gram matrix and deviation.
    Etf {
        #[arg(long)]
        dim: usize,
        #[arg(long)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the q×C vertex matrix here.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
    /// Train once per value of gamma, alpha or beta.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn load_config(path: &Path) -> Result<TrainConfig> {
    TrainConfig::from_file(path).with_context(|| format!("reading config {}", path.display()))
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, mode, seed, out } => {
            let mut c = load_config(&config)?;
            if let Some(m) = mode {
                c.mode = m.parse::<Mode>()?;
            }
            if let Some(s) = seed {
                c.seed = s;
            }
            if let Some(o) = out {
                c.out_dir = o;
            }
            c.validate()?;
            let run = harness::run_train(&c)?;
            harness::emit_outputs(&run, &c.out_dir)?;
            let r = &run.final_report;
            println!("run written to {}", c.out_dir.display());
            println!(
                "nc1 {}  std_cos_mu {}  std_cos_w {}  delta {}  ncc {}",
                fmt9(r.nc1),
                fmt9(r.std_cos_mu),
                fmt9(r.std_cos_w),
                fmt9(r.delta),
                fmt9(r.ncc_agreement)
            );
            let a = &run.final_accuracy;
            let o = |v: Option<f64>| v.map_or("NA".to_string(), |x| format!("{x:.4}"));
            println!(
                "test accuracy  all {:.4}  many {}  medium {}  few {}",
                a.overall,
                o(a.many),
                o(a.medium),
                o(a.few)
            );
            if let RunStatus::Diverged { epoch, reason } = &run.status {
                bail!("training diverged at epoch {epoch}: {reason}; outputs hold the last good epoch");
            }
        }
        Command::Metrics { features, weights, bias, out } => {
            let report = harness::metrics_from_files(&features, &weights, bias.as_deref())?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            harness::write_report(&out, &report)?;
            println!("{}", summary_line(&report));
        }
        Command::Etf { dim, classes, seed, csv } => {
            let f = make_etf(dim, classes, seed)?;
            let g = f.gram();
            for i in 0..classes {
                let row: Vec<String> = g.row(i).iter().map(|v| format!("{v:>10.6}")).collect();
                println!("{}", row.join(" "));
            }
            println!("deviation {:e}", etf_deviation(&f.vertices)?);
            if let Some(path) = csv {
                let mut s = String::new();
                for r in 0..dim {
                    let row: Vec<String> = f.vertices.row(r).iter().map(|&v| fmt9(v)).collect();
                    s.push_str(&row.join(","));
                    s.push('\n');
                }
                fs::write(&path, s).with_context(|| format!("writing {}", path.display()))?;
            }
        }
        Command::Sweep { config, param, values, out } => {
            let mut c = load_config(&config)?;
            if let Some(o) = out {
                c.out_dir = o;
            }
            let p: SweepParam = param.parse()?;
            let rows = harness::sweep(&c, p, &values)?;
            harness::emit_sweep(&rows, &c.out_dir)?;
            print!("{}", harness::sweep::sweep_table(&rows));
            for r in &rows {
                if let Err(e) = &r.outcome {
                    eprintln!("{}={} failed: {e}", p.name(), r.value);
                }
            }
        }
    }
    Ok(())
}

fn summary_line(r: &nclab::ncmetrics::NcReport) -> String {
    format!(
        "classes {}  nc1 {}  std_cos_mu {}  std_cos_w {}  delta {}  ncc {}{}",
        r.classes,
        fmt9(r.nc1),
        fmt9(r.std_cos_mu),
        fmt9(r.std_cos_w),
        fmt9(r.delta),
        fmt9(r.ncc_agreement),
        if r.partial_coverage { "  (partial class coverage)" } else { "" }
    )
}
