//! The `slp` command line. Every subcommand reads an optional JSON run
//! configuration, logs its seed and configuration hash, and writes its
//! results as CSV under an output directory.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::{error, info};

use crate::analysis::evaluate::{evaluate, rows_to_csv, Precoding, CSV_HEADER};
use crate::analysis::experiment::{fit, phis_of, sweep_error_bound, sweep_qr, RunConfig};
use crate::analysis::flops::{method_flops, Method};
use crate::analysis::memory::memory_footprint;
use crate::barrier_solver::solve_robust_slp;
use crate::channel_data::{build_dataset, load_dataset, save_dataset, Dataset};
use crate::ci_core::{RobustGeometry, RobustSign};
use crate::error::Error;
use crate::quantize::Scheme;
use crate::slp_dnet::model::{SlpDnetModel, Variant};

pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "slp", version, about = "Symbol-level precoding: solver, learned precoders and cost accounting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration; defaults apply to omitted fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured root seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a normalized channel dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        /// Dataset file; a JSON sidecar is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Solve every channel of a dataset with the barrier solver.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Dataset file; the configured test set is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one learned precoder and write its checkpoint and loss trace.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_variant, default_value = "slp-dnet")]
        variant: Variant,
        /// Quantization ratio of the stochastic variants.
        #[arg(long, default_value_t = 0.5)]
        qr: f64,
        /// Squared CSI error bound; a positive value trains the robust model.
        #[arg(long, default_value_t = 0.0)]
        csi_error_bound: f64,
        /// Dataset file; the configured training set is generated when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Mean power and violation rate of trained checkpoints and the solver.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long, required = true)]
        checkpoint: Vec<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Analytical operation count of one method.
    Flops {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        #[arg(long)]
        m: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        qr: f64,
        #[arg(long, default_value_t = 1e-6)]
        epsilon: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Inference memory of every variant, or of one checkpoint.
    Memory {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 0.5)]
        qr: f64,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate over the configured quantization ratios.
    SweepQr {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train and evaluate the robust precoders over the configured error bounds.
    SweepErrorBound {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    [Variant::Dnet, Variant::Dbnet, Variant::Dtnet, Variant::Dsqbnet, Variant::Dsqtnet]
        .into_iter()
        .find(|v| v.name() == s)
        .ok_or_else(|| format!("unknown variant '{s}'"))
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) | Error::Version { .. } => Failure::Usage(e.to_string()),
            other => Failure::Runtime(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

type Outcome = std::result::Result<(), Failure>;

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code.
pub fn cli_main<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(Failure::Usage(msg)) => {
            error!("usage error: {msg}");
            EXIT_USAGE
        }
        Err(Failure::Runtime(e)) => {
            error!("{e}");
            EXIT_RUNTIME
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig, Failure> {
    let mut cfg = match &common.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read config {}: {e}", path.display())))?;
            RunConfig::from_json(&text)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    info!("seed {} config sha256 {}", cfg.seed, cfg.hash());
    Ok(cfg)
}

fn out_dir(path: &Path) -> Result<(), Failure> {
    fs::create_dir_all(path)?;
    Ok(())
}

fn write(path: PathBuf, contents: &str) -> Outcome {
    fs::write(&path, contents)?;
    info!("wrote {}", path.display());
    Ok(())
}

fn dataset_or(path: &Option<PathBuf>, fallback: impl FnOnce() -> crate::Result<Dataset>) -> Result<Dataset, Failure> {
    match path {
        Some(p) if !p.exists() => Err(Failure::Usage(format!("dataset {} does not exist", p.display()))),
        Some(p) => Ok(load_dataset(p)?),
        None => Ok(fallback()?),
    }
}

fn run(command: Command) -> Outcome {
    match command {
        Command::GenData { common, m, k, count, out } => {
            let mut cfg = load_config(&common)?;
            cfg.system.m = m.unwrap_or(cfg.system.m);
            cfg.system.k = k.unwrap_or(cfg.system.k);
            let count = count.unwrap_or(cfg.data.train_count);
            let data = build_dataset(&cfg.system, count, cfg.seed, cfg.data.train_sinr_range_db)?;
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                out_dir(dir)?;
            }
            save_dataset(&data, &out)?;
            info!("wrote {count} channels to {}", out.display());
            Ok(())
        }
        Command::Solve { common, data, out } => {
            let cfg = load_config(&common)?;
            let data = dataset_or(&data, || cfg.test_set())?;
            out_dir(&out)?;
            let system = data.config;
            let geom = RobustGeometry::new(system.m, system.theta());
            let mut csv = String::from("sample,gamma_dB,power,barrier_updates,newton_steps,duality_gap,status\n");
            for &db in &cfg.sinr_grid_db {
                let gammas = vec![crate::analysis::evaluate::db_to_linear(db); system.k];
                for (i, s) in data.samples.iter().enumerate() {
                    let r = solve_robust_slp(&s.phi, &gammas, &geom, system.csi_error_bound, &system, &cfg.solver, RobustSign::Corrected)?;
                    writeln!(
                        csv,
                        "{i},{db},{:.12e},{},{},{:.6e},{:?}",
                        r.precoder.power(),
                        r.iterations.0,
                        r.iterations.1,
                        r.duality_gap_estimate,
                        r.status
                    )
                    .expect("writing to a String");
                }
            }
            write(out.join("solve.csv"), &csv)
        }
        Command::Train { common, variant, qr, csi_error_bound, data, out } => {
            let cfg = load_config(&common)?;
            if !(csi_error_bound >= 0.0) {
                return Err(Failure::Usage(format!("CSI error bound {csi_error_bound} must be non-negative")));
            }
            let quant = match variant {
                Variant::Dnet => None,
                Variant::Dbnet => Some((Scheme::Binary, 1.0)),
                Variant::Dtnet => Some((Scheme::Ternary, 1.0)),
                Variant::Dsqbnet => Some((Scheme::Binary, qr)),
                Variant::Dsqtnet => Some((Scheme::Ternary, qr)),
            };
            let data = dataset_or(&data, || cfg.training_set())?;
            out_dir(&out)?;
            let (model, trace) = fit(&cfg, quant, csi_error_bound, &phis_of(&data))?;
            model.save(&out.join("model.ckpt"))?;
            write(out.join("trace.csv"), &trace.to_csv())
        }
        Command::Eval { common, checkpoint, data, out } => {
            let cfg = load_config(&common)?;
            if let Some(missing) = checkpoint.iter().find(|p| !p.exists()) {
                return Err(Failure::Usage(format!("checkpoint {} does not exist; train one first", missing.display())));
            }
            let mut models = checkpoint.iter().map(|p| SlpDnetModel::load(p)).collect::<crate::Result<Vec<_>>>()?;
            let data = dataset_or(&data, || cfg.test_set())?;
            out_dir(&out)?;
            let mut cols = vec![Precoding::Solver { csi_error_bound: data.config.csi_error_bound, config: cfg.solver }];
            cols.extend(models.iter_mut().map(|model| Precoding::Model { model }));
            let rows = evaluate(&mut cols, &phis_of(&data), &cfg.sinr_grid_db, &data.config)?;
            write(out.join("eval.csv"), &rows_to_csv(&rows))
        }
        Command::Flops { common, method, m, k, qr, epsilon, out } => {
            let cfg = load_config(&common)?;
            let r = method_flops(method, m.unwrap_or(cfg.system.m), k.unwrap_or(cfg.system.k), qr, epsilon)?;
            let eps = r.epsilon.map_or(String::new(), |e| e.to_string());
            let csv = format!(
                "method,M,K,QR,epsilon,binary_ops,float_ops,total_weighted\n{},{},{},{},{},{},{},{}\n",
                r.method, r.m, r.k, r.qr, eps, r.binary_ops, r.float_ops, r.total_weighted
            );
            println!("{}", r.total_weighted);
            if let Some(dir) = out {
                out_dir(&dir)?;
                write(dir.join("flops.csv"), &csv)?;
            }
            Ok(())
        }
        Command::Memory { common, qr, checkpoint, out } => {
            let cfg = load_config(&common)?;
            let models = match checkpoint {
                Some(p) if !p.exists() => return Err(Failure::Usage(format!("checkpoint {} does not exist", p.display()))),
                Some(p) => vec![SlpDnetModel::load(&p)?],
                None => [None, Some((Scheme::Binary, 1.0)), Some((Scheme::Ternary, 1.0)), Some((Scheme::Binary, qr)), Some((Scheme::Ternary, qr))]
                    .into_iter()
                    .map(|q| SlpDnetModel::new(cfg.model_config(q, false)))
                    .collect::<crate::Result<Vec<_>>>()?,
            };
            out_dir(&out)?;
            let mut csv = String::from("method,QR,binary_params,ternary_params,float_params,bytes,savings_vs_full\n");
            for m in &models {
                let r = memory_footprint(m);
                let ratio = m.config.quant.map_or(0.0, |p| p.ratio);
                writeln!(
                    csv,
                    "{},{ratio},{},{},{},{},{:.6}",
                    m.config.variant().name(),
                    r.binary_params,
                    r.ternary_params,
                    r.float_params,
                    r.bytes,
                    r.savings_vs_full
                )
                .expect("writing to a String");
            }
            write(out.join("memory.csv"), &csv)
        }
        Command::SweepQr { common, out } => {
            let cfg = load_config(&common)?;
            let (train, test) = (cfg.training_set()?, cfg.test_set()?);
            out_dir(&out)?;
            let rows = sweep_qr(&cfg, &phis_of(&train), &phis_of(&test))?;
            write(out.join("sweep_qr.csv"), &rows_to_csv(&rows))
        }
        Command::SweepErrorBound { common, out } => {
            let cfg = load_config(&common)?;
            let (train, test) = (cfg.training_set()?, cfg.test_set()?);
            out_dir(&out)?;
            let rows = sweep_error_bound(&cfg, &phis_of(&train), &phis_of(&test))?;
            let body = rows_to_csv(&rows.iter().map(|(_, r)| r.clone()).collect::<Vec<_>>());
            let mut csv = format!("csi_error_bound,{CSV_HEADER}\n");
            for ((bound, _), line) in rows.iter().zip(body.lines().skip(1)) {
                writeln!(csv, "{bound},{line}").expect("writing to a String");
            }
            write(out.join("sweep_error_bound.csv"), &csv)
        }
    }
}
