//! Monte-Carlo transmit-power evaluation over a fixed set of test channels.

use std::fmt::Write as _;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::barrier_solver::{solve_robust_slp, SolveStatus, SolverConfig};
use crate::channel_data::SystemConfig;
use crate::ci_core::{ConstraintSet, RobustGeometry, RobustSign};
use crate::error::{Error, Result};
use crate::slp_dnet::model::SlpDnetModel;

/// A user counts as violated below this margin.
pub const VIOLATION_TOLERANCE: f64 = 1e-6;

pub const CSV_HEADER: &str = "method,M,K,QR,gamma_dB,mean_power,stderr,violation_rate";

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub method: String,
    pub m: usize,
    pub k: usize,
    pub qr: f64,
    pub gamma_db: f64,
    pub mean_power: f64,
    pub stderr: f64,
    pub violation_rate: f64,
}

/// One column of an evaluation: the optimization oracle or a learned model.
pub enum Precoding<'a> {
    Solver { csi_error_bound: f64, config: SolverConfig },
    Model { model: &'a mut SlpDnetModel },
}

impl Precoding<'_> {
    pub fn oracle(csi_error_bound: f64) -> Self {
        Precoding::Solver { csi_error_bound, config: SolverConfig::default() }
    }

    pub fn name(&self) -> String {
        match self {
            Precoding::Solver { csi_error_bound, .. } if *csi_error_bound > 0.0 => "robust-slp-opt".into(),
            Precoding::Solver { .. } => "slp-opt".into(),
            Precoding::Model { model } => {
                let base = model.config.variant().name();
                if model.config.robust {
                    format!("robust-{base}")
                } else {
                    base.into()
                }
            }
        }
    }

    fn ratio(&self) -> f64 {
        match self {
            Precoding::Model { model } => model.config.quant.map_or(0.0, |p| p.ratio),
            Precoding::Solver { .. } => 0.0,
        }
    }

    /// (power, users below tolerance) per channel at a common target. The power
    /// is `None` where the solver proves the problem infeasible.
    fn powers(&mut self, phis: &[DMatrix<f64>], gamma: f64, system: &SystemConfig) -> Result<Vec<(Option<f64>, usize)>> {
        match self {
            Precoding::Solver { csi_error_bound, config } => {
                let geom = RobustGeometry::new(system.m, system.theta());
                let gammas = vec![gamma; system.k];
                phis.iter()
                    .map(|phi| {
                        let sol = solve_robust_slp(phi, &gammas, &geom, *csi_error_bound, system, config, RobustSign::Corrected)?;
                        if sol.status == SolveStatus::Infeasible {
                            return Ok((None, system.k));
                        }
                        let cs = ConstraintSet::robust(phi, &gammas, system.n0, system.theta(), *csi_error_bound, RobustSign::Corrected);
                        let bad = cs.user_margins(sol.precoder.u()).iter().filter(|&&g| g < -VIOLATION_TOLERANCE).count();
                        Ok((Some(sol.precoder.power()), bad))
                    })
                    .collect()
            }
            Precoding::Model { model } => Ok(model
                .infer_batch(phis, gamma)?
                .into_iter()
                .map(|r| (Some(r.power), r.margins.iter().filter(|&&g| g < -VIOLATION_TOLERANCE).count()))
                .collect()),
        }
    }
}

/// Mean power, its standard error and the violated-user fraction for every
/// (column, target) pair, in column-major order. Channels without a feasible
/// precoder count as fully violated and stay out of the power statistics.
pub fn evaluate(columns: &mut [Precoding], phis: &[DMatrix<f64>], sinr_grid_db: &[f64], system: &SystemConfig) -> Result<Vec<EvalRow>> {
    if phis.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut rows = Vec::new();
    for col in columns.iter_mut() {
        for &db in sinr_grid_db {
            let res = col.powers(phis, db_to_linear(db), system)?;
            let powers: Vec<f64> = res.iter().filter_map(|r| r.0).collect();
            let n = powers.len() as f64;
            let mean = if powers.is_empty() { f64::NAN } else { powers.iter().sum::<f64>() / n };
            let var = if powers.len() > 1 { powers.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
            let bad: usize = res.iter().map(|r| r.1).sum();
            rows.push(EvalRow {
                method: col.name(),
                m: system.m,
                k: system.k,
                qr: col.ratio(),
                gamma_db: db,
                mean_power: mean,
                stderr: (var / n).sqrt(),
                violation_rate: bad as f64 / (res.len() * system.k) as f64,
            });
        }
    }
    Ok(rows)
}

pub fn rows_to_csv(rows: &[EvalRow]) -> String {
    let mut s = format!("{CSV_HEADER}\n");
    for r in rows {
        writeln!(
            s,
            "{},{},{},{},{},{:.12e},{:.12e},{}",
            r.method, r.m, r.k, r.qr, r.gamma_db, r.mean_power, r.stderr, r.violation_rate
        )
        .expect("writing to a String");
    }
    s
}
