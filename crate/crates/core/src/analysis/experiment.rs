//! Versioned run configuration and the train-then-evaluate pipelines shared by
//! the command line and the end-to-end tests.

use log::info;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::analysis::evaluate::{evaluate, EvalRow, Precoding};
use crate::barrier_solver::SolverConfig;
use crate::channel_data::{build_dataset, Dataset, SystemConfig};
use crate::error::{Error, Result};
use crate::quantize::{ProbFn, QuantPlan, Scheme};
use crate::slp_dnet::model::{ModelConfig, SlpDnetModel};
use crate::slp_dnet::train::{train, TrainConfig, TrainingTrace};

pub const CONFIG_VERSION: u32 = 1;

/// Offset between the training and test channel seeds.
const TEST_SEED_OFFSET: u64 = 0x9E37_79B9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_count: usize,
    pub test_count: usize,
    pub train_sinr_range_db: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_count: 50_000, test_count: 2000, train_sinr_range_db: (0.0, 45.0) }
    }
}

/// Architecture and quantization of the learned precoder, minus the system
/// dimensions and seeds that the run supplies.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub blocks: usize,
    pub newton_steps: usize,
    pub kappa: f64,
    pub mu: f64,
    pub activation_bits: u32,
    pub prob_fn: ProbFn,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        Self {
            blocks: m.blocks,
            newton_steps: m.newton_steps,
            kappa: m.kappa,
            mu: m.mu,
            activation_bits: m.activation_bits,
            prob_fn: ProbFn::Linear,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub ratios: Vec<f64>,
    pub schemes: Vec<Scheme>,
    pub error_bounds: Vec<f64>,
    /// Target at which the sweeps are reported.
    pub gamma_db: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            ratios: vec![0.0, 0.25, 0.5, 0.75, 1.0],
            schemes: vec![Scheme::Binary, Scheme::Ternary],
            error_bounds: vec![1e-4, 4e-4, 1e-3],
            gamma_db: 30.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub version: u32,
    /// Root seed. Channels, initialization, shuffling and row lotteries are
    /// all derived from it.
    pub seed: u64,
    pub system: SystemConfig,
    pub data: DataConfig,
    pub model: ArchConfig,
    pub train: TrainConfig,
    pub solver: SolverConfig,
    pub sinr_grid_db: Vec<f64>,
    pub sweep: SweepConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            system: SystemConfig::default(),
            data: DataConfig::default(),
            model: ArchConfig::default(),
            train: TrainConfig::default(),
            solver: SolverConfig::default(),
            sinr_grid_db: (0..=6).map(|i| 5.0 * i as f64).collect(),
            sweep: SweepConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::Version { found: self.version, expected: CONFIG_VERSION });
        }
        self.system.validate()?;
        self.train.validate()?;
        self.solver.validate()?;
        let (lo, hi) = self.data.train_sinr_range_db;
        if !(lo <= hi) {
            return Err(Error::Config(format!("training SINR range ({lo}, {hi}) is empty")));
        }
        if self.sweep.ratios.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("sweep ratios must lie in [0, 1]".into()));
        }
        if self.sweep.error_bounds.iter().any(|b| !(*b >= 0.0)) {
            return Err(Error::Config("sweep error bounds must be non-negative".into()));
        }
        self.model_config(None, false).validate()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }

    pub fn train_seed(&self) -> u64 {
        self.seed
    }

    pub fn test_seed(&self) -> u64 {
        self.seed.wrapping_add(TEST_SEED_OFFSET)
    }

    pub fn model_config(&self, quant: Option<(Scheme, f64)>, robust: bool) -> ModelConfig {
        let a = &self.model;
        ModelConfig {
            system: self.system,
            blocks: a.blocks,
            newton_steps: a.newton_steps,
            kappa: a.kappa,
            mu: a.mu,
            activation_bits: a.activation_bits,
            robust,
            quant: quant.map(|(scheme, ratio)| QuantPlan { scheme, ratio, prob_fn: a.prob_fn, seed: self.seed }),
            init_seed: self.seed,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.seed, ..self.train }
    }

    pub fn training_set(&self) -> Result<Dataset> {
        build_dataset(&self.system, self.data.train_count, self.train_seed(), self.data.train_sinr_range_db)
    }

    pub fn test_set(&self) -> Result<Dataset> {
        build_dataset(&self.system, self.data.test_count, self.test_seed(), self.data.train_sinr_range_db)
    }
}

pub fn phis_of(data: &Dataset) -> Vec<DMatrix<f64>> {
    data.samples.iter().map(|s| s.phi.clone()).collect()
}

/// Builds and trains one learned precoder on `train_phis`.
pub fn fit(
    run: &RunConfig,
    quant: Option<(Scheme, f64)>,
    csi_error_bound: f64,
    train_phis: &[DMatrix<f64>],
) -> Result<(SlpDnetModel, TrainingTrace)> {
    let robust = csi_error_bound > 0.0;
    let mut cfg = run.model_config(quant, robust);
    cfg.system.csi_error_bound = csi_error_bound;
    let mut model = SlpDnetModel::new(cfg)?;
    info!("training {} (csi bound {csi_error_bound}) on {} channels", model.config.variant().name(), train_phis.len());
    let trace = train(&mut model, train_phis, &run.train_config())?;
    Ok((model, trace))
}

/// Power against quantization ratio for every configured scheme, with the
/// solver as reference.
pub fn sweep_qr(run: &RunConfig, train_phis: &[DMatrix<f64>], test_phis: &[DMatrix<f64>]) -> Result<Vec<EvalRow>> {
    let grid = [run.sweep.gamma_db];
    let mut rows = evaluate(&mut [Precoding::Solver { csi_error_bound: 0.0, config: run.solver }], test_phis, &grid, &run.system)?;
    for &scheme in &run.sweep.schemes {
        for &ratio in &run.sweep.ratios {
            let (mut model, _) = fit(run, Some((scheme, ratio)), 0.0, train_phis)?;
            let mut row = evaluate(&mut [Precoding::Model { model: &mut model }], test_phis, &grid, &run.system)?;
            // A zero ratio is the full-precision network; keep the scheme visible.
            for r in &mut row {
                r.method = format!("{}-{}", r.method, scheme_name(scheme));
            }
            rows.extend(row);
        }
    }
    Ok(rows)
}

pub fn scheme_name(s: Scheme) -> &'static str {
    match s {
        Scheme::Binary => "binary",
        Scheme::Ternary => "ternary",
    }
}

/// Power against the squared CSI error bound for the robust solver and the
/// robust learned precoder, keyed by bound.
pub fn sweep_error_bound(
    run: &RunConfig,
    train_phis: &[DMatrix<f64>],
    test_phis: &[DMatrix<f64>],
) -> Result<Vec<(f64, EvalRow)>> {
    let grid = [run.sweep.gamma_db];
    let mut out = Vec::new();
    for &bound in &run.sweep.error_bounds {
        let mut cols = vec![Precoding::Solver { csi_error_bound: bound, config: run.solver }];
        let mut model = if bound > 0.0 { Some(fit(run, None, bound, train_phis)?.0) } else { None };
        if let Some(m) = model.as_mut() {
            cols.push(Precoding::Model { model: m });
        }
        out.extend(evaluate(&mut cols, test_phis, &grid, &run.system)?.into_iter().map(|r| (bound, r)));
    }
    Ok(out)
}
