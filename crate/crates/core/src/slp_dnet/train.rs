//! Block-wise unsupervised training.
//!
//! Each PUM block is trained in turn with the earlier blocks frozen, then the
//! auxiliary network is trained on top of the frozen blocks. The SINR target
//! cancels from the normalized problem, so all losses use a unit target.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{dual_objective, loss_nonrobust};
use super::model::SlpDnetModel;
use super::pum::{barrier_multipliers, barrier_multipliers_backward, pum_step_backward, BlockState};
use crate::ci_core::{multiplier_map, ConstraintSet, Multipliers};
use crate::error::{Error, Result};
use crate::nn::{sigmoid, Adam, AdamConfig, Mode, Param, Tensor4};

/// Losses above this magnitude are treated as divergence.
pub const DIVERGENCE_LIMIT: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    /// Learning-rate factor applied after every epoch.
    pub lr_decay: f64,
    /// Epochs per PUM block.
    pub pum_iters: usize,
    /// Epochs for the auxiliary network.
    pub apm_iters: usize,
    /// Learning-rate multiplier for the auxiliary network. The multipliers
    /// react to its output through the barrier curvature, so it needs far
    /// smaller steps than the blocks.
    pub apm_lr_scale: f64,
    /// Seed of the shuffling order.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { batch_size: 200, lr: 1e-3, lr_decay: 0.65, pum_iters: 20, apm_iters: 10, apm_lr_scale: 3e-4, seed: 0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.apm_lr_scale > 0.0) {
            return Err(Error::Config(format!("apm_lr_scale {} must be positive", self.apm_lr_scale)));
        }
        if !(self.lr > 0.0) || !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(Error::Config(format!("lr {} must be positive and lr_decay {} in (0, 1]", self.lr, self.lr_decay)));
        }
        Ok(())
    }
}

/// One epoch of one training stage. `block` equals the number of PUM blocks
/// for the auxiliary-network stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub iteration: usize,
    pub block: usize,
    /// Mean batch loss over the epoch.
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingTrace {
    pub records: Vec<TraceRecord>,
}

impl TrainingTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iteration,block,loss,lr\n");
        for r in &self.records {
            writeln!(s, "{},{},{:e},{:e}", r.iteration, r.block, r.loss, r.lr).expect("writing to a String");
        }
        s
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    /// Records of one stage, in order.
    pub fn stage(&self, block: usize) -> Vec<TraceRecord> {
        self.records.iter().filter(|r| r.block == block).copied().collect()
    }
}

/// Penalty mu / (N L) * sum ||W||^2 over the weight tensors in `params`,
/// accumulating its gradient. L is the number of weight tensors.
fn weight_penalty(params: &mut [&mut Param], mu: f64, batch: usize) -> f64 {
    let layers = params.iter().filter(|p| p.name == "weight").count();
    if layers == 0 || mu == 0.0 {
        return 0.0;
    }
    let c = mu / (batch * layers) as f64;
    let mut value = 0.0;
    for p in params.iter_mut().filter(|p| p.name == "weight") {
        value += c * p.sq_norm();
        for (g, w) in p.grad.iter_mut().zip(&p.value) {
            *g += 2.0 * c * w;
        }
    }
    value
}

/// Per-sample training loss and its gradient with respect to the stacked
/// multipliers, already divided by the batch size.
fn multiplier_loss(model: &SlpDnetModel, phis: &[DMatrix<f64>], css: &[ConstraintSet], mult: &[DVector<f64>]) -> Result<(f64, Vec<DVector<f64>>)> {
    let n = phis.len() as f64;
    let sys = model.config.system;
    if css[0].s > 0.0 {
        let mut value = 0.0;
        let mut grads = Vec::with_capacity(phis.len());
        for (cs, m) in css.iter().zip(mult) {
            let (v, g) = dual_objective(cs, m);
            value += v / n;
            grads.push(g / n);
        }
        return Ok((value, grads));
    }
    // the learning objective is -L at the closed-form precoder u = E v
    let maps: Vec<_> = phis.iter().map(|p| multiplier_map(p, sys.theta())).collect();
    let u: Vec<_> = maps.iter().zip(mult).map(|(e, m)| e * m).collect();
    let mults = mult.iter().map(Multipliers::from_stacked).collect::<Result<Vec<_>>>()?;
    let ones = vec![1.0; phis.len()];
    let unit = crate::channel_data::SystemConfig { n0: 1.0, ..sys };
    let eval = loss_nonrobust(&u, phis, &mults, &ones, &unit, 0.0)?;
    let grads = maps.iter().zip(eval.grad_u.iter().zip(&eval.grad_mult)).map(|(e, (gu, gm))| -(gm + e.tr_mul(gu))).collect();
    Ok((-eval.value, grads))
}

fn check_loss(loss: f64, iteration: usize, trace: &TrainingTrace) -> Result<()> {
    if !loss.is_finite() || loss.abs() > DIVERGENCE_LIMIT {
        return Err(Error::Divergence { iteration, loss, trace: trace.records.iter().map(|r| r.loss).collect() });
    }
    Ok(())
}

struct Stage<'a> {
    phis: &'a [DMatrix<f64>],
    css: Vec<ConstraintSet>,
    order: Vec<usize>,
    rng: ChaCha8Rng,
}

impl<'a> Stage<'a> {
    fn batches(&mut self, size: usize) -> Vec<Vec<usize>> {
        self.order.shuffle(&mut self.rng);
        self.order.chunks(size).map(<[usize]>::to_vec).collect()
    }
}

/// Trains `model` in place on the channel matrices `phis`.
pub fn train(model: &mut SlpDnetModel, phis: &[DMatrix<f64>], cfg: &TrainConfig) -> Result<TrainingTrace> {
    cfg.validate()?;
    if phis.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut stage = Stage {
        phis,
        css: phis.iter().map(|p| model.normalized_constraints(p)).collect(),
        order: (0..phis.len()).collect(),
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
    };
    let x_all = model.input_tensor(phis)?;
    let mut trace = TrainingTrace::default();
    let mut iteration = 0;
    for l in 0..model.blocks.len() {
        let inputs: Vec<DVector<f64>> = if l == 0 {
            phis.iter().map(SlpDnetModel::initial_precoder).collect()
        } else {
            model.run_blocks(phis, &x_all, l, Mode::Eval)?.into_iter().map(|s| s.u_out).collect()
        };
        let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..AdamConfig::default() });
        for _ in 0..cfg.pum_iters {
            let mut total = 0.0;
            let batches = stage.batches(cfg.batch_size);
            for idx in &batches {
                total += pum_batch_grad(model, l, &stage, &x_all, &inputs, idx)?;
                opt.step(&mut model.blocks[l].params_mut());
            }
            let loss = total / batches.len() as f64;
            trace.records.push(TraceRecord { iteration, block: l, loss, lr: opt.lr() });
            check_loss(loss, iteration, &trace)?;
            log::debug!("block {l} epoch {iteration}: loss {loss:.6e}");
            opt.decay_lr(cfg.lr_decay);
            iteration += 1;
        }
    }
    let last = model.run_blocks(phis, &x_all, model.blocks.len(), Mode::Eval)?;
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr * cfg.apm_lr_scale, ..AdamConfig::default() });
    let apm_stage = model.blocks.len();
    for _ in 0..cfg.apm_iters {
        let mut total = 0.0;
        let batches = stage.batches(cfg.batch_size);
        for idx in &batches {
            total += apm_batch_grad(model, &stage, &x_all, &last, idx)?;
            opt.step(&mut model.apm.params_mut());
        }
        let loss = total / batches.len() as f64;
        trace.records.push(TraceRecord { iteration, block: apm_stage, loss, lr: opt.lr() });
        check_loss(loss, iteration, &trace)?;
        log::debug!("apm epoch {iteration}: loss {loss:.6e}");
        opt.decay_lr(cfg.lr_decay);
        iteration += 1;
    }
    Ok(trace)
}

fn gather<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Batch loss of block `l`, leaving its gradients in the block's parameters.
fn pum_batch_grad(
    model: &mut SlpDnetModel,
    l: usize,
    stage: &Stage,
    x_all: &Tensor4,
    inputs: &[DVector<f64>],
    idx: &[usize],
) -> Result<f64> {
    let cfg = model.config;
    let x = x_all.select(idx);
    let phis = gather(stage.phis, idx);
    let css = gather(&stage.css, idx);
    let block = &mut model.blocks[l];
    block.barrier.zero_grad();
    block.gamma_raw.zero_grad();
    block.lambda.zero_grad();
    let w = block.weights(&x, Mode::Train)?;
    let states: Vec<BlockState> =
        idx.iter().enumerate().map(|(b, &i)| block.step(&css[b], &inputs[i], w[b], &cfg)).collect::<Result<_>>()?;
    let mult: Vec<_> = states.iter().map(|s| s.multipliers.clone()).collect();
    let (mut loss, mult_bar) = multiplier_loss(model, &phis, &css, &mult)?;
    let block = &mut model.blocks[l];
    let mut w_bar = Tensor4::zeros([idx.len(), 1, 1, 1]);
    let (mut gamma_bar, mut lambda_bar) = (0.0, 0.0);
    for (b, st) in states.iter().enumerate() {
        let g = pum_step_backward(&css[b], st, &DVector::zeros(st.u_out.len()), &mult_bar[b])?;
        gamma_bar += g.gamma;
        lambda_bar += g.lambda;
        w_bar.data[b] = g.weight;
    }
    block.barrier.backward(&w_bar)?;
    block.gamma_raw.grad[0] += gamma_bar * sigmoid(block.gamma_raw.value[0]);
    block.lambda.grad[0] += lambda_bar;
    loss += weight_penalty(&mut block.params_mut(), cfg.mu, idx.len());
    Ok(loss)
}

/// Batch loss of the auxiliary network, leaving its gradients in its parameters.
fn apm_batch_grad(model: &mut SlpDnetModel, stage: &Stage, x_all: &Tensor4, last: &[BlockState], idx: &[usize]) -> Result<f64> {
    let x = x_all.select(idx);
    let phis = gather(stage.phis, idx);
    let css = gather(&stage.css, idx);
    model.apm.zero_grad();
    let delta = model.apm_correction(&x, Mode::Train)?;
    let us: Vec<DVector<f64>> = idx.iter().zip(&delta).map(|(&i, d)| &last[i].u_out + d).collect();
    let mult: Vec<_> = idx.iter().enumerate().map(|(b, &i)| barrier_multipliers(&css[b], &us[b], last[i].rho, last[i].tau)).collect();
    let (mut loss, mult_bar) = multiplier_loss(model, &phis, &css, &mult)?;
    let sys = model.config.system;
    let (rows, cols) = (2 * sys.m, sys.k);
    let mut out_bar = Tensor4::zeros([idx.len(), 1, rows, cols]);
    for (b, &i) in idx.iter().enumerate() {
        let (u_bar, _, _) = barrier_multipliers_backward(&css[b], &us[b], last[i].rho, last[i].tau, &mult_bar[b]);
        for r in 0..rows {
            for c in 0..cols {
                let k = out_bar.idx(b, 0, r, c);
                out_bar.data[k] = u_bar[r] / cols as f64;
            }
        }
    }
    model.apm.backward(&out_bar)?;
    let mu = model.config.mu;
    loss += weight_penalty(&mut model.apm.params_mut(), mu, idx.len());
    Ok(loss)
}
