//! The unfolded network: PUM blocks followed by the auxiliary CNN.
//!
//! All learned parts operate on the problem normalized to unit
//! `sqrt(Gamma n0)`; constraints are homogeneous in (u, sqrt(Gamma n0)), so
//! physical precoders are the normalized ones scaled by `sqrt(Gamma n0)`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::pum::{barrier_multipliers, pum_step, BlockState};
use crate::channel_data::SystemConfig;
use crate::ci_core::{
    precoder_from_multipliers, robust_precoder_from_multipliers, sinr_rescale, squared_form_multipliers, ConstraintSet,
    Multipliers, Precoder, RobustGeometry, RobustSign,
};
use crate::error::{Error, Result};
use crate::nn::{
    softplus, softplus_inverse, AvgPool2d, BatchNorm2d, Checkpoint, Conv2d, KBitAct, Layer, Linear, Mode, PRelu, Param,
    QuantSlot, Sequential, Tensor4,
};
use crate::quantize::{compose_hybrid, QuantPlan, RowPartition, Scheme};

/// Hidden channels of the barrier sub-network's convolution.
pub const BARRIER_CHANNELS: usize = 20;
/// Channels of the two hidden APM convolutions.
pub const APM_CHANNELS: [usize; 2] = [16, 8];
const BN_EPS: f64 = 1e-6;
const BN_MOMENTUM: f64 = 0.1;
const PRELU_INIT: f64 = 0.25;
const GAMMA_INIT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub system: SystemConfig,
    pub blocks: usize,
    /// Unrolled Newton iterations inside each proximity correction.
    pub newton_steps: usize,
    /// Barrier extension point as a fraction of the block's barrier weight.
    pub kappa: f64,
    /// Weight of the l2 penalty on trainable parameters.
    pub mu: f64,
    pub activation_bits: u32,
    pub robust: bool,
    pub quant: Option<QuantPlan>,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            system: SystemConfig::default(),
            blocks: 2,
            newton_steps: 10,
            kappa: 0.01,
            mu: 1e-4,
            activation_bits: 2,
            robust: false,
            quant: None,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.system.validate()?;
        if self.blocks == 0 || self.newton_steps == 0 {
            return Err(Error::Config("blocks and newton_steps must be positive".into()));
        }
        if !(self.kappa > 0.0) || !(self.mu >= 0.0) {
            return Err(Error::Config(format!("kappa {} must be positive and mu {} non-negative", self.kappa, self.mu)));
        }
        if self.activation_bits == 0 || self.activation_bits > 16 {
            return Err(Error::Config(format!("activation bit width {} outside 1..=16", self.activation_bits)));
        }
        if let Some(p) = &self.quant {
            p.validate()?;
        }
        Ok(())
    }

    /// Whether any weights are quantized (a zero-ratio plan is full precision).
    pub fn quantized(&self) -> bool {
        self.quant.is_some_and(|p| p.ratio > 0.0)
    }

    pub fn variant(&self) -> Variant {
        match self.quant {
            Some(p) if p.ratio > 0.0 => match (p.scheme, p.ratio >= 1.0) {
                (Scheme::Binary, true) => Variant::Dbnet,
                (Scheme::Ternary, true) => Variant::Dtnet,
                (Scheme::Binary, false) => Variant::Dsqbnet,
                (Scheme::Ternary, false) => Variant::Dsqtnet,
            },
            _ => Variant::Dnet,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Dnet,
    Dbnet,
    Dtnet,
    Dsqbnet,
    Dsqtnet,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Dnet => "slp-dnet",
            Variant::Dbnet => "slp-dbnet",
            Variant::Dtnet => "slp-dtnet",
            Variant::Dsqbnet => "slp-dsqbnet",
            Variant::Dsqtnet => "slp-dsqtnet",
        }
    }
}

/// One unfolded iteration: learnable step size, offset and barrier sub-network.
#[derive(Debug, Clone, PartialEq)]
pub struct PumBlock {
    /// Pre-softplus step size.
    pub gamma_raw: Param,
    pub lambda: Param,
    pub barrier: Sequential,
}

impl PumBlock {
    fn new(system: &SystemConfig, rng: &mut ChaCha8Rng) -> Self {
        let (rows, cols) = (2 * system.m, system.k);
        let barrier = Sequential::new(vec![
            Layer::Conv(Conv2d::new(1, BARRIER_CHANNELS, 3, 1, 1, rng)),
            Layer::AvgPool(AvgPool2d::new(1, 1)),
            Layer::softplus(),
            Layer::flatten(),
            Layer::Linear(Linear::new(BARRIER_CHANNELS * rows * cols, 1, rng)),
            Layer::softplus(),
        ]);
        Self {
            gamma_raw: Param::new("gamma_raw", vec![1], vec![softplus_inverse(GAMMA_INIT)]),
            lambda: Param::new("lambda", vec![1], vec![0.0]),
            barrier,
        }
    }

    pub fn gamma(&self) -> f64 {
        softplus(self.gamma_raw.value[0])
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut p = vec![&mut self.gamma_raw, &mut self.lambda];
        p.extend(self.barrier.params_mut());
        p
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut p = vec![&self.gamma_raw, &self.lambda];
        p.extend(self.barrier.params());
        p
    }

    /// Positive barrier weights for a batch of channel images.
    pub fn weights(&mut self, x: &Tensor4, mode: Mode) -> Result<Vec<f64>> {
        Ok(self.barrier.forward(x, mode)?.data)
    }

    pub fn step(&self, cs: &ConstraintSet, u: &DVector<f64>, weight: f64, cfg: &ModelConfig) -> Result<BlockState> {
        pum_step(cs, u, self.gamma(), self.lambda.value[0], weight, cfg.kappa, cfg.newton_steps)
    }
}

/// Result of running the whole network on a batch, in normalized units.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final iterate after the APM correction.
    pub iterates: Vec<DVector<f64>>,
    /// Stacked barrier-form multipliers.
    pub multipliers: Vec<DVector<f64>>,
    /// State of the last block per sample.
    pub last_block: Vec<BlockState>,
}

/// One inference result in physical units.
#[derive(Debug, Clone, PartialEq)]
pub struct Inference {
    pub precoder: Precoder,
    pub multipliers: Multipliers,
    pub power: f64,
    /// Per-user constructive-interference margins (negative means violated).
    pub margins: DVector<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SlpDnetModel {
    pub config: ModelConfig,
    pub blocks: Vec<PumBlock>,
    pub apm: Sequential,
}

fn apm_activation(cfg: &ModelConfig) -> Layer {
    if cfg.quantized() {
        Layer::KBit(KBitAct::new(cfg.activation_bits))
    } else {
        Layer::PRelu(PRelu::new(PRELU_INIT))
    }
}

/// Layer positions of quantizable convolutions inside the APM.
const APM_QUANT_LAYERS: [usize; 2] = [0, 3];

impl SlpDnetModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let blocks = (0..config.blocks).map(|_| PumBlock::new(&config.system, &mut rng)).collect();
        let [c1, c2] = APM_CHANNELS;
        let mut last = Conv2d::new(c2, 1, 3, 1, 1, &mut rng);
        // the correction starts at zero so an untrained APM leaves the PUM output intact
        last.weight.value.iter_mut().for_each(|w| *w = 0.0);
        last.bias.value.iter_mut().for_each(|w| *w = 0.0);
        let apm = Sequential::new(vec![
            Layer::Conv(Conv2d::new(1, c1, 3, 1, 1, &mut rng)),
            Layer::BatchNorm(BatchNorm2d::new(c1, BN_EPS, BN_MOMENTUM)),
            apm_activation(&config),
            Layer::Conv(Conv2d::new(c1, c2, 3, 1, 1, &mut rng)),
            Layer::BatchNorm(BatchNorm2d::new(c2, BN_EPS, BN_MOMENTUM)),
            apm_activation(&config),
            Layer::Conv(last),
        ]);
        let mut model = Self { config, blocks, apm };
        model.draw_partitions();
        Ok(model)
    }

    /// Quantizable convolutions in a fixed order: each block's barrier
    /// convolution, then the first two APM convolutions.
    pub fn quantizable_convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut out = Vec::new();
        for b in &mut self.blocks {
            if let Layer::Conv(c) = &mut b.barrier.layers[0] {
                out.push(c);
            }
        }
        for (i, l) in self.apm.layers.iter_mut().enumerate() {
            if let (true, Layer::Conv(c)) = (APM_QUANT_LAYERS.contains(&i), l) {
                out.push(c);
            }
        }
        out
    }

    pub fn quantizable_convs(&self) -> Vec<&Conv2d> {
        let mut out = Vec::new();
        for b in &self.blocks {
            if let Layer::Conv(c) = &b.barrier.layers[0] {
                out.push(c);
            }
        }
        for (i, l) in self.apm.layers.iter().enumerate() {
            if let (true, Layer::Conv(c)) = (APM_QUANT_LAYERS.contains(&i), l) {
                out.push(c);
            }
        }
        out
    }

    /// Draws the row partition of every quantizable layer from its current
    /// latent weights. Each layer has its own stream derived from the plan seed.
    pub fn draw_partitions(&mut self) {
        let Some(plan) = self.config.quant.filter(|p| p.ratio > 0.0) else {
            self.quantizable_convs_mut().into_iter().for_each(|c| c.quant = None);
            return;
        };
        for (i, conv) in self.quantizable_convs_mut().into_iter().enumerate() {
            let latent = conv.weight_matrix();
            let mut rng = ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(i as u64));
            let hybrid = compose_hybrid(&latent, &plan, &mut rng);
            conv.quant = Some(QuantSlot { scheme: plan.scheme, partition: hybrid.partition });
        }
    }

    pub fn partitions(&self) -> Vec<Option<RowPartition>> {
        self.quantizable_convs().into_iter().map(|c| c.quant.as_ref().map(|q| q.partition.clone())).collect()
    }

    pub fn geometry(&self) -> RobustGeometry {
        RobustGeometry::new(self.config.system.m, self.config.system.theta())
    }

    fn error_bound(&self) -> f64 {
        if self.config.robust {
            self.config.system.csi_error_bound
        } else {
            0.0
        }
    }

    /// Constraint set with unit SINR target and unit noise.
    pub fn normalized_constraints(&self, phi: &DMatrix<f64>) -> ConstraintSet {
        let sys = &self.config.system;
        let ones = vec![1.0; sys.k];
        ConstraintSet::robust(phi, &ones, 1.0, sys.theta(), self.error_bound(), RobustSign::Corrected)
    }

    /// u0 = Phi 1 / ||Phi 1||^2 in normalized units.
    pub fn initial_precoder(phi: &DMatrix<f64>) -> DVector<f64> {
        let s = phi.column_sum();
        let n = s.norm_squared();
        if n > 0.0 {
            s / n
        } else {
            s
        }
    }

    pub fn check_input(&self, phi: &DMatrix<f64>) -> Result<()> {
        let sys = &self.config.system;
        if phi.nrows() != 2 * sys.m || phi.ncols() != sys.k {
            return Err(Error::Dimension(format!(
                "channel is {}x{}, model expects {}x{}",
                phi.nrows(),
                phi.ncols(),
                2 * sys.m,
                sys.k
            )));
        }
        Ok(())
    }

    /// (B, 1, 2M, K) image of the channel matrices.
    pub fn input_tensor(&self, phis: &[DMatrix<f64>]) -> Result<Tensor4> {
        let sys = &self.config.system;
        let (rows, cols) = (2 * sys.m, sys.k);
        let mut data = Vec::with_capacity(phis.len() * rows * cols);
        for p in phis {
            self.check_input(p)?;
            for r in 0..rows {
                for c in 0..cols {
                    data.push(p[(r, c)]);
                }
            }
        }
        Tensor4::from_vec(data, [phis.len(), 1, rows, cols])
    }

    /// Runs blocks `0..upto` from the initial precoder.
    pub fn run_blocks(&mut self, phis: &[DMatrix<f64>], x: &Tensor4, upto: usize, mode: Mode) -> Result<Vec<BlockState>> {
        let cfg = self.config;
        let cs: Vec<_> = phis.iter().map(|p| self.normalized_constraints(p)).collect();
        let mut u: Vec<_> = phis.iter().map(Self::initial_precoder).collect();
        let mut states = Vec::new();
        for block in self.blocks.iter_mut().take(upto) {
            let w = block.weights(x, mode)?;
            states = (0..phis.len()).map(|i| block.step(&cs[i], &u[i], w[i], &cfg)).collect::<Result<Vec<_>>>()?;
            u = states.iter().map(|s| s.u_out.clone()).collect();
        }
        Ok(states)
    }

    /// Mean over the K columns of the APM output, one correction per sample.
    pub fn apm_correction(&mut self, x: &Tensor4, mode: Mode) -> Result<Vec<DVector<f64>>> {
        let out = self.apm.forward(x, mode)?;
        let [b, _, rows, cols] = out.shape;
        Ok((0..b)
            .map(|i| DVector::from_fn(rows, |r, _| (0..cols).map(|c| out.data[out.idx(i, 0, r, c)]).sum::<f64>() / cols as f64))
            .collect())
    }

    pub fn forward(&mut self, phis: &[DMatrix<f64>], mode: Mode) -> Result<ForwardOutput> {
        let x = self.input_tensor(phis)?;
        let last_block = self.run_blocks(phis, &x, self.blocks.len(), mode)?;
        let delta = self.apm_correction(&x, mode)?;
        let mut iterates = Vec::with_capacity(phis.len());
        let mut multipliers = Vec::with_capacity(phis.len());
        for (i, st) in last_block.iter().enumerate() {
            let u = &st.u_out + &delta[i];
            let cs = self.normalized_constraints(&phis[i]);
            multipliers.push(barrier_multipliers(&cs, &u, st.rho, st.tau));
            iterates.push(u);
        }
        Ok(ForwardOutput { iterates, multipliers, last_block })
    }

    /// Feasible precoder for each channel at SINR target `gamma` (linear): the
    /// lower-power of the multiplier closed form and the final iterate, each
    /// rescaled onto the constraint boundary.
    pub fn infer_batch(&mut self, phis: &[DMatrix<f64>], gamma: f64) -> Result<Vec<Inference>> {
        let out = self.forward(phis, Mode::Eval)?;
        let sys = self.config.system;
        let c = (gamma * sys.n0).sqrt();
        let bound = self.error_bound();
        let mut res = Vec::with_capacity(phis.len());
        for (i, phi) in phis.iter().enumerate() {
            let cs = self.normalized_constraints(phi);
            let mult = Multipliers::from_stacked(&out.multipliers[i])?;
            let u = if bound > 0.0 {
                let sq = squared_form_multipliers(&cs, &out.iterates[i], &out.multipliers[i])?;
                let ones = vec![1.0; sys.k];
                robust_precoder_from_multipliers(phi, &sq, &self.geometry(), &ones, 1.0, sys.theta(), bound)?.into_inner()
            } else {
                precoder_from_multipliers(phi, &mult, sys.theta()).into_inner()
            };
            // the closed form can be far off on ill-conditioned channels where the iterate is not
            let candidates = [sinr_rescale(&cs, &u), sinr_rescale(&cs, &out.iterates[i])];
            let u = candidates
                .into_iter()
                .flatten()
                .min_by(|a, b| a.norm_squared().total_cmp(&b.norm_squared()))
                .unwrap_or(u)
                * c;
            let margins = cs.scaled_rhs(1.0 / c).user_margins(&u);
            let precoder = Precoder::new(u);
            res.push(Inference { power: precoder.power(), precoder, multipliers: mult.scaled(c), margins });
        }
        Ok(res)
    }

    pub fn infer(&mut self, phi: &DMatrix<f64>, gamma: f64) -> Result<Inference> {
        Ok(self.infer_batch(std::slice::from_ref(phi), gamma)?.remove(0))
    }

    pub fn param_count(&self) -> usize {
        self.blocks.iter().flat_map(|b| b.params()).chain(self.apm.params()).map(|p| p.value.len()).sum()
    }

    fn manifest(&self) -> serde_json::Value {
        let layers = |s: &Sequential| -> Vec<serde_json::Value> {
            s.layers
                .iter()
                .map(|l| {
                    let shapes: Vec<_> = l.params().iter().map(|p| p.shape.clone()).collect();
                    serde_json::json!({"kind": l.kind(), "param_shapes": shapes})
                })
                .collect()
        };
        serde_json::json!({
            "config": self.config,
            "variant": self.config.variant().name(),
            "blocks": self.blocks.iter().map(|b| layers(&b.barrier)).collect::<Vec<_>>(),
            "apm": layers(&self.apm),
        })
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut tensors = Vec::new();
        for (l, b) in self.blocks.iter().enumerate() {
            tensors.push((format!("block{l}.gamma_raw"), vec![1], b.gamma_raw.value.clone()));
            tensors.push((format!("block{l}.lambda"), vec![1], b.lambda.value.clone()));
            tensors.extend(b.barrier.named_state(&format!("block{l}.barrier")));
        }
        tensors.extend(self.apm.named_state("apm"));
        let quant = match self.config.quant {
            Some(plan) => serde_json::json!({"plan": plan, "partitions": self.partitions()}),
            None => serde_json::Value::Null,
        };
        Checkpoint::new(self.manifest(), quant, tensors)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(ck.header.manifest["config"].clone())?;
        let mut model = Self::new(config)?;
        let lookup = |k: &str| ck.get(k).map(|v| v.to_vec());
        for (l, b) in model.blocks.iter_mut().enumerate() {
            for (name, p) in [("gamma_raw", &mut b.gamma_raw), ("lambda", &mut b.lambda)] {
                let key = format!("block{l}.{name}");
                p.value = lookup(&key).filter(|v| v.len() == 1).ok_or_else(|| Error::Format(format!("checkpoint is missing {key}")))?;
            }
            b.barrier.load_named_state(&format!("block{l}.barrier"), &lookup)?;
        }
        model.apm.load_named_state("apm", &lookup)?;
        if config.quant.is_some() {
            let parts: Vec<Option<RowPartition>> = serde_json::from_value(ck.header.quant["partitions"].clone())?;
            let scheme = config.quant.map(|p| p.scheme).expect("checked above");
            let convs = model.quantizable_convs_mut();
            if parts.len() != convs.len() {
                return Err(Error::Format(format!("checkpoint has {} partitions for {} layers", parts.len(), convs.len())));
            }
            for (conv, part) in convs.into_iter().zip(parts) {
                conv.quant = part.map(|partition| QuantSlot { scheme, partition });
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_data::build_dataset;

    fn phis(n: usize, seed: u64) -> Vec<DMatrix<f64>> {
        build_dataset(&SystemConfig::default(), n, seed, (0.0, 45.0)).unwrap().samples.into_iter().map(|s| s.phi).collect()
    }

    #[test]
    fn shapes_and_determinism() {
        let mut model = SlpDnetModel::new(ModelConfig::default()).unwrap();
        let p = phis(5, 1);
        let d = model.apm_correction(&model.input_tensor(&p).unwrap(), Mode::Eval).unwrap();
        assert_eq!(d.len(), 5);
        assert!(d.iter().all(|v| v.len() == 8 && v.iter().all(|&x| x == 0.0)));
        let a = model.infer_batch(&p, 10.0).unwrap();
        let b = model.infer_batch(&p, 10.0).unwrap();
        assert_eq!(a, b);
        for inf in &a {
            assert!(inf.multipliers.v1.iter().chain(inf.multipliers.v2.iter()).all(|&m| m >= 0.0));
            assert!(inf.margins.iter().all(|&m| m >= -1e-9), "{}", inf.margins);
        }
        let bad = vec![DMatrix::zeros(6, 4)];
        assert!(matches!(model.infer_batch(&bad, 1.0), Err(Error::Dimension(_))));
    }

    #[test]
    fn power_scales_with_target() {
        let mut model = SlpDnetModel::new(ModelConfig::default()).unwrap();
        let p = phis(3, 2);
        let a = model.infer_batch(&p, 1.0).unwrap();
        let b = model.infer_batch(&p, 1000.0).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y.power / x.power - 1000.0).abs() < 1e-9);
        }
    }

    #[test]
    fn variants_and_partitions() {
        let mut cfg = ModelConfig::default();
        assert_eq!(cfg.variant(), Variant::Dnet);
        cfg.quant = Some(QuantPlan::new(Scheme::Binary, 1.0, 3));
        let m = SlpDnetModel::new(cfg).unwrap();
        assert_eq!(cfg.variant(), Variant::Dbnet);
        for part in m.partitions() {
            let part = part.unwrap();
            assert_eq!(part.q_idx.len(), part.n);
        }
        cfg.quant = Some(QuantPlan::new(Scheme::Ternary, 0.5, 3));
        assert_eq!(cfg.variant(), Variant::Dsqtnet);
        let m = SlpDnetModel::new(cfg).unwrap();
        let sizes: Vec<_> = m.partitions().into_iter().map(|p| p.unwrap().q_idx.len()).collect();
        assert_eq!(sizes, vec![10, 10, 8, 4]);
        cfg.quant = Some(QuantPlan::new(Scheme::Ternary, 0.0, 3));
        let zero = SlpDnetModel::new(cfg).unwrap();
        cfg.quant = None;
        let none = SlpDnetModel::new(cfg).unwrap();
        assert_eq!(zero.blocks, none.blocks);
        assert_eq!(zero.apm, none.apm);
    }

    #[test]
    fn quantized_apm_activations_take_few_levels() {
        let cfg = ModelConfig { quant: Some(QuantPlan::new(Scheme::Binary, 0.5, 1)), ..ModelConfig::default() };
        let mut m = SlpDnetModel::new(cfg).unwrap();
        let x = m.input_tensor(&phis(6, 3)).unwrap();
        let mut h = x.clone();
        for (i, l) in m.apm.layers.iter_mut().enumerate() {
            h = l.forward(&h, Mode::Train).unwrap();
            if l.kind() == "kbit" {
                let mut v: Vec<u64> = h.data.iter().map(|x| x.to_bits()).collect();
                v.sort();
                v.dedup();
                assert!(v.len() <= 4, "layer {i} has {} levels", v.len());
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let cfg = ModelConfig { quant: Some(QuantPlan::new(Scheme::Ternary, 0.5, 4)), robust: true, ..ModelConfig::default() };
        let mut m = SlpDnetModel::new(cfg).unwrap();
        let p = phis(4, 5);
        m.forward(&p, Mode::Train).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        m.save(&path).unwrap();
        let mut back = SlpDnetModel::load(&path).unwrap();
        assert_eq!(back.to_checkpoint().to_bytes().unwrap(), m.to_checkpoint().to_bytes().unwrap());
        assert_eq!(back.partitions(), m.partitions());
        let a = m.forward(&p, Mode::Eval).unwrap();
        let b = back.forward(&p, Mode::Eval).unwrap();
        assert_eq!(a.iterates, b.iterates);
    }

    #[test]
    fn robust_inference_is_feasible() {
        let mut cfg = ModelConfig { robust: true, ..ModelConfig::default() };
        cfg.system.csi_error_bound = 1e-3;
        let mut m = SlpDnetModel::new(cfg).unwrap();
        let p = phis(8, 6);
        let out = m.forward(&p, Mode::Eval).unwrap();
        for (i, inf) in m.infer_batch(&p, 100.0).unwrap().iter().enumerate() {
            assert!(inf.power.is_finite());
            if sinr_rescale(&m.normalized_constraints(&p[i]), &out.iterates[i]).is_some() {
                assert!(inf.margins.iter().all(|&x| x >= -1e-6), "{}", inf.margins);
            }
        }
    }

    #[test]
    fn inference_keeps_the_cheaper_feasible_candidate() {
        let mut m = SlpDnetModel::new(ModelConfig::default()).unwrap();
        let p = phis(12, 8);
        let gamma = 50.0;
        let out = m.forward(&p, Mode::Eval).unwrap();
        for (i, inf) in m.infer_batch(&p, gamma).unwrap().iter().enumerate() {
            let cs = m.normalized_constraints(&p[i]);
            let mult = Multipliers::from_stacked(&out.multipliers[i]).unwrap();
            let closed = precoder_from_multipliers(&p[i], &mult, m.config.system.theta()).into_inner();
            let costs: Vec<f64> = [closed, out.iterates[i].clone()]
                .iter()
                .filter_map(|u| sinr_rescale(&cs, u))
                .map(|u| gamma * u.norm_squared())
                .collect();
            assert!(!costs.is_empty());
            let best = costs.iter().copied().fold(f64::INFINITY, f64::min);
            assert!((inf.power - best).abs() <= 1e-9 * best, "{} vs {best}", inf.power);
            assert!(inf.margins.iter().all(|&x| x >= -1e-6));
        }
    }
}
