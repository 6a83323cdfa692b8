//! Layers with cached forward state and exact reverse-mode gradients.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::Tensor4;
use crate::error::{Error, Result};
use crate::quantize::{quantize_activation, quantize_row, RowPartition, Scheme};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A learnable tensor and its accumulated gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, value: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let grad = vec![0.0; value.len()];
        Self { name: name.into(), shape, value, grad }
    }

    pub fn uniform<R: Rng + ?Sized>(name: &str, shape: Vec<usize>, bound: f64, rng: &mut R) -> Self {
        let n = shape.iter().product();
        let value = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
        Self::new(name, shape, value)
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }

    pub fn sq_norm(&self) -> f64 {
        self.value.iter().map(|v| v * v).sum()
    }
}

/// Which rows of a weight are replaced by their quantized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantSlot {
    pub scheme: Scheme,
    pub partition: RowPartition,
}

fn missing_forward(layer: &str) -> Error {
    Error::State(format!("{layer}: backward called without a recorded forward pass"))
}

fn expect_channels(layer: &str, x: &Tensor4, c: usize) -> Result<()> {
    if x.shape[1] != c {
        return Err(Error::Dimension(format!("{layer} expects {c} input channels, got shape {:?}", x.shape)));
    }
    Ok(())
}

/// 2-D cross-correlation with zero padding and dilation.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub padding: usize,
    pub dilation: usize,
    pub weight: Param,
    pub bias: Param,
    pub quant: Option<QuantSlot>,
    effective: Vec<f64>,
    cache: Option<Tensor4>,
}

impl Conv2d {
    pub fn new<R: Rng + ?Sized>(in_ch: usize, out_ch: usize, kernel: usize, padding: usize, dilation: usize, rng: &mut R) -> Self {
        let fan_in = (in_ch * kernel * kernel) as f64;
        let weight = Param::uniform("weight", vec![out_ch, in_ch, kernel, kernel], (6.0 / fan_in).sqrt(), rng);
        let bias = Param::uniform("bias", vec![out_ch], 1.0 / fan_in.sqrt(), rng);
        let effective = weight.value.clone();
        Self { in_ch, out_ch, kernel, padding, dilation, weight, bias, quant: None, effective, cache: None }
    }

    pub fn row_len(&self) -> usize {
        self.in_ch * self.kernel * self.kernel
    }

    /// Weight as an (out_ch x row_len) row-major matrix.
    pub fn weight_matrix(&self) -> nalgebra::DMatrix<f64> {
        nalgebra::DMatrix::from_row_slice(self.out_ch, self.row_len(), &self.weight.value)
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let span = self.dilation * (self.kernel - 1);
        ((h + 2 * self.padding).saturating_sub(span), (w + 2 * self.padding).saturating_sub(span))
    }

    /// Weights actually used in the forward pass.
    pub fn effective_weight(&self) -> Vec<f64> {
        let mut eff = self.weight.value.clone();
        if let Some(slot) = &self.quant {
            let len = self.row_len();
            for &r in &slot.partition.q_idx {
                let (q, _) = quantize_row(slot.scheme, &self.weight.value[r * len..(r + 1) * len]);
                eff[r * len..(r + 1) * len].copy_from_slice(&q);
            }
        }
        eff
    }

    pub fn forward(&mut self, x: &Tensor4, _mode: Mode) -> Result<Tensor4> {
        expect_channels("conv", x, self.in_ch)?;
        self.effective = self.effective_weight();
        let [n, _, h, w] = x.shape;
        let (oh, ow) = self.out_dims(h, w);
        let mut out = Tensor4::zeros([n, self.out_ch, oh, ow]);
        let k = self.kernel;
        for b in 0..n {
            for o in 0..self.out_ch {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = self.bias.value[o];
                        for c in 0..self.in_ch {
                            for ky in 0..k {
                                let iy = (y + ky * self.dilation) as isize - self.padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (xo + kx * self.dilation) as isize - self.padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    acc += self.effective[((o * self.in_ch + c) * k + ky) * k + kx]
                                        * x.data[x.idx(b, c, iy as usize, ix as usize)];
                                }
                            }
                        }
                        let i = out.idx(b, o, y, xo);
                        out.data[i] = acc;
                    }
                }
            }
        }
        self.cache = Some(x.clone());
        Ok(out)
    }

    /// Weight gradients go to the latent weights unchanged (straight-through).
    pub fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        let x = self.cache.take().ok_or_else(|| missing_forward("conv"))?;
        let [n, _, h, w] = x.shape;
        let [_, _, oh, ow] = grad.shape;
        let k = self.kernel;
        let mut gx = Tensor4::zeros(x.shape);
        for b in 0..n {
            for o in 0..self.out_ch {
                for y in 0..oh {
                    for xo in 0..ow {
                        let g = grad.data[grad.idx(b, o, y, xo)];
                        if g == 0.0 {
                            continue;
                        }
                        self.bias.grad[o] += g;
                        for c in 0..self.in_ch {
                            for ky in 0..k {
                                let iy = (y + ky * self.dilation) as isize - self.padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..k {
                                    let ix = (xo + kx * self.dilation) as isize - self.padding as isize;
                                    if ix < 0 || ix >= w as isize {
                                        continue;
                                    }
                                    let wi = ((o * self.in_ch + c) * k + ky) * k + kx;
                                    let xi = x.idx(b, c, iy as usize, ix as usize);
                                    self.weight.grad[wi] += g * x.data[xi];
                                    gx.data[xi] += g * self.effective[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}

/// Per-channel batch normalization with running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
    pub scale: Param,
    pub shift: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone, PartialEq)]
struct BnCache {
    xhat: Tensor4,
    inv_std: Vec<f64>,
    train: bool,
}

impl BatchNorm2d {
    pub fn new(channels: usize, eps: f64, momentum: f64) -> Self {
        Self {
            channels,
            eps,
            momentum,
            scale: Param::new("scale", vec![channels], vec![1.0; channels]),
            shift: Param::new("shift", vec![channels], vec![0.0; channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        expect_channels("batchnorm", x, self.channels)?;
        let [n, c, h, w] = x.shape;
        let count = (n * h * w) as f64;
        let mut out = Tensor4::zeros(x.shape);
        let mut xhat = Tensor4::zeros(x.shape);
        let mut inv_std = vec![0.0; c];
        for ch in 0..c {
            let values = (0..n).flat_map(|b| (0..h * w).map(move |s| (b, s)));
            let (mean, var) = match mode {
                Mode::Train => {
                    let mean = values.clone().map(|(b, s)| x.data[x.idx(b, ch, 0, 0) + s]).sum::<f64>() / count;
                    let var = values.clone().map(|(b, s)| (x.data[x.idx(b, ch, 0, 0) + s] - mean).powi(2)).sum::<f64>() / count;
                    let unbiased = if count > 1.0 { var * count / (count - 1.0) } else { var };
                    self.running_mean[ch] = (1.0 - self.momentum) * self.running_mean[ch] + self.momentum * mean;
                    self.running_var[ch] = (1.0 - self.momentum) * self.running_var[ch] + self.momentum * unbiased;
                    (mean, var)
                }
                Mode::Eval => (self.running_mean[ch], self.running_var[ch]),
            };
            let is = 1.0 / (var + self.eps).sqrt();
            inv_std[ch] = is;
            for (b, s) in values {
                let i = x.idx(b, ch, 0, 0) + s;
                let xh = (x.data[i] - mean) * is;
                xhat.data[i] = xh;
                out.data[i] = self.scale.value[ch] * xh + self.shift.value[ch];
            }
        }
        self.cache = Some(BnCache { xhat, inv_std, train: mode == Mode::Train });
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        let BnCache { xhat, inv_std, train } = self.cache.take().ok_or_else(|| missing_forward("batchnorm"))?;
        let [n, c, h, w] = grad.shape;
        let count = (n * h * w) as f64;
        let mut gx = Tensor4::zeros(grad.shape);
        for ch in 0..c {
            let idx: Vec<usize> = (0..n).flat_map(|b| (0..h * w).map(move |s| (b, s))).map(|(b, s)| grad.idx(b, ch, 0, 0) + s).collect();
            let mut sum_g = 0.0;
            let mut sum_gx = 0.0;
            for &i in &idx {
                sum_g += grad.data[i];
                sum_gx += grad.data[i] * xhat.data[i];
            }
            self.shift.grad[ch] += sum_g;
            self.scale.grad[ch] += sum_gx;
            let gamma = self.scale.value[ch];
            for &i in &idx {
                gx.data[i] = if train {
                    gamma * inv_std[ch] * (grad.data[i] - sum_g / count - xhat.data[i] * sum_gx / count)
                } else {
                    gamma * inv_std[ch] * grad.data[i]
                };
            }
        }
        Ok(gx)
    }
}

/// max(0, x) + a min(0, x) with one shared learnable slope.
#[derive(Debug, Clone, PartialEq)]
pub struct PRelu {
    pub slope: Param,
    cache: Option<Tensor4>,
}

impl PRelu {
    pub fn new(init: f64) -> Self {
        Self { slope: Param::new("slope", vec![1], vec![init]), cache: None }
    }

    pub fn forward(&mut self, x: &Tensor4) -> Tensor4 {
        let a = self.slope.value[0];
        self.cache = Some(x.clone());
        x.map(|v| if v > 0.0 { v } else { a * v })
    }

    pub fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        let x = self.cache.take().ok_or_else(|| missing_forward("prelu"))?;
        let a = self.slope.value[0];
        let mut gx = grad.clone();
        for (i, g) in gx.data.iter_mut().enumerate() {
            if x.data[i] <= 0.0 {
                self.slope.grad[0] += *g * x.data[i];
                *g *= a;
            }
        }
        Ok(gx)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Inverse of softplus for positive arguments.
pub fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

/// Average pooling without padding.
#[derive(Debug, Clone, PartialEq)]
pub struct AvgPool2d {
    pub kernel: usize,
    pub stride: usize,
    input_shape: Option<[usize; 4]>,
}

impl AvgPool2d {
    pub fn new(kernel: usize, stride: usize) -> Self {
        Self { kernel, stride, input_shape: None }
    }

    fn out_dims(&self, h: usize, w: usize) -> (usize, usize) {
        ((h - self.kernel) / self.stride + 1, (w - self.kernel) / self.stride + 1)
    }

    pub fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        let [n, c, h, w] = x.shape;
        if h < self.kernel || w < self.kernel {
            return Err(Error::Dimension(format!("pool kernel {} larger than input {h}x{w}", self.kernel)));
        }
        let (oh, ow) = self.out_dims(h, w);
        let norm = (self.kernel * self.kernel) as f64;
        let mut out = Tensor4::zeros([n, c, oh, ow]);
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut s = 0.0;
                        for ky in 0..self.kernel {
                            for kx in 0..self.kernel {
                                s += x.data[x.idx(b, ch, y * self.stride + ky, xo * self.stride + kx)];
                            }
                        }
                        let i = out.idx(b, ch, y, xo);
                        out.data[i] = s / norm;
                    }
                }
            }
        }
        self.input_shape = Some(x.shape);
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        let shape = self.input_shape.take().ok_or_else(|| missing_forward("avgpool"))?;
        let mut gx = Tensor4::zeros(shape);
        let [n, c, oh, ow] = grad.shape;
        let norm = (self.kernel * self.kernel) as f64;
        for b in 0..n {
            for ch in 0..c {
                for y in 0..oh {
                    for xo in 0..ow {
                        let g = grad.data[grad.idx(b, ch, y, xo)] / norm;
                        for ky in 0..self.kernel {
                            for kx in 0..self.kernel {
                                let i = gx.idx(b, ch, y * self.stride + ky, xo * self.stride + kx);
                                gx.data[i] += g;
                            }
                        }
                    }
                }
            }
        }
        Ok(gx)
    }
}

/// Affine map on flattened features: (N, F, 1, 1) -> (N, out, 1, 1).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor4>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let fan_in = in_features as f64;
        Self {
            in_features,
            out_features,
            weight: Param::uniform("weight", vec![out_features, in_features], (6.0 / fan_in).sqrt(), rng),
            bias: Param::uniform("bias", vec![out_features], 1.0 / fan_in.sqrt(), rng),
            cache: None,
        }
    }

    pub fn forward(&mut self, x: &Tensor4) -> Result<Tensor4> {
        if x.stride() != self.in_features {
            return Err(Error::Dimension(format!("linear expects {} features, got shape {:?}", self.in_features, x.shape)));
        }
        let n = x.batch();
        let mut out = Tensor4::zeros([n, self.out_features, 1, 1]);
        for b in 0..n {
            let xs = x.sample(b);
            for o in 0..self.out_features {
                let row = &self.weight.value[o * self.in_features..(o + 1) * self.in_features];
                out.data[b * self.out_features + o] = self.bias.value[o] + row.iter().zip(xs).map(|(w, v)| w * v).sum::<f64>();
            }
        }
        self.cache = Some(x.clone());
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        let x = self.cache.take().ok_or_else(|| missing_forward("linear"))?;
        let mut gx = Tensor4::zeros(x.shape);
        let f = self.in_features;
        for b in 0..x.batch() {
            for o in 0..self.out_features {
                let g = grad.data[b * self.out_features + o];
                self.bias.grad[o] += g;
                for i in 0..f {
                    self.weight.grad[o * f + i] += g * x.data[b * f + i];
                    gx.data[b * f + i] += g * self.weight.value[o * f + i];
                }
            }
        }
        Ok(gx)
    }
}

/// k-bit uniform activation quantizer with running min/max bounds.
#[derive(Debug, Clone, PartialEq)]
pub struct KBitAct {
    pub bits: u32,
    /// Weight of the old bound in the running update.
    pub momentum: f64,
    pub bounds: Option<(f64, f64)>,
    cache: Option<(Tensor4, (f64, f64))>,
}

impl KBitAct {
    pub fn new(bits: u32) -> Self {
        Self { bits, momentum: 0.9, bounds: None, cache: None }
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Tensor4 {
        if mode == Mode::Train || self.bounds.is_none() {
            let lo = x.data.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = x.data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            self.bounds = Some(match self.bounds {
                Some((l, h)) if mode == Mode::Train => {
                    (self.momentum * l + (1.0 - self.momentum) * lo, self.momentum * h + (1.0 - self.momentum) * hi)
                }
                _ => (lo, hi),
            });
        }
        let bounds = self.bounds.expect("set above");
        self.cache = Some((x.clone(), bounds));
        Tensor4 { data: quantize_activation(&x.data, self.bits, bounds), shape: x.shape }
    }

    pub fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        let (x, bounds) = self.cache.take().ok_or_else(|| missing_forward("kbit"))?;
        Ok(Tensor4 { data: crate::quantize::ste_backward_activation(&grad.data, &x.data, bounds), shape: grad.shape })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv(Conv2d),
    BatchNorm(BatchNorm2d),
    PRelu(PRelu),
    Softplus { cache: Option<Tensor4> },
    AvgPool(AvgPool2d),
    Flatten { input_shape: Option<[usize; 4]> },
    Linear(Linear),
    KBit(KBitAct),
}

impl Layer {
    pub fn softplus() -> Self {
        Layer::Softplus { cache: None }
    }

    pub fn flatten() -> Self {
        Layer::Flatten { input_shape: None }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Conv(_) => "conv",
            Layer::BatchNorm(_) => "batchnorm",
            Layer::PRelu(_) => "prelu",
            Layer::Softplus { .. } => "softplus",
            Layer::AvgPool(_) => "avgpool",
            Layer::Flatten { .. } => "flatten",
            Layer::Linear(_) => "linear",
            Layer::KBit(_) => "kbit",
        }
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        let out = match self {
            Layer::Conv(l) => l.forward(x, mode)?,
            Layer::BatchNorm(l) => l.forward(x, mode)?,
            Layer::PRelu(l) => l.forward(x),
            Layer::Softplus { cache } => {
                *cache = Some(x.clone());
                x.map(softplus)
            }
            Layer::AvgPool(l) => l.forward(x)?,
            Layer::Flatten { input_shape } => {
                *input_shape = Some(x.shape);
                x.clone().reshape([x.batch(), x.stride(), 1, 1])?
            }
            Layer::Linear(l) => l.forward(x)?,
            Layer::KBit(l) => l.forward(x, mode),
        };
        out.debug_check_finite();
        Ok(out)
    }

    pub fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        match self {
            Layer::Conv(l) => l.backward(grad),
            Layer::BatchNorm(l) => l.backward(grad),
            Layer::PRelu(l) => l.backward(grad),
            Layer::Softplus { cache } => {
                let x = cache.take().ok_or_else(|| missing_forward("softplus"))?;
                Ok(Tensor4 { data: grad.data.iter().zip(&x.data).map(|(g, v)| g * sigmoid(*v)).collect(), shape: grad.shape })
            }
            Layer::AvgPool(l) => l.backward(grad),
            Layer::Flatten { input_shape } => {
                let shape = input_shape.take().ok_or_else(|| missing_forward("flatten"))?;
                grad.clone().reshape(shape)
            }
            Layer::Linear(l) => l.backward(grad),
            Layer::KBit(l) => l.backward(grad),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm(l) => vec![&mut l.scale, &mut l.shift],
            Layer::PRelu(l) => vec![&mut l.slope],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => vec![],
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm(l) => vec![&l.scale, &l.shift],
            Layer::PRelu(l) => vec![&l.slope],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => vec![],
        }
    }

    /// Non-learned state that must survive a checkpoint.
    pub fn buffers(&self) -> Vec<(&'static str, Vec<f64>)> {
        match self {
            Layer::BatchNorm(l) => vec![("running_mean", l.running_mean.clone()), ("running_var", l.running_var.clone())],
            Layer::KBit(l) => match l.bounds {
                Some((lo, hi)) => vec![("bounds", vec![lo, hi])],
                None => vec![("bounds", vec![])],
            },
            _ => vec![],
        }
    }

    pub fn set_buffer(&mut self, name: &str, values: &[f64]) -> Result<()> {
        match (self, name) {
            (Layer::BatchNorm(l), "running_mean") if values.len() == l.channels => l.running_mean = values.to_vec(),
            (Layer::BatchNorm(l), "running_var") if values.len() == l.channels => l.running_var = values.to_vec(),
            (Layer::KBit(l), "bounds") => {
                l.bounds = match values {
                    [lo, hi] => Some((*lo, *hi)),
                    [] => None,
                    _ => return Err(Error::Format("k-bit bounds need two values".into())),
                }
            }
            (layer, _) => return Err(Error::Format(format!("layer {} has no buffer {name} of that size", layer.kind()))),
        }
        Ok(())
    }
}

/// A fixed chain of layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&mut self, x: &Tensor4, mode: Mode) -> Result<Tensor4> {
        let mut h = x.clone();
        for l in &mut self.layers {
            h = l.forward(&h, mode)?;
        }
        Ok(h)
    }

    pub fn backward(&mut self, grad: &Tensor4) -> Result<Tensor4> {
        let mut g = grad.clone();
        for l in self.layers.iter_mut().rev() {
            g = l.backward(&g)?;
        }
        Ok(g)
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    /// Named tensors: parameters then buffers, prefixed by layer position.
    pub fn named_state(&self, prefix: &str) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            for p in l.params() {
                out.push((format!("{prefix}.{i}.{}.{}", l.kind(), p.name), p.shape.clone(), p.value.clone()));
            }
            for (name, v) in l.buffers() {
                out.push((format!("{prefix}.{i}.{}.{name}", l.kind()), vec![v.len()], v));
            }
        }
        out
    }

    pub fn load_named_state(&mut self, prefix: &str, lookup: &dyn Fn(&str) -> Option<Vec<f64>>) -> Result<()> {
        for (i, l) in self.layers.iter_mut().enumerate() {
            let kind = l.kind();
            for p in l.params_mut() {
                let key = format!("{prefix}.{i}.{kind}.{}", p.name);
                let v = lookup(&key).ok_or_else(|| Error::Format(format!("checkpoint is missing {key}")))?;
                if v.len() != p.value.len() {
                    return Err(Error::Dimension(format!("{key} has {} values, expected {}", v.len(), p.value.len())));
                }
                p.value = v;
            }
            let names: Vec<&'static str> = l.buffers().into_iter().map(|(n, _)| n).collect();
            for name in names {
                let key = format!("{prefix}.{i}.{kind}.{name}");
                let v = lookup(&key).ok_or_else(|| Error::Format(format!("checkpoint is missing {key}")))?;
                l.set_buffer(name, &v)?;
            }
        }
        Ok(())
    }
}
