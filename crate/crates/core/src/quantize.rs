//! Binary and ternary weight quantization, error-driven row selection by a
//! circular lottery, hybrid weights, and k-bit activation quantization.

use std::collections::BTreeSet;

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Offset keeping 1/(e + offset) finite for error-free rows.
pub const PROB_OFFSET: f64 = 1e-6;
/// Ternary threshold as a fraction of the mean magnitude.
pub const TERNARY_THRESHOLD: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    Binary,
    Ternary,
}

/// Maps per-row quantization errors to selection probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProbFn {
    Uniform,
    Linear,
    HalfGaussian { sigma: f64 },
    Softmax,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantPlan {
    pub scheme: Scheme,
    /// Fraction of rows quantized.
    pub ratio: f64,
    pub prob_fn: ProbFn,
    pub seed: u64,
}

impl QuantPlan {
    pub fn new(scheme: Scheme, ratio: f64, seed: u64) -> Self {
        Self { scheme, ratio, prob_fn: ProbFn::Linear, seed }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("quantization ratio {} outside [0, 1]", self.ratio)));
        }
        if let ProbFn::HalfGaussian { sigma } = self.prob_fn {
            if !(sigma > 0.0) {
                return Err(Error::Config(format!("half-Gaussian sigma {sigma} must be positive")));
            }
        }
        Ok(())
    }

    /// Number of rows out of `n` that this plan quantizes.
    pub fn quantized_rows(&self, n: usize) -> usize {
        ((self.ratio * n as f64).round() as usize).min(n)
    }
}

/// Split of a weight matrix's rows into quantized and full-precision sets.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RowPartition {
    pub q_idx: BTreeSet<usize>,
    pub f_idx: BTreeSet<usize>,
    pub n: usize,
    /// Set when a spin landed beyond the remaining mass and wrapped.
    pub wrapped: bool,
}

impl RowPartition {
    pub fn from_quantized(q_idx: BTreeSet<usize>, n: usize) -> Self {
        let f_idx = (0..n).filter(|i| !q_idx.contains(i)).collect();
        Self { q_idx, f_idx, n, wrapped: false }
    }

    pub fn is_quantized(&self, row: usize) -> bool {
        self.q_idx.contains(&row)
    }
}

/// Signs with sign(0) = +1 and the l1-optimal scale (mean magnitude).
pub fn binarize_row(w: &[f64]) -> (Vec<i8>, f64) {
    let codes = w.iter().map(|&x| if x >= 0.0 { 1 } else { -1 }).collect();
    let beta = w.iter().map(|x| x.abs()).sum::<f64>() / w.len() as f64;
    (codes, beta)
}

/// Threshold ternarization; returns (codes, beta, delta).
pub fn ternarize_row(w: &[f64]) -> (Vec<i8>, f64, f64) {
    let delta = TERNARY_THRESHOLD * w.iter().map(|x| x.abs()).sum::<f64>() / w.len() as f64;
    let codes: Vec<i8> = w
        .iter()
        .map(|&x| if x > delta { 1 } else if x < -delta { -1 } else { 0 })
        .collect();
    let kept: Vec<f64> = w.iter().filter(|x| x.abs() > delta).map(|x| x.abs()).collect();
    let beta = if kept.is_empty() { 0.0 } else { kept.iter().sum::<f64>() / kept.len() as f64 };
    (codes, beta, delta)
}

/// Dequantized row and its scale.
pub fn quantize_row(scheme: Scheme, w: &[f64]) -> (Vec<f64>, f64) {
    let (codes, beta) = match scheme {
        Scheme::Binary => binarize_row(w),
        Scheme::Ternary => {
            let (c, b, _) = ternarize_row(w);
            (c, b)
        }
    };
    (codes.iter().map(|&c| beta * c as f64).collect(), beta)
}

/// ||w - q||_1 / ||w||_1, zero for an all-zero row.
pub fn quant_error_row(w: &[f64], q: &[f64]) -> f64 {
    let denom: f64 = w.iter().map(|x| x.abs()).sum();
    if denom == 0.0 {
        return 0.0;
    }
    w.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / denom
}

pub fn quant_probabilities(errors: &[f64], prob_fn: ProbFn) -> Vec<f64> {
    let n = errors.len();
    let f: Vec<f64> = errors.iter().map(|e| 1.0 / (e + PROB_OFFSET)).collect();
    let raw: Vec<f64> = match prob_fn {
        ProbFn::Uniform => vec![1.0; n],
        ProbFn::Linear => f,
        ProbFn::HalfGaussian { sigma } => {
            let c = std::f64::consts::SQRT_2 / (sigma * std::f64::consts::PI.sqrt());
            f.iter().map(|x| c * (-x * x / (2.0 * sigma * sigma)).exp()).collect()
        }
        ProbFn::Softmax => {
            // shifting by the max leaves the normalized result unchanged
            let top = f.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            f.iter().map(|x| (x - top).exp()).collect()
        }
    };
    let total: f64 = raw.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return vec![1.0 / n as f64; n];
    }
    raw.iter().map(|x| x / total).collect()
}

/// Sequential roulette-wheel selection without replacement.
pub fn lottery_partition<R: Rng + ?Sized>(pr: &[f64], ratio: f64, rng: &mut R) -> RowPartition {
    let n = pr.len();
    let picks = ((ratio * n as f64).round() as usize).min(n);
    let mut p = pr.to_vec();
    let mut chosen = BTreeSet::new();
    let mut wrapped = false;
    for _ in 0..picks {
        let total: f64 = p.iter().sum();
        let spin: f64 = rng.gen();
        let mut acc = 0.0;
        let mut pick = None;
        if total > 0.0 {
            for (i, &pi) in p.iter().enumerate() {
                if pi <= 0.0 {
                    continue;
                }
                acc += pi / total;
                if acc >= spin {
                    pick = Some(i);
                    break;
                }
            }
        }
        let i = pick.unwrap_or_else(|| {
            wrapped = true;
            (0..n).rev().find(|i| !chosen.contains(i)).expect("fewer picks than rows")
        });
        chosen.insert(i);
        p[i] = 0.0;
    }
    let mut part = RowPartition::from_quantized(chosen, n);
    part.wrapped = wrapped;
    part
}

/// A latent full-precision matrix with a subset of rows replaced by their
/// quantized form.
#[derive(Debug, Clone, PartialEq)]
pub struct HybridWeight {
    pub latent: DMatrix<f64>,
    pub effective: DMatrix<f64>,
    pub partition: RowPartition,
    /// Scale of each quantized row, `None` for full-precision rows.
    pub scales: Vec<Option<f64>>,
    pub scheme: Scheme,
}

fn row_vec(m: &DMatrix<f64>, r: usize) -> Vec<f64> {
    m.row(r).iter().copied().collect()
}

/// Per-row errors of quantizing every row of `latent`.
pub fn row_errors(latent: &DMatrix<f64>, scheme: Scheme) -> Vec<f64> {
    (0..latent.nrows())
        .map(|r| {
            let w = row_vec(latent, r);
            quant_error_row(&w, &quantize_row(scheme, &w).0)
        })
        .collect()
}

pub fn compose_hybrid<R: Rng + ?Sized>(latent: &DMatrix<f64>, plan: &QuantPlan, rng: &mut R) -> HybridWeight {
    let errors = row_errors(latent, plan.scheme);
    let pr = quant_probabilities(&errors, plan.prob_fn);
    let partition = lottery_partition(&pr, plan.ratio, rng);
    HybridWeight::with_partition(latent, plan.scheme, partition)
}

impl HybridWeight {
    pub fn with_partition(latent: &DMatrix<f64>, scheme: Scheme, partition: RowPartition) -> Self {
        let mut h = Self {
            latent: latent.clone(),
            effective: latent.clone(),
            partition,
            scales: vec![None; latent.nrows()],
            scheme,
        };
        h.refresh(latent);
        h
    }

    /// Requantizes from new latent values, keeping the partition.
    pub fn refresh(&mut self, latent: &DMatrix<f64>) {
        self.latent.copy_from(latent);
        self.effective.copy_from(latent);
        for r in 0..latent.nrows() {
            if self.partition.is_quantized(r) {
                let (q, beta) = quantize_row(self.scheme, &row_vec(latent, r));
                for (c, v) in q.into_iter().enumerate() {
                    self.effective[(r, c)] = v;
                }
                self.scales[r] = Some(beta);
            } else {
                self.scales[r] = None;
            }
        }
    }
}

/// Straight-through weight gradient: passes unchanged to the latent copy.
pub fn ste_backward_weight(grad_out: &[f64]) -> Vec<f64> {
    grad_out.to_vec()
}

/// Uniform k-bit quantization on [lo, hi] with half-away-from-zero rounding,
/// mapped back to [lo, hi].
pub fn quantize_activation(x: &[f64], k: u32, bounds: (f64, f64)) -> Vec<f64> {
    let (lo, hi) = bounds;
    let levels = ((1u64 << k) - 1) as f64;
    let width = hi - lo;
    x.iter()
        .map(|&v| {
            if !(width > 0.0) {
                return lo;
            }
            let t = (v.clamp(lo, hi) - lo) / width;
            lo + width * (t * levels).round() / levels
        })
        .collect()
}

/// Saturated straight-through gradient: zero where the input was clipped.
pub fn ste_backward_activation(grad_out: &[f64], x: &[f64], bounds: (f64, f64)) -> Vec<f64> {
    grad_out
        .iter()
        .zip(x)
        .map(|(&g, &v)| if v < bounds.0 || v > bounds.1 { 0.0 } else { g })
        .collect()
}
