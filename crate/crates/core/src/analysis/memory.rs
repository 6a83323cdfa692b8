//! Inference memory: 1 bit per binary weight, 2 bits per ternary weight and
//! 32 bits per full-precision parameter.

use std::ops::Add;

use serde::{Deserialize, Serialize};

use crate::nn::{Layer, Sequential};
use crate::quantize::Scheme;
use crate::slp_dnet::model::SlpDnetModel;

pub const BINARY_BITS: u64 = 1;
pub const TERNARY_BITS: u64 = 2;
pub const FLOAT_BITS: u64 = 32;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCounts {
    pub binary: u64,
    pub ternary: u64,
    pub float: u64,
}

impl ParamCounts {
    pub fn total(&self) -> u64 {
        self.binary + self.ternary + self.float
    }

    pub fn bits(&self) -> u64 {
        self.binary * BINARY_BITS + self.ternary * TERNARY_BITS + self.float * FLOAT_BITS
    }
}

impl Add for ParamCounts {
    type Output = Self;

    fn add(self, o: Self) -> Self {
        Self { binary: self.binary + o.binary, ternary: self.ternary + o.ternary, float: self.float + o.float }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub binary_params: u64,
    pub ternary_params: u64,
    pub float_params: u64,
    pub bytes: f64,
    /// Bytes of the same parameters at full precision divided by `bytes`.
    pub savings_vs_full: f64,
}

impl MemoryReport {
    pub fn from_counts(c: ParamCounts) -> Self {
        let bytes = c.bits() as f64 / 8.0;
        let full = (c.total() * FLOAT_BITS) as f64 / 8.0;
        Self {
            binary_params: c.binary,
            ternary_params: c.ternary,
            float_params: c.float,
            bytes,
            savings_vs_full: if bytes > 0.0 { full / bytes } else { 1.0 },
        }
    }
}

fn layer_counts(layer: &Layer) -> ParamCounts {
    let all: u64 = layer.params().iter().map(|p| p.value.len() as u64).sum();
    let Layer::Conv(conv) = layer else {
        return ParamCounts { float: all, ..Default::default() };
    };
    let Some(slot) = &conv.quant else {
        return ParamCounts { float: all, ..Default::default() };
    };
    let quantized = (slot.partition.q_idx.len() * conv.row_len()) as u64;
    let mut c = ParamCounts { float: all - quantized, ..Default::default() };
    match slot.scheme {
        Scheme::Binary => c.binary = quantized,
        Scheme::Ternary => c.ternary = quantized,
    }
    c
}

fn sequential_counts(prefix: &str, s: &Sequential, out: &mut Vec<(String, ParamCounts)>) {
    for (i, l) in s.layers.iter().enumerate() {
        let c = layer_counts(l);
        if c.total() > 0 {
            out.push((format!("{prefix}.{i}.{}", l.kind()), c));
        }
    }
}

/// Parameter classes per named layer, in model order.
pub fn layer_counts_of(model: &SlpDnetModel) -> Vec<(String, ParamCounts)> {
    let mut out = Vec::new();
    for (l, b) in model.blocks.iter().enumerate() {
        out.push((format!("block{l}.step"), ParamCounts { float: 2, ..Default::default() }));
        sequential_counts(&format!("block{l}.barrier"), &b.barrier, &mut out);
    }
    sequential_counts("apm", &model.apm, &mut out);
    out
}

pub fn memory_footprint(model: &SlpDnetModel) -> MemoryReport {
    let total = layer_counts_of(model).into_iter().fold(ParamCounts::default(), |acc, (_, c)| acc + c);
    MemoryReport::from_counts(total)
}
