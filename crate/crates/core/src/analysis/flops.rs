//! Analytical operation counts per transmitted symbol.
//!
//! Learned-model rows are polynomials in (M, K, QR) with rational
//! coefficients and are evaluated exactly. Optimization rows carry
//! `sqrt(.)` and `ln(1/eps)` factors and are evaluated in floating point.

use std::fmt;
use std::str::FromStr;

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Exact = Ratio<i128>;

/// Weight of one binary operation relative to one floating-point operation.
pub const BINARY_OP_WEIGHT: i128 = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Blp,
    SlpOpt,
    SlpDnet,
    SlpDbnet,
    SlpDtnet,
    SlpDsqbnet,
    SlpDsqtnet,
    RobustBlp,
    RobustSlpOpt,
    RobustSlpDnet,
    RobustSlpDbnet,
    RobustSlpDtnet,
    RobustSlpDsqbnet,
    RobustSlpDsqtnet,
}

impl Method {
    pub const ALL: [Method; 14] = [
        Method::Blp,
        Method::SlpOpt,
        Method::SlpDnet,
        Method::SlpDbnet,
        Method::SlpDtnet,
        Method::SlpDsqbnet,
        Method::SlpDsqtnet,
        Method::RobustBlp,
        Method::RobustSlpOpt,
        Method::RobustSlpDnet,
        Method::RobustSlpDbnet,
        Method::RobustSlpDtnet,
        Method::RobustSlpDsqbnet,
        Method::RobustSlpDsqtnet,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Blp => "blp",
            Method::SlpOpt => "slp-opt",
            Method::SlpDnet => "slp-dnet",
            Method::SlpDbnet => "slp-dbnet",
            Method::SlpDtnet => "slp-dtnet",
            Method::SlpDsqbnet => "slp-dsqbnet",
            Method::SlpDsqtnet => "slp-dsqtnet",
            Method::RobustBlp => "robust-blp",
            Method::RobustSlpOpt => "robust-slp-opt",
            Method::RobustSlpDnet => "robust-slp-dnet",
            Method::RobustSlpDbnet => "robust-slp-dbnet",
            Method::RobustSlpDtnet => "robust-slp-dtnet",
            Method::RobustSlpDsqbnet => "robust-slp-dsqbnet",
            Method::RobustSlpDsqtnet => "robust-slp-dsqtnet",
        }
    }

    /// Whether the row is an interior-point cost with an accuracy factor.
    pub fn is_optimization(&self) -> bool {
        matches!(self, Method::Blp | Method::SlpOpt | Method::RobustBlp | Method::RobustSlpOpt)
    }

    /// Whether the row depends on the quantization ratio.
    pub fn takes_ratio(&self) -> bool {
        matches!(self, Method::SlpDsqbnet | Method::SlpDsqtnet | Method::RobustSlpDsqbnet | Method::RobustSlpDsqtnet)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub method: Method,
    pub m: usize,
    pub k: usize,
    pub qr: f64,
    /// Accuracy used by optimization rows, `None` for learned rows.
    pub epsilon: Option<f64>,
    pub binary_ops: f64,
    pub float_ops: f64,
    /// binary_ops / 32 + float_ops.
    pub total_weighted: f64,
}

/// Operations of one convolution, `(c_in k^2 + (c_in k^2 - 1) + 1) c_out N_w N_h`.
pub fn conv_flops(c_in: u64, k_f: u64, c_out: u64, n_w: u64, n_h: u64) -> u64 {
    let mac = c_in * k_f * k_f;
    (mac + (mac - 1) + 1) * c_out * n_w * n_h
}

fn int(x: usize) -> Exact {
    Exact::from_integer(x as i128)
}

fn frac(n: i128, d: i128) -> Exact {
    Exact::new(n, d)
}

/// (full-precision polynomial, reduction per unit QR) of a learned family.
fn learned_terms(robust: bool, ternary: bool, m: usize, k: usize) -> (Exact, Exact) {
    let (m, k) = (int(m), int(k));
    let k2m = k * k * m;
    let m2k = m * m * k;
    let km = k * m;
    let base = if robust {
        int(2704) * k2m + int(8) * m2k + int(432) * km + int(6) * k - int(2)
    } else {
        int(2704) * k2m + int(4) * m2k + int(430) * km - k
    };
    let reduction = if ternary {
        int(2433) * k2m + frac(783, 2) * km + frac(7, 8)
    } else {
        int(2577) * k2m + int(423) * km + frac(7, 8)
    };
    (base, reduction)
}

/// Exact weighted total and reduction of a learned row.
pub fn learned_row(method: Method, m: usize, k: usize, qr: Exact) -> Result<(Exact, Exact)> {
    use Method::*;
    let (robust, ternary, ratio) = match method {
        SlpDnet => (false, false, Exact::from_integer(0)),
        SlpDbnet => (false, false, Exact::from_integer(1)),
        SlpDtnet => (false, true, Exact::from_integer(1)),
        SlpDsqbnet => (false, false, qr),
        SlpDsqtnet => (false, true, qr),
        RobustSlpDnet => (true, false, Exact::from_integer(0)),
        RobustSlpDbnet => (true, false, Exact::from_integer(1)),
        RobustSlpDtnet => (true, true, Exact::from_integer(1)),
        RobustSlpDsqbnet => (true, false, qr),
        RobustSlpDsqtnet => (true, true, qr),
        _ => return Err(Error::Config(format!("{method} has no closed-form learned row"))),
    };
    let (base, reduction) = learned_terms(robust, ternary, m, k);
    let cut = reduction * ratio;
    Ok((base - cut, cut))
}

/// The printed fully-quantized rows, kept for comparison with the
/// reductions of the stochastic rows.
pub fn printed_quantized_row(method: Method, m: usize, k: usize) -> Option<Exact> {
    let (mm, kk) = (int(m), int(k));
    let k2m = kk * kk * mm;
    let m2k = mm * mm * kk;
    let km = kk * mm;
    match method {
        Method::SlpDbnet => Some(int(127) * k2m + int(4) * m2k + int(7) * km - kk - frac(7, 8)),
        Method::SlpDtnet => Some(int(271) * k2m + int(4) * m2k + frac(77, 2) * km - kk - frac(7, 8)),
        Method::RobustSlpDbnet => Some(int(127) * k2m * kk + int(8) * m2k + int(9) * km + int(6) * kk - frac(9, 8)),
        Method::RobustSlpDtnet => Some(int(271) * k2m + int(8) * m2k + frac(81, 2) * km + int(6) * kk - frac(9, 8)),
        _ => None,
    }
}

fn optimization_row(method: Method, m: usize, k: usize, epsilon: f64) -> f64 {
    let (m, k) = (m as f64, k as f64);
    let n = 2.0 * k * m;
    let d = 2.0 * m + 1.0;
    let log = (1.0 / epsilon).ln();
    match method {
        Method::Blp => (4.0 * m + k + 2.0).sqrt() * (n * d + n * d * d + n * (k + 1.0).powi(2) + n.powi(3)) * log,
        Method::SlpOpt => d.sqrt() * (n * d + n * d * d + n.powi(3)) * log,
        Method::RobustBlp => (2.0 * k * d).sqrt() * (n * k * d.powi(3) + n * n * k * d * d + n.powi(3)) * log,
        Method::RobustSlpOpt => (2.0 * d).sqrt() * (2.0 * n * k * d * d + n.powi(3)) * log,
        _ => unreachable!("learned rows are exact"),
    }
}

fn to_f64(x: Exact) -> f64 {
    *x.numer() as f64 / *x.denom() as f64
}

/// Evaluates one table row. `qr` is ignored by rows that do not take it;
/// `epsilon` only matters for optimization rows.
pub fn method_flops(method: Method, m: usize, k: usize, qr: f64, epsilon: f64) -> Result<FlopsReport> {
    if m == 0 || k == 0 {
        return Err(Error::Config("M and K must be positive".into()));
    }
    if method.is_optimization() {
        if !(epsilon > 0.0 && epsilon < 1.0) {
            return Err(Error::Config(format!("accuracy {epsilon} outside (0, 1)")));
        }
        let total = optimization_row(method, m, k, epsilon);
        return Ok(FlopsReport { method, m, k, qr: 0.0, epsilon: Some(epsilon), binary_ops: 0.0, float_ops: total, total_weighted: total });
    }
    if !(0.0..=1.0).contains(&qr) {
        return Err(Error::Config(format!("quantization ratio {qr} outside [0, 1]")));
    }
    let exact_qr = Exact::approximate_float(qr).ok_or_else(|| Error::Config(format!("ratio {qr} is not representable")))?;
    let (total, cut) = learned_row(method, m, k, exact_qr)?;
    // a binary op costs 1/32, so removing `cut` weighted ops moves 32 cut / 31 ops to the binary class
    let binary = cut * Exact::from_integer(BINARY_OP_WEIGHT) / Exact::from_integer(BINARY_OP_WEIGHT - 1);
    let float = total - binary / Exact::from_integer(BINARY_OP_WEIGHT);
    let qr = match method {
        _ if method.takes_ratio() => qr,
        Method::SlpDbnet | Method::SlpDtnet | Method::RobustSlpDbnet | Method::RobustSlpDtnet => 1.0,
        _ => 0.0,
    };
    Ok(FlopsReport {
        method,
        m,
        k,
        qr,
        epsilon: None,
        binary_ops: to_f64(binary),
        float_ops: to_f64(float),
        total_weighted: to_f64(total),
    })
}
