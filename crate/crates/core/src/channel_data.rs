//! Channel and symbol generation, the real-composite transform, and the
//! binary dataset container.

use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::{Complex, DMatrix};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel rows with a norm below this are redrawn.
pub const DEGENERATE_NORM: f64 = 1e-9;

pub const DATASET_FORMAT_VERSION: u32 = 1;
const DATASET_MAGIC: &[u8; 8] = b"SLPDSET\0";
const HEADER_LEN: usize = 8 + 4 * 4 + 8 * 3 + 8 * 3 + 8;

/// System dimensions and link parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SystemConfig {
    /// Transmit antennas.
    pub m: usize,
    /// Single-antenna users.
    pub k: usize,
    /// PSK order.
    pub mod_order: usize,
    /// Noise power (linear).
    pub n0: f64,
    /// Squared CSI error bound, zero for the nonrobust problem.
    pub csi_error_bound: f64,
}

impl Default for SystemConfig {
    fn default() -> Self {
        Self { m: 4, k: 4, mod_order: 4, n0: 1.0, csi_error_bound: 0.0 }
    }
}

impl SystemConfig {
    pub fn new(m: usize, k: usize) -> Self {
        Self { m, k, ..Self::default() }
    }

    /// Half-angle of the constructive region, always derived from the PSK order.
    pub fn theta(&self) -> f64 {
        PI / self.mod_order as f64
    }

    pub fn tan_theta(&self) -> f64 {
        self.theta().tan()
    }

    pub fn validate(&self) -> Result<()> {
        if self.m == 0 || self.k == 0 {
            return Err(Error::Config(format!("M and K must be positive (M={}, K={})", self.m, self.k)));
        }
        if self.mod_order < 2 || !self.mod_order.is_power_of_two() {
            return Err(Error::Config(format!("modulation order {} is not a power of two >= 2", self.mod_order)));
        }
        if !(self.n0 > 0.0 && self.n0.is_finite()) {
            return Err(Error::Config(format!("noise power {} must be positive", self.n0)));
        }
        if !(self.csi_error_bound >= 0.0 && self.csi_error_bound.is_finite()) {
            return Err(Error::Config(format!("CSI error bound {} must be non-negative", self.csi_error_bound)));
        }
        Ok(())
    }
}

/// One downlink channel realization (K x M, row i is user i) and its symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSample {
    pub h: DMatrix<Complex<f64>>,
    pub symbols: Vec<Complex<f64>>,
}

impl ChannelSample {
    pub fn phase(&self, user: usize) -> f64 {
        self.symbols[user].arg()
    }
}

/// How each user's channel is rotated by the symbol phases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RotationMode {
    /// h_i * exp(j(phi_1 - phi_i)), relative to the first user.
    #[default]
    Relative,
    /// h_i * sum_k exp(j(phi_k - phi_i)), the summed form.
    LiteralSum,
}

impl RotationMode {
    fn code(self) -> u8 {
        match self {
            RotationMode::Relative => 0,
            RotationMode::LiteralSum => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(RotationMode::Relative),
            1 => Ok(RotationMode::LiteralSum),
            c => Err(Error::Format(format!("unknown rotation mode code {c}"))),
        }
    }
}

/// Real-domain channel images: column i of `phi` is [Re h~_i; Im h~_i].
#[derive(Debug, Clone, PartialEq)]
pub struct RealComposite {
    pub phi: DMatrix<f64>,
}

impl RealComposite {
    pub fn m(&self) -> usize {
        self.phi.nrows() / 2
    }

    pub fn k(&self) -> usize {
        self.phi.ncols()
    }

    pub fn upsilon(&self) -> DMatrix<f64> {
        upsilon(self.m())
    }
}

/// The fixed rotation [[0, -I], [I, 0]] of size 2M.
pub fn upsilon(m: usize) -> DMatrix<f64> {
    let mut u = DMatrix::zeros(2 * m, 2 * m);
    for i in 0..m {
        u[(i, m + i)] = -1.0;
        u[(m + i, i)] = 1.0;
    }
    u
}

/// Draws `count` Rayleigh channels with uniformly random PSK symbols.
pub fn generate_channels(config: &SystemConfig, count: usize, seed: u64) -> Result<Vec<ChannelSample>> {
    config.validate()?;
    if count == 0 {
        return Err(Error::Config("sample count must be at least 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 0.5f64.sqrt()).expect("valid std dev");
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let h = DMatrix::from_fn(config.k, config.m, |_, _| Complex::new(normal.sample(&mut rng), normal.sample(&mut rng)));
        let symbols = (0..config.k)
            .map(|_| {
                let idx = rng.gen_range(0..config.mod_order);
                Complex::from_polar(1.0, (2 * idx + 1) as f64 * PI / config.mod_order as f64)
            })
            .collect();
        let degenerate = h.row_iter().any(|row| row.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt() < DEGENERATE_NORM);
        if !degenerate {
            out.push(ChannelSample { h, symbols });
        }
    }
    Ok(out)
}

pub fn to_real_composite(sample: &ChannelSample, config: &SystemConfig, mode: RotationMode) -> Result<RealComposite> {
    let (k, m) = sample.h.shape();
    if k != config.k || m != config.m || sample.symbols.len() != k {
        return Err(Error::Dimension(format!(
            "sample is {k}x{m} with {} symbols, config expects {}x{}",
            sample.symbols.len(),
            config.k,
            config.m
        )));
    }
    let mut phi = DMatrix::zeros(2 * m, k);
    for i in 0..k {
        let rot = match mode {
            RotationMode::Relative => Complex::from_polar(1.0, sample.phase(0) - sample.phase(i)),
            RotationMode::LiteralSum => (0..k).map(|j| Complex::from_polar(1.0, sample.phase(j) - sample.phase(i))).sum(),
        };
        for a in 0..m {
            let v = sample.h[(i, a)] * rot;
            phi[(a, i)] = v.re;
            phi[(m + a, i)] = v.im;
        }
    }
    Ok(RealComposite { phi })
}

/// Divides a sample by its mean symbol modulus and returns the scale used.
pub fn normalize_sample(sample: &ChannelSample) -> Result<(ChannelSample, f64)> {
    let scale = sample.symbols.iter().map(|s| s.norm()).sum::<f64>() / sample.symbols.len() as f64;
    if !(scale > 0.0) {
        return Err(Error::Degenerate("symbol vector has zero modulus".into()));
    }
    for row in sample.h.row_iter() {
        if row.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt() < DEGENERATE_NORM {
            return Err(Error::Degenerate("channel row with near-zero norm".into()));
        }
    }
    let h = sample.h.map(|c| c / scale);
    let symbols = sample.symbols.iter().map(|s| s / scale).collect();
    Ok((ChannelSample { h, symbols }, scale))
}

/// Normalized real-composite samples together with their provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub config: SystemConfig,
    pub samples: Vec<RealComposite>,
    /// Per-sample normalization scale.
    pub scales: Vec<f64>,
    /// Training SINR range in dB.
    pub train_sinr_range: (f64, f64),
    pub seed: u64,
    pub rotation: RotationMode,
}

pub fn normalize_dataset(
    samples: &[ChannelSample],
    config: &SystemConfig,
    rotation: RotationMode,
    train_sinr_range: (f64, f64),
    seed: u64,
) -> Result<Dataset> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Config("cannot build a dataset from zero samples".into()));
    }
    let mut composites = Vec::with_capacity(samples.len());
    let mut scales = Vec::with_capacity(samples.len());
    for s in samples {
        let (normed, scale) = normalize_sample(s)?;
        composites.push(to_real_composite(&normed, config, rotation)?);
        scales.push(scale);
    }
    Ok(Dataset { config: *config, samples: composites, scales, train_sinr_range, seed, rotation })
}

/// Generates and normalizes in one call.
pub fn build_dataset(config: &SystemConfig, count: usize, seed: u64, train_sinr_range: (f64, f64)) -> Result<Dataset> {
    let raw = generate_channels(config, count, seed)?;
    normalize_dataset(&raw, config, RotationMode::Relative, train_sinr_range, seed)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DatasetHeader {
    format_version: u32,
    #[serde(rename = "M")]
    m: usize,
    #[serde(rename = "K")]
    k: usize,
    mod_order: usize,
    n0: f64,
    seed: u64,
    count: usize,
    csi_error_bound: f64,
    train_sinr_range_db: (f64, f64),
    rotation: RotationMode,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (m, k) = (self.config.m, self.config.k);
        let mut buf = Vec::with_capacity(HEADER_LEN + self.len() * (1 + 2 * m * k) * 8);
        buf.extend_from_slice(DATASET_MAGIC);
        buf.extend_from_slice(&DATASET_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(m as u32).to_le_bytes());
        buf.extend_from_slice(&(k as u32).to_le_bytes());
        buf.extend_from_slice(&(self.config.mod_order as u32).to_le_bytes());
        buf.extend_from_slice(&self.config.n0.to_le_bytes());
        buf.extend_from_slice(&self.seed.to_le_bytes());
        buf.extend_from_slice(&(self.len() as u64).to_le_bytes());
        buf.extend_from_slice(&self.config.csi_error_bound.to_le_bytes());
        buf.extend_from_slice(&self.train_sinr_range.0.to_le_bytes());
        buf.extend_from_slice(&self.train_sinr_range.1.to_le_bytes());
        buf.push(self.rotation.code());
        buf.extend_from_slice(&[0u8; 7]);
        for (rc, scale) in self.samples.iter().zip(&self.scales) {
            buf.extend_from_slice(&scale.to_le_bytes());
            for r in 0..2 * m {
                for c in 0..k {
                    buf.extend_from_slice(&rc.phi[(r, c)].to_le_bytes());
                }
            }
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!("dataset file is {} bytes, shorter than its header", bytes.len())));
        }
        if &bytes[..8] != DATASET_MAGIC {
            return Err(Error::Format("bad dataset magic".into()));
        }
        let mut r = ByteReader { bytes, pos: 8 };
        let version = r.u32();
        if version != DATASET_FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: DATASET_FORMAT_VERSION });
        }
        let m = r.u32() as usize;
        let k = r.u32() as usize;
        let mod_order = r.u32() as usize;
        let n0 = r.f64();
        let seed = r.u64();
        let count = r.u64() as usize;
        let csi_error_bound = r.f64();
        let lo = r.f64();
        let hi = r.f64();
        let rotation = RotationMode::from_code(bytes[r.pos])?;
        r.pos += 8;
        let config = SystemConfig { m, k, mod_order, n0, csi_error_bound };
        config.validate()?;
        let per_sample = (1 + 2 * m * k) * 8;
        let expected = count.checked_mul(per_sample).and_then(|p| p.checked_add(HEADER_LEN));
        if expected != Some(bytes.len()) {
            return Err(Error::Dimension(format!(
                "payload of {} bytes does not match {count} samples of {m}x{k}",
                bytes.len() - HEADER_LEN
            )));
        }
        let mut samples = Vec::with_capacity(count);
        let mut scales = Vec::with_capacity(count);
        for _ in 0..count {
            scales.push(r.f64());
            let mut phi = DMatrix::zeros(2 * m, k);
            for row in 0..2 * m {
                for col in 0..k {
                    phi[(row, col)] = r.f64();
                }
            }
            samples.push(RealComposite { phi });
        }
        Ok(Dataset { config, samples, scales, train_sinr_range: (lo, hi), seed, rotation })
    }

    fn header(&self) -> DatasetHeader {
        DatasetHeader {
            format_version: DATASET_FORMAT_VERSION,
            m: self.config.m,
            k: self.config.k,
            mod_order: self.config.mod_order,
            n0: self.config.n0,
            seed: self.seed,
            count: self.len(),
            csi_error_bound: self.config.csi_error_bound,
            train_sinr_range_db: self.train_sinr_range,
            rotation: self.rotation,
        }
    }
}

/// Writes the binary container and its JSON sidecar (`<path>.json`).
pub fn save_dataset(dataset: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, dataset.to_bytes())?;
    fs::write(sidecar_path(path), serde_json::to_string_pretty(&dataset.header())?)?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    Dataset::from_bytes(&fs::read(path)?)
}

struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl ByteReader<'_> {
    fn take<const N: usize>(&mut self) -> [u8; N] {
        let out: [u8; N] = self.bytes[self.pos..self.pos + N].try_into().expect("bounds checked by caller");
        self.pos += N;
        out
    }
    fn u32(&mut self) -> u32 {
        u32::from_le_bytes(self.take())
    }
    fn u64(&mut self) -> u64 {
        u64::from_le_bytes(self.take())
    }
    fn f64(&mut self) -> f64 {
        f64::from_le_bytes(self.take())
    }
}
