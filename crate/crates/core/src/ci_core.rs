//! Constructive-interference geometry: residuals, the split linear form of the
//! constraints, and closed-form precoders recovered from multipliers.

use nalgebra::{DMatrix, DVector};

use crate::channel_data::upsilon;
use crate::error::{Error, Result};

/// Condition number beyond which the robust system is treated as singular.
pub const MAX_CONDITION: f64 = 1e12;
/// Smoothing inside the norm term of robust constraints.
pub const NORM_SMOOTHING: f64 = 1e-12;

/// A real-composite precoding vector with its power.
#[derive(Debug, Clone, PartialEq)]
pub struct Precoder {
    u: DVector<f64>,
    power: f64,
}

impl Precoder {
    pub fn new(u: DVector<f64>) -> Self {
        let power = u.norm_squared();
        Self { u, power }
    }

    pub fn zeros(dim: usize) -> Self {
        Self::new(DVector::zeros(dim))
    }

    pub fn u(&self) -> &DVector<f64> {
        &self.u
    }

    pub fn into_inner(self) -> DVector<f64> {
        self.u
    }

    pub fn power(&self) -> f64 {
        self.power
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self::new(&self.u * c)
    }
}

pub fn transmit_power(p: &Precoder) -> f64 {
    p.power()
}

/// Per-user multiplier pairs; all entries are non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Multipliers {
    pub v1: DVector<f64>,
    pub v2: DVector<f64>,
}

impl Multipliers {
    pub fn new(v1: DVector<f64>, v2: DVector<f64>) -> Result<Self> {
        if v1.len() != v2.len() {
            return Err(Error::Dimension(format!("multiplier halves have lengths {} and {}", v1.len(), v2.len())));
        }
        if v1.iter().chain(v2.iter()).any(|&x| !(x >= 0.0)) {
            return Err(Error::Config("multipliers must be non-negative".into()));
        }
        Ok(Self { v1, v2 })
    }

    pub fn zeros(k: usize) -> Self {
        Self { v1: DVector::zeros(k), v2: DVector::zeros(k) }
    }

    /// Splits a stacked [v1; v2] vector.
    pub fn from_stacked(v: &DVector<f64>) -> Result<Self> {
        let k = v.len() / 2;
        Self::new(v.rows(0, k).into_owned(), v.rows(k, k).into_owned())
    }

    pub fn stacked(&self) -> DVector<f64> {
        let k = self.v1.len();
        DVector::from_fn(2 * k, |i, _| if i < k { self.v1[i] } else { self.v2[i - k] })
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { v1: &self.v1 * c, v2: &self.v2 * c }
    }
}

/// The two norm-shifted rotations used by the robust constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct RobustGeometry {
    /// Upsilon - tan(theta) I, as printed for the first family.
    pub q1: DMatrix<f64>,
    /// Upsilon + tan(theta) I.
    pub q2: DMatrix<f64>,
    /// Squared spectral norms of q1 and q2; both equal 1 + tan^2(theta).
    pub q_norms: (f64, f64),
}

impl RobustGeometry {
    pub fn new(m: usize, theta: f64) -> Self {
        let t = theta.tan();
        let ups = upsilon(m);
        let eye = DMatrix::<f64>::identity(2 * m, 2 * m);
        let q1 = &ups - &eye * t;
        let q2 = &ups + &eye * t;
        let sq_norm = |q: &DMatrix<f64>| {
            let s = q.clone().svd(false, false).singular_values;
            let top = s.max();
            top * top
        };
        let q_norms = (sq_norm(&q1), sq_norm(&q2));
        Self { q1, q2, q_norms }
    }

    /// The common value of Q^T Q / I.
    pub fn q(&self) -> f64 {
        self.q_norms.0
    }
}

/// The canonical residual g(u) = (phi^T u - sqrt(Gamma n0)) tan(theta) - |phi^T Upsilon u|.
pub fn ci_residual(phi_i: &DVector<f64>, u: &Precoder, gamma_i: f64, n0: f64, theta: f64) -> f64 {
    let m = phi_i.len() / 2;
    let in_phase = phi_i.dot(u.u());
    let quad = phi_i.dot(&(upsilon(m) * u.u()));
    (in_phase - (gamma_i * n0).sqrt()) * theta.tan() - quad.abs()
}

/// The two bracketed residuals of the unsupervised loss, signed as written
/// there: the first is the negated first split piece, the second is the
/// second split piece (it enters the loss with a minus sign).
pub fn ci_residual_literal(phi_i: &DVector<f64>, u: &Precoder, gamma_i: f64, n0: f64, theta: f64) -> (f64, f64) {
    let m = phi_i.len() / 2;
    let in_phase = phi_i.dot(u.u());
    let quad = phi_i.dot(&(upsilon(m) * u.u()));
    let t = theta.tan();
    let c = (gamma_i * n0).sqrt();
    (quad - in_phase * t + c, quad + in_phase * t - c)
}

/// Orientation of the robust constraint families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RobustSign {
    /// Zero error bound recovers the nonrobust feasible set.
    #[default]
    Corrected,
    /// Both families exactly as printed: phi^T Q u + s ||Q u|| + c <= 0.
    Literal,
}

/// Constraints h_j(u) = a_j^T u - s * sqrt(q ||u||^2 + eps) - b_j >= 0.
///
/// Columns 0..K of `a` hold the first family, K..2K the second. With `s = 0`
/// the minimum of each pair equals the canonical residual g.
#[derive(Debug, Clone, PartialEq)]
pub struct ConstraintSet {
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    /// Error radius (square root of the CSI error bound).
    pub s: f64,
    /// Q^T Q / I.
    pub q: f64,
}

impl ConstraintSet {
    /// Nonrobust split of g into its two linear pieces.
    pub fn nonrobust(phi: &DMatrix<f64>, gammas: &[f64], n0: f64, theta: f64) -> Self {
        Self::build(phi, gammas, n0, theta, 0.0, RobustSign::Corrected)
    }

    pub fn robust(phi: &DMatrix<f64>, gammas: &[f64], n0: f64, theta: f64, csi_error_bound: f64, sign: RobustSign) -> Self {
        Self::build(phi, gammas, n0, theta, csi_error_bound.sqrt(), sign)
    }

    fn build(phi: &DMatrix<f64>, gammas: &[f64], n0: f64, theta: f64, s: f64, sign: RobustSign) -> Self {
        let k = phi.ncols();
        assert_eq!(gammas.len(), k, "one SINR target per user");
        let t = theta.tan();
        let rot = upsilon(phi.nrows() / 2).transpose() * phi;
        let flip = if sign == RobustSign::Literal { -1.0 } else { 1.0 };
        let mut a = DMatrix::zeros(phi.nrows(), 2 * k);
        for i in 0..k {
            a.set_column(i, &(phi.column(i) * t - rot.column(i)));
            a.set_column(k + i, &((phi.column(i) * t + rot.column(i)) * flip));
        }
        let b = DVector::from_fn(2 * k, |j, _| t * (gammas[j % k] * n0).sqrt());
        Self { a, b, s, q: 1.0 + t * t }
    }

    pub fn len(&self) -> usize {
        self.b.len()
    }

    pub fn is_empty(&self) -> bool {
        self.b.is_empty()
    }

    pub fn users(&self) -> usize {
        self.b.len() / 2
    }

    pub fn dim(&self) -> usize {
        self.a.nrows()
    }

    /// Smoothed ||Q u||.
    pub fn norm_term(&self, u: &DVector<f64>) -> f64 {
        (self.q * u.norm_squared() + NORM_SMOOTHING).sqrt()
    }

    pub fn residuals(&self, u: &DVector<f64>) -> DVector<f64> {
        let shift = self.s * self.norm_term(u);
        self.a.tr_mul(u).map(|p| p - shift) - &self.b
    }

    /// Residuals with the exact (unsmoothed) norm.
    pub fn exact_residuals(&self, u: &DVector<f64>) -> DVector<f64> {
        let shift = self.s * self.q.sqrt() * u.norm();
        self.a.tr_mul(u).map(|p| p - shift) - &self.b
    }

    /// Per-user min over the two families.
    pub fn user_margins(&self, u: &DVector<f64>) -> DVector<f64> {
        let r = self.exact_residuals(u);
        let k = self.users();
        DVector::from_fn(k, |i, _| r[i].min(r[k + i]))
    }

    /// Same constraints with every right-hand side divided by `c`.
    pub fn scaled_rhs(&self, c: f64) -> Self {
        Self { b: &self.b / c, ..self.clone() }
    }

    /// Lagrangian dual of min ||u||^2 s.t. h(u) >= 0 at multipliers `v`,
    /// with the primal minimizer.
    ///
    /// For the linear case this is -||A v||^2 / 4 + b^T v.
    pub fn dual_value(&self, v: &DVector<f64>) -> (f64, DVector<f64>) {
        let g = &self.a * v;
        let gn = g.norm();
        let total: f64 = v.sum();
        let radius = (gn - self.s * self.q.sqrt() * total).max(0.0);
        let u = if gn > 0.0 { &g * (radius / (2.0 * gn)) } else { DVector::zeros(g.len()) };
        (self.b.dot(v) - 0.25 * radius * radius, u)
    }

    /// Gradient of [`Self::dual_value`] with respect to `v`.
    pub fn dual_gradient(&self, v: &DVector<f64>) -> DVector<f64> {
        let g = &self.a * v;
        let gn = g.norm();
        let sq = self.s * self.q.sqrt();
        let radius = (gn - sq * v.sum()).max(0.0);
        if radius == 0.0 || gn == 0.0 {
            return self.b.clone();
        }
        let dir = self.a.tr_mul(&g) / gn;
        &self.b - (dir.add_scalar(-sq)) * (0.5 * radius)
    }
}

/// u = [Phi (v1 + v2) - Upsilon^T Phi (v1 - v2)] tan(theta) / 2.
pub fn precoder_from_multipliers(phi: &DMatrix<f64>, mult: &Multipliers, theta: f64) -> Precoder {
    let rot = upsilon(phi.nrows() / 2).transpose() * phi;
    let u = (phi * (&mult.v1 + &mult.v2) - rot * (&mult.v1 - &mult.v2)) * (theta.tan() / 2.0);
    Precoder::new(u)
}

/// The linear map taking stacked multipliers [v1; v2] to the precoder.
pub fn multiplier_map(phi: &DMatrix<f64>, theta: f64) -> DMatrix<f64> {
    let k = phi.ncols();
    let rot = upsilon(phi.nrows() / 2).transpose() * phi;
    let h = theta.tan() / 2.0;
    let mut e = DMatrix::zeros(phi.nrows(), 2 * k);
    for i in 0..k {
        e.set_column(i, &((phi.column(i) - rot.column(i)) * h));
        e.set_column(k + i, &((phi.column(i) + rot.column(i)) * h));
    }
    e
}

/// Robust closed-form precoder from squared-form multipliers.
///
/// Solves X u = rhs with X = I + sum_j v_j (s^2 q I - a_j a_j^T) and
/// rhs = -sum_j v_j c_j a_j, where a_j = Q_j^T phi_i and c_j = sqrt(Gamma_i n0) tan(theta).
pub fn robust_precoder_from_multipliers(
    phi: &DMatrix<f64>,
    mult: &Multipliers,
    geom: &RobustGeometry,
    gammas: &[f64],
    n0: f64,
    theta: f64,
    csi_error_bound: f64,
) -> Result<Precoder> {
    let k = phi.ncols();
    let dim = phi.nrows();
    if mult.v1.len() != k || gammas.len() != k {
        return Err(Error::Dimension(format!("expected {k} users, got {} multipliers and {} targets", mult.v1.len(), gammas.len())));
    }
    let t = theta.tan();
    let qhat1 = -&geom.q1;
    let mut x = DMatrix::<f64>::identity(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for (q, v) in [(&qhat1, &mult.v1), (&geom.q2, &mult.v2)] {
        let a = q.tr_mul(phi);
        for i in 0..k {
            let col = a.column(i);
            x += (DMatrix::identity(dim, dim) * (csi_error_bound * geom.q()) - col * col.transpose()) * v[i];
            rhs -= col * (v[i] * (gammas[i] * n0).sqrt() * t);
        }
    }
    let sv = x.clone().svd(false, false).singular_values;
    let condition = sv.max() / sv.min();
    if !(condition < MAX_CONDITION) {
        return Err(Error::Singular { condition });
    }
    let u = x.lu().solve(&rhs).ok_or(Error::Singular { condition: f64::INFINITY })?;
    Ok(Precoder::new(u))
}

/// Converts barrier-form multipliers (for h >= 0) to the squared form used by
/// [`robust_precoder_from_multipliers`].
///
/// At an active constraint a^T u - c = s ||Q u||, so the smaller of the two is
/// used as the denominator when an iterate is slightly infeasible.
pub fn squared_form_multipliers(cs: &ConstraintSet, u: &DVector<f64>, barrier: &DVector<f64>) -> Result<Multipliers> {
    let p = cs.a.tr_mul(u);
    let floor = cs.s * cs.norm_term(u);
    let v = DVector::from_fn(cs.len(), |j, _| {
        let denom = (p[j] - cs.b[j]).max(floor);
        if denom > 0.0 {
            barrier[j] / (2.0 * denom)
        } else {
            0.0
        }
    });
    Multipliers::from_stacked(&v)
}

/// Scales u along its ray so the tightest constraint is met with equality.
///
/// Returns `None` when some constraint cannot be met by scaling.
pub fn sinr_rescale(cs: &ConstraintSet, u: &DVector<f64>) -> Option<DVector<f64>> {
    let p = cs.a.tr_mul(u);
    let shift = cs.s * cs.q.sqrt() * u.norm();
    let mut t: f64 = 0.0;
    for j in 0..cs.len() {
        let denom = p[j] - shift;
        if !(denom > 0.0) {
            return None;
        }
        t = t.max(cs.b[j] / denom);
    }
    Some(u * t)
}
