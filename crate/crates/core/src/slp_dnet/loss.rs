//! Unsupervised batch losses and the dual objective used for training.

use nalgebra::{DMatrix, DVector};

use crate::channel_data::{upsilon, SystemConfig};
use crate::ci_core::{ci_residual_literal, ConstraintSet, Multipliers, Precoder, RobustGeometry};
use crate::error::{Error, Result};

/// Batch loss value with per-sample gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct LossEval {
    pub value: f64,
    pub grad_u: Vec<DVector<f64>>,
    /// Stacked [v1; v2] per sample.
    pub grad_mult: Vec<DVector<f64>>,
}

fn check_batch(u: &[DVector<f64>], phi: &[DMatrix<f64>], mult: &[Multipliers], gammas: &[f64]) -> Result<usize> {
    let n = u.len();
    if n == 0 || phi.len() != n || mult.len() != n || gammas.len() != n {
        return Err(Error::Dimension(format!(
            "batch sizes disagree: {} precoders, {} channels, {} multiplier sets, {} targets",
            n,
            phi.len(),
            mult.len(),
            gammas.len()
        )));
    }
    for (ui, (p, m)) in u.iter().zip(phi.iter().zip(mult)) {
        if ui.len() != p.nrows() || m.v1.len() != p.ncols() {
            return Err(Error::Dimension("precoder, channel and multiplier shapes disagree".into()));
        }
    }
    Ok(n)
}

/// Mean over the batch of
/// `||u||^2 + v1 . (phi^T Y u - phi^T u tan + sqrt(G n0)) - v2 . (phi^T Y u + phi^T u tan - sqrt(G n0))`
/// plus a precomputed weight penalty. `gammas` holds one SINR target per sample.
pub fn loss_nonrobust(
    u: &[DVector<f64>],
    phi: &[DMatrix<f64>],
    mult: &[Multipliers],
    gammas: &[f64],
    config: &SystemConfig,
    penalty: f64,
) -> Result<LossEval> {
    let n = check_batch(u, phi, mult, gammas)?;
    let inv = 1.0 / n as f64;
    let theta = config.theta();
    let t = theta.tan();
    let mut value = penalty;
    let mut grad_u = Vec::with_capacity(n);
    let mut grad_mult = Vec::with_capacity(n);
    for i in 0..n {
        let k = phi[i].ncols();
        let rot = upsilon(phi[i].nrows() / 2).transpose() * &phi[i];
        let p = Precoder::new(u[i].clone());
        let mut v = p.power();
        let mut g = &u[i] * 2.0;
        let mut gm = DVector::zeros(2 * k);
        for j in 0..k {
            let col = phi[i].column(j).into_owned();
            let (r1, r2) = ci_residual_literal(&col, &p, gammas[i], config.n0, theta);
            v += mult[i].v1[j] * r1 - mult[i].v2[j] * r2;
            // d r1/du = Y^T phi - tan phi, d r2/du = Y^T phi + tan phi
            g += (rot.column(j) - &col * t) * mult[i].v1[j] - (rot.column(j) + &col * t) * mult[i].v2[j];
            gm[j] = r1 * inv;
            gm[k + j] = -r2 * inv;
        }
        value += v * inv;
        grad_u.push(g * inv);
        grad_mult.push(gm);
    }
    Ok(LossEval { value, grad_u, grad_mult })
}

/// Mean over the batch of
/// `||u||^2 + sum_j v_j [ s^2 ||Q_j u||^2 - (sqrt(G n0) tan - phi_i^T Q_j u)^2 ]`
/// over both families, with the first family's matrix negated so the two
/// families bound the constructive region from opposite sides.
#[allow(clippy::too_many_arguments)]
pub fn loss_robust(
    u: &[DVector<f64>],
    phi: &[DMatrix<f64>],
    mult: &[Multipliers],
    geom: &RobustGeometry,
    gammas: &[f64],
    csi_error_bound: f64,
    config: &SystemConfig,
    penalty: f64,
) -> Result<LossEval> {
    let n = check_batch(u, phi, mult, gammas)?;
    let inv = 1.0 / n as f64;
    let t = config.tan_theta();
    let qhat1 = -&geom.q1;
    let mut value = penalty;
    let mut grad_u = Vec::with_capacity(n);
    let mut grad_mult = Vec::with_capacity(n);
    for i in 0..n {
        let k = phi[i].ncols();
        let c = (gammas[i] * config.n0).sqrt() * t;
        let mut v = u[i].norm_squared();
        let mut g = &u[i] * 2.0;
        let mut gm = DVector::zeros(2 * k);
        for (fam, (q, m)) in [(&qhat1, &mult[i].v1), (&geom.q2, &mult[i].v2)].into_iter().enumerate() {
            let qu = q * &u[i];
            let qtq_u = q.tr_mul(&qu);
            let a = q.tr_mul(&phi[i]);
            for j in 0..k {
                let slack = c - a.column(j).dot(&u[i]);
                let term = csi_error_bound * qu.norm_squared() - slack * slack;
                v += m[j] * term;
                g += (&qtq_u * (2.0 * csi_error_bound) + a.column(j) * (2.0 * slack)) * m[j];
                gm[fam * k + j] = term * inv;
            }
        }
        value += v * inv;
        grad_u.push(g * inv);
        grad_mult.push(gm);
    }
    Ok(LossEval { value, grad_u, grad_mult })
}

/// Negated dual objective at the given multipliers, with its gradient.
///
/// Equal to minus the nonrobust loss evaluated at the closed-form precoder
/// `A v / 2`, and to the exact conic dual when the set has a norm term.
pub fn dual_objective(cs: &ConstraintSet, mult: &DVector<f64>) -> (f64, DVector<f64>) {
    let (d, _) = cs.dual_value(mult);
    (-d, -cs.dual_gradient(mult))
}
