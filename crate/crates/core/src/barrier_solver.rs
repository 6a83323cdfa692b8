//! Log-barrier interior-point solvers for the nonrobust and robust
//! power-minimization problems.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::channel_data::SystemConfig;
use crate::ci_core::{ConstraintSet, Multipliers, Precoder, RobustGeometry, RobustSign};
use crate::error::{Error, Result};

const ARMIJO_C: f64 = 1e-4;
const SHRINK: f64 = 0.5;
const MIN_STEP: f64 = 1e-20;
/// Feasibility tolerance on the exact residuals for an `Optimal` verdict.
pub const FEASIBILITY_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub barrier_init: f64,
    pub barrier_decay: f64,
    pub max_outer: usize,
    pub max_inner: usize,
    pub inner_tol: f64,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self { epsilon: 1e-6, barrier_init: 1.0, barrier_decay: 0.2, max_outer: 50, max_inner: 100, inner_tol: 1e-8 }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.barrier_decay > 0.0 && self.barrier_decay < 1.0) {
            return Err(Error::Config(format!("barrier decay {} must lie in (0, 1)", self.barrier_decay)));
        }
        if !(self.epsilon > 0.0) || !(self.barrier_init > 0.0) || self.max_outer == 0 || self.max_inner == 0 {
            return Err(Error::Config("epsilon, barrier_init, max_outer and max_inner must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveResult {
    pub precoder: Precoder,
    /// (barrier updates, total Newton steps).
    pub iterations: (usize, usize),
    /// m * barrier weight at exit, in units normalized by the largest target.
    pub duality_gap_estimate: f64,
    pub multipliers: Multipliers,
    pub status: SolveStatus,
}

/// A smooth objective with an open domain; `None` means outside the domain.
pub(crate) trait Barrier {
    fn value(&self, x: &DVector<f64>) -> Option<f64>;
    fn derivatives(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>);
}

pub(crate) struct NewtonOutcome {
    pub x: DVector<f64>,
    pub steps: usize,
    pub converged: bool,
    /// Objective after every accepted step; only inspected by the monotonicity test.
    #[cfg_attr(not(test), allow(dead_code))]
    pub values: Vec<f64>,
}

/// Damped Newton with Armijo backtracking until the gradient norm drops below
/// `tol`; gradient descent when the Hessian is not positive definite. `stop`
/// may end the run early.
pub(crate) fn newton_minimize(
    f: &impl Barrier,
    mut x: DVector<f64>,
    max_steps: usize,
    tol: f64,
    stop: impl Fn(&DVector<f64>) -> bool,
) -> NewtonOutcome {
    let mut fx = f.value(&x).expect("Newton start must be inside the domain");
    let mut values = vec![fx];
    for step in 0..max_steps {
        let (g, h) = f.derivatives(&x);
        let dir = match h.cholesky() {
            Some(ch) => -ch.solve(&g),
            None => -&g,
        };
        let slope = g.dot(&dir);
        // the second test catches a predicted decrease below the resolution of f
        if g.norm() <= tol || -slope / 2.0 <= f64::EPSILON * fx.abs().max(1.0) {
            return NewtonOutcome { x, steps: step, converged: true, values };
        }
        let mut s = 1.0;
        loop {
            let trial = &x + &dir * s;
            if let Some(ft) = f.value(&trial) {
                if ft <= fx + ARMIJO_C * s * slope {
                    x = trial;
                    fx = ft;
                    break;
                }
            }
            s *= SHRINK;
            if s < MIN_STEP {
                // no representable decrease left
                return NewtonOutcome { x, steps: step + 1, converged: true, values };
            }
        }
        values.push(fx);
        if stop(&x) {
            return NewtonOutcome { x, steps: step + 1, converged: true, values };
        }
    }
    NewtonOutcome { x, steps: max_steps, converged: false, values }
}

/// Gradient and Hessian of the smoothed norm term sqrt(q ||u||^2 + eps).
fn norm_derivatives(cs: &ConstraintSet, u: &DVector<f64>) -> (f64, DVector<f64>, DMatrix<f64>) {
    let n = cs.norm_term(u);
    let grad = u * (cs.q / n);
    let dim = u.len();
    let hess = (DMatrix::identity(dim, dim) - u * u.transpose() * (cs.q / (n * n))) * (cs.q / n);
    (n, grad, hess)
}

/// ||u||^2 - weight * sum ln h_j(u).
struct PhaseTwo<'a> {
    cs: &'a ConstraintSet,
    weight: f64,
}

impl Barrier for PhaseTwo<'_> {
    fn value(&self, u: &DVector<f64>) -> Option<f64> {
        let h = self.cs.residuals(u);
        if h.iter().any(|&r| !(r > 0.0)) {
            return None;
        }
        Some(u.norm_squared() - self.weight * h.iter().map(|r| r.ln()).sum::<f64>())
    }

    fn derivatives(&self, u: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let cs = self.cs;
        let h = cs.residuals(u);
        let (_, dn, d2n) = norm_derivatives(cs, u);
        let dim = u.len();
        let mut g = u * 2.0;
        let mut hess = DMatrix::identity(dim, dim) * 2.0;
        let mut inv_sum = 0.0;
        for j in 0..cs.len() {
            let gj = cs.a.column(j) - &dn * cs.s;
            g -= &gj * (self.weight / h[j]);
            hess += &gj * gj.transpose() * (self.weight / (h[j] * h[j]));
            inv_sum += 1.0 / h[j];
        }
        hess += d2n * (self.weight * cs.s * inv_sum);
        (g, hess)
    }
}

/// Phase I over x = (d, sigma): sigma - weight * [sum ln(p_j(d) + sigma) + ln(1 - ||d||^2)],
/// where p_j(d) = a_j^T d - s ||Q d||.
struct PhaseOne<'a> {
    cs: &'a ConstraintSet,
    weight: f64,
}

impl PhaseOne<'_> {
    fn split(x: &DVector<f64>) -> (DVector<f64>, f64) {
        let n = x.len() - 1;
        (x.rows(0, n).into_owned(), x[n])
    }

    fn slacks(&self, d: &DVector<f64>, sigma: f64) -> DVector<f64> {
        let shift = self.cs.s * self.cs.norm_term(d);
        self.cs.a.tr_mul(d).map(|p| p - shift + sigma)
    }
}

impl Barrier for PhaseOne<'_> {
    fn value(&self, x: &DVector<f64>) -> Option<f64> {
        let (d, sigma) = Self::split(x);
        let r = self.slacks(&d, sigma);
        let w = 1.0 - d.norm_squared();
        if w <= 0.0 || r.iter().any(|&v| !(v > 0.0)) {
            return None;
        }
        Some(sigma - self.weight * (r.iter().map(|v| v.ln()).sum::<f64>() + w.ln()))
    }

    fn derivatives(&self, x: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let cs = self.cs;
        let (d, sigma) = Self::split(x);
        let n = d.len();
        let r = self.slacks(&d, sigma);
        let (_, dn, d2n) = norm_derivatives(cs, &d);
        let mut g = DVector::zeros(n + 1);
        g[n] = 1.0;
        let mut hess = DMatrix::zeros(n + 1, n + 1);
        let mut inv_sum = 0.0;
        for j in 0..cs.len() {
            let mut grad_r = DVector::zeros(n + 1);
            grad_r.rows_mut(0, n).copy_from(&(cs.a.column(j) - &dn * cs.s));
            grad_r[n] = 1.0;
            g -= &grad_r * (self.weight / r[j]);
            hess += &grad_r * grad_r.transpose() * (self.weight / (r[j] * r[j]));
            inv_sum += 1.0 / r[j];
        }
        let w = 1.0 - d.norm_squared();
        let mut top = hess.view_mut((0, 0), (n, n));
        top += d2n * (self.weight * cs.s * inv_sum);
        top += (&d * d.transpose() * (4.0 / (w * w)) + DMatrix::<f64>::identity(n, n) * (2.0 / w)) * self.weight;
        let mut gd = g.rows_mut(0, n);
        gd += &d * (2.0 * self.weight / w);
        (g, hess)
    }
}

/// Finds a strictly feasible point of the normalized problem, or `None`.
fn phase_one(cs: &ConstraintSet, cfg: &SolverConfig, inner_count: &mut usize) -> Option<DVector<f64>> {
    let dim = cs.dim();
    let mut x = DVector::zeros(dim + 1);
    x[dim] = 1.0;
    let mut weight = cfg.barrier_init;
    let m = (cs.len() + 1) as f64;
    let mut direction = None;
    for _ in 0..cfg.max_outer {
        let obj = PhaseOne { cs, weight };
        let out = newton_minimize(&obj, x, cfg.max_inner, cfg.inner_tol, |x| x[dim] < 0.0);
        *inner_count += out.steps;
        x = out.x;
        if x[dim] < 0.0 {
            direction = Some(x.rows(0, dim).into_owned());
            break;
        }
        if m * weight <= cfg.epsilon {
            break;
        }
        weight *= cfg.barrier_decay;
    }
    let d = direction?;
    let shift = cs.s * cs.q.sqrt() * d.norm();
    let slack = cs.a.tr_mul(&d).map(|p| p - shift).min();
    if !(slack > 0.0) {
        return None;
    }
    let mut t = 2.0 * cs.b.max().max(1e-12) / slack;
    for _ in 0..200 {
        let u = &d * t;
        if cs.residuals(&u).iter().all(|&r| r > 0.0) {
            return Some(u);
        }
        t *= 2.0;
    }
    None
}

/// Minimum-power point of an arbitrary constraint set.
pub fn solve_constraints(cs: &ConstraintSet, cfg: &SolverConfig) -> Result<SolveResult> {
    cfg.validate()?;
    let dim = cs.dim();
    let k = cs.users();
    let scale = cs.b.max();
    if !(scale > 0.0) {
        return Err(Error::Config("at least one SINR target must be positive".into()));
    }
    let norm = cs.scaled_rhs(scale);
    let mut inner = 0;
    let Some(mut u) = phase_one(&norm, cfg, &mut inner) else {
        return Ok(SolveResult {
            precoder: Precoder::zeros(dim),
            iterations: (0, inner),
            duality_gap_estimate: f64::INFINITY,
            multipliers: Multipliers::zeros(k),
            status: SolveStatus::Infeasible,
        });
    };
    let m = norm.len() as f64;
    let mut weight = cfg.barrier_init;
    let mut outer = 0;
    let mut converged = false;
    let mut all_inner_converged = true;
    while outer < cfg.max_outer {
        let out = newton_minimize(&PhaseTwo { cs: &norm, weight }, u, cfg.max_inner, cfg.inner_tol, |_| false);
        inner += out.steps;
        all_inner_converged &= out.converged;
        u = out.x;
        outer += 1;
        if m * weight <= cfg.epsilon {
            converged = true;
            break;
        }
        weight *= cfg.barrier_decay;
    }
    let h = norm.residuals(&u);
    let duals = h.map(|r| weight / r) * scale;
    let u = u * scale;
    let feasible = cs.exact_residuals(&u).iter().all(|&r| r >= -FEASIBILITY_TOL * scale.max(1.0));
    let gap = m * weight;
    let status = if converged && all_inner_converged && feasible && gap <= 10.0 * cfg.epsilon {
        SolveStatus::Optimal
    } else {
        SolveStatus::MaxIterations
    };
    Ok(SolveResult {
        precoder: Precoder::new(u),
        iterations: (outer, inner),
        duality_gap_estimate: gap,
        multipliers: Multipliers::from_stacked(&duals)?,
        status,
    })
}

/// Nonrobust minimum-power precoder under per-user constructive-interference constraints.
pub fn solve_slp(phi: &DMatrix<f64>, gammas: &[f64], config: &SystemConfig, cfg: &SolverConfig) -> Result<SolveResult> {
    check_dims(phi, gammas, config)?;
    solve_constraints(&ConstraintSet::nonrobust(phi, gammas, config.n0, config.theta()), cfg)
}

/// Robust variant with the worst-case norm penalty on both constraint families.
pub fn solve_robust_slp(
    phi: &DMatrix<f64>,
    gammas: &[f64],
    geom: &RobustGeometry,
    csi_error_bound: f64,
    config: &SystemConfig,
    cfg: &SolverConfig,
    sign: RobustSign,
) -> Result<SolveResult> {
    check_dims(phi, gammas, config)?;
    if geom.q1.nrows() != phi.nrows() {
        return Err(Error::Dimension("robust geometry does not match the antenna count".into()));
    }
    if !(csi_error_bound >= 0.0) {
        return Err(Error::Config(format!("CSI error bound {csi_error_bound} must be non-negative")));
    }
    let mut cs = ConstraintSet::robust(phi, gammas, config.n0, config.theta(), csi_error_bound, sign);
    cs.q = geom.q();
    solve_constraints(&cs, cfg)
}

fn check_dims(phi: &DMatrix<f64>, gammas: &[f64], config: &SystemConfig) -> Result<()> {
    if phi.nrows() != 2 * config.m || phi.ncols() != config.k || gammas.len() != config.k {
        return Err(Error::Dimension(format!(
            "phi is {}x{} with {} targets, config expects {}x{}",
            phi.nrows(),
            phi.ncols(),
            gammas.len(),
            2 * config.m,
            config.k
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel_data::build_dataset;
    use crate::ci_core::{ci_residual, precoder_from_multipliers};
    use std::f64::consts::PI;

    fn instance(m: usize, k: usize, seed: u64) -> DMatrix<f64> {
        build_dataset(&SystemConfig::new(m, k), 1, seed, (0.0, 45.0)).unwrap().samples[0].phi.clone()
    }

    /// Projected gradient ascent on the dual box QP max_{l >= 0} -||A l||^2/4 + b^T l.
    fn dual_oracle(cs: &ConstraintSet, iters: usize) -> f64 {
        let lip = cs.a.clone().svd(false, false).singular_values.max().powi(2) / 2.0;
        let step = 1.0 / lip;
        let mut l = DVector::zeros(cs.len());
        for _ in 0..iters {
            let grad = &cs.b - cs.a.tr_mul(&(&cs.a * &l)) * 0.5;
            let next = (&l + grad * step).map(|x| x.max(0.0));
            let done = (&next - &l).norm() < 1e-15 * (1.0 + l.norm());
            l = next;
            if done {
                break;
            }
        }
        (&cs.a * &l * 0.5).norm_squared()
    }

    #[test]
    fn single_user_analytic_optimum() {
        let cfg = SystemConfig::new(1, 1);
        let phi = DMatrix::from_column_slice(2, 1, &[1.0, 0.0]);
        let res = solve_slp(&phi, &[1.0], &cfg, &SolverConfig::default()).unwrap();
        assert_eq!(res.status, SolveStatus::Optimal);
        assert!((res.precoder.u() - DVector::from_column_slice(&[1.0, 0.0])).norm() < 1e-6);
        assert!((res.precoder.power() - 1.0).abs() < 1e-6);
        // a coarse grid search over the plane agrees
        let mut best = f64::INFINITY;
        for i in 0..=400 {
            for j in 0..=400 {
                let u = DVector::from_column_slice(&[i as f64 * 0.005, -1.0 + j as f64 * 0.005]);
                let g = ci_residual(&phi.column(0).into_owned(), &Precoder::new(u.clone()), 1.0, 1.0, PI / 4.0);
                if g >= 0.0 {
                    best = best.min(u.norm_squared());
                }
            }
        }
        assert!(res.precoder.power() <= best + 1e-6 && best - res.precoder.power() < 0.011);
    }

    #[test]
    fn single_user_homogeneity() {
        let cfg = SystemConfig::new(3, 1);
        let phi = instance(3, 1, 4);
        let a = solve_slp(&phi, &[2.0], &cfg, &SolverConfig::default()).unwrap();
        let b = solve_slp(&phi, &[8.0], &cfg, &SolverConfig::default()).unwrap();
        assert!((b.precoder.u() - a.precoder.u() * 2.0).norm() < 1e-6 * b.precoder.u().norm());
        assert!((b.precoder.power() / a.precoder.power() - 4.0).abs() < 1e-6);
        let analytic = 2.0 / phi.norm_squared();
        assert!((a.precoder.power() - analytic).abs() < 1e-6 * analytic);
    }

    #[test]
    fn matches_dual_oracle_and_satisfies_kkt() {
        let cfg = SystemConfig::new(2, 2);
        for seed in 0..10 {
            let phi = instance(2, 2, seed);
            let gammas = [10.0, 10.0];
            let res = solve_slp(&phi, &gammas, &cfg, &SolverConfig::default()).unwrap();
            assert_eq!(res.status, SolveStatus::Optimal);
            let cs = ConstraintSet::nonrobust(&phi, &gammas, 1.0, cfg.theta());
            let oracle = dual_oracle(&cs, 1_000_000);
            assert!((res.precoder.power() - oracle).abs() <= 0.01 * oracle, "{} vs {oracle}", res.precoder.power());
            assert!(res.duality_gap_estimate <= 1e-5);
            let u = res.precoder.u();
            let stationarity = u * 2.0 - &cs.a * res.multipliers.stacked();
            assert!(stationarity.norm() <= 1e-5 * (1.0 + u.norm()), "{}", stationarity.norm());
            let rebuilt = precoder_from_multipliers(&phi, &res.multipliers, cfg.theta());
            assert!((rebuilt.u() - u).norm() <= 0.02 * u.norm());
        }
    }

    #[test]
    fn barrier_objective_never_increases() {
        let phi = instance(2, 2, 3);
        let cs = ConstraintSet::nonrobust(&phi, &[1.0, 1.0], 1.0, PI / 4.0);
        let mut inner = 0;
        let u0 = phase_one(&cs, &SolverConfig::default(), &mut inner).unwrap();
        let out = newton_minimize(&PhaseTwo { cs: &cs, weight: 0.1 }, u0, 100, 1e-10, |_| false);
        for w in out.values.windows(2) {
            assert!(w[1] <= w[0] + 1e-12);
        }
    }

    #[test]
    fn deterministic() {
        let cfg = SystemConfig::new(4, 4);
        let phi = instance(4, 4, 9);
        let a = solve_slp(&phi, &[30.0; 4], &cfg, &SolverConfig::default()).unwrap();
        let b = solve_slp(&phi, &[30.0; 4], &cfg, &SolverConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn robust_reduces_and_grows() {
        let cfg = SystemConfig::new(2, 2);
        let geom = RobustGeometry::new(2, cfg.theta());
        for seed in 0..5 {
            let phi = instance(2, 2, 50 + seed);
            let gammas = [10.0, 10.0];
            let base = solve_slp(&phi, &gammas, &cfg, &SolverConfig::default()).unwrap().precoder.power();
            let zero = solve_robust_slp(&phi, &gammas, &geom, 0.0, &cfg, &SolverConfig::default(), RobustSign::Corrected).unwrap();
            assert!((zero.precoder.power() - base).abs() <= 0.005 * base);
            let mut last = zero.precoder.power();
            for eb in [1e-4, 4e-4, 1e-3] {
                let r = solve_robust_slp(&phi, &gammas, &geom, eb, &cfg, &SolverConfig::default(), RobustSign::Corrected).unwrap();
                assert_eq!(r.status, SolveStatus::Optimal);
                assert!(r.precoder.power() >= last * (1.0 - 1e-9));
                last = r.precoder.power();
            }
        }
    }

    #[test]
    fn huge_error_bound_is_infeasible() {
        let cfg = SystemConfig::new(2, 2);
        let geom = RobustGeometry::new(2, cfg.theta());
        // every ||a_j|| is below s * sqrt(q), so no direction satisfies any constraint
        let phi = DMatrix::from_column_slice(4, 2, &[0.5, 0.2, -0.3, 0.1, -0.4, 0.6, 0.2, 0.3]);
        let r = solve_robust_slp(&phi, &[10.0, 10.0], &geom, 10.0, &cfg, &SolverConfig::default(), RobustSign::Corrected).unwrap();
        assert_eq!(r.status, SolveStatus::Infeasible);
    }

    #[test]
    fn bad_inputs() {
        let cfg = SystemConfig::new(2, 2);
        let phi = instance(2, 2, 1);
        assert!(matches!(solve_slp(&phi, &[1.0], &cfg, &SolverConfig::default()), Err(Error::Dimension(_))));
        let bad = SolverConfig { barrier_decay: 1.5, ..SolverConfig::default() };
        assert!(matches!(solve_slp(&phi, &[1.0, 1.0], &cfg, &bad), Err(Error::Config(_))));
    }
}
