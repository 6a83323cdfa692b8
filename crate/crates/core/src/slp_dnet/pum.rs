//! One parameter-update block: an affine step followed by a learned
//! proximity correction, realized as a few damped Newton steps on
//! `1/2 ||v - z||^2 + rho * sum_j psi(h_j(v))`.
//!
//! `psi` is `-ln` continued below `tau` by its second-order Taylor expansion,
//! so every iterate is admissible and the objective stays convex.

use nalgebra::{DMatrix, DVector};

use crate::ci_core::ConstraintSet;
use crate::error::{Error, Result};

const ARMIJO: f64 = 1e-4;
const MAX_HALVINGS: usize = 30;

/// Extended logarithmic barrier and its first three derivatives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtendedLog {
    pub tau: f64,
}

impl ExtendedLog {
    pub fn value(&self, c: f64) -> f64 {
        let t = self.tau;
        if c >= t {
            -c.ln()
        } else {
            let e = c - t;
            -t.ln() - e / t + e * e / (2.0 * t * t)
        }
    }

    pub fn d1(&self, c: f64) -> f64 {
        let t = self.tau;
        if c >= t {
            -1.0 / c
        } else {
            -1.0 / t + (c - t) / (t * t)
        }
    }

    pub fn d2(&self, c: f64) -> f64 {
        let t = if c >= self.tau { c } else { self.tau };
        1.0 / (t * t)
    }

    pub fn d3(&self, c: f64) -> f64 {
        if c >= self.tau {
            -2.0 / (c * c * c)
        } else {
            0.0
        }
    }

    /// Partial derivative of `d1` with respect to `tau`.
    pub fn d1_tau(&self, c: f64) -> f64 {
        let t = self.tau;
        if c >= t {
            0.0
        } else {
            -2.0 * (c - t) / (t * t * t)
        }
    }

    /// Partial derivative of `d2` with respect to `tau`.
    pub fn d2_tau(&self, c: f64) -> f64 {
        let t = self.tau;
        if c >= t {
            0.0
        } else {
            -2.0 / (t * t * t)
        }
    }
}

/// Quantities at one iterate that the forward and backward passes share.
struct Local {
    /// Constraint gradients, one column per constraint.
    g: DMatrix<f64>,
    /// Hessian of the smoothed norm.
    n2: DMatrix<f64>,
    n: f64,
    p1: DVector<f64>,
    p2: DVector<f64>,
    p3: DVector<f64>,
    /// Sensitivities of p1 and p2 to tau.
    p1_tau: DVector<f64>,
    p2_tau: DVector<f64>,
}

impl Local {
    fn new(cs: &ConstraintSet, v: &DVector<f64>, psi: ExtendedLog) -> Self {
        let n = cs.norm_term(v);
        let q = cs.q;
        let ntil = v * (q / n);
        let dim = v.len();
        let n2 = (DMatrix::identity(dim, dim) - v * v.transpose() * (q / (n * n))) * (q / n);
        let h = cs.residuals(v);
        let mut g = cs.a.clone();
        if cs.s != 0.0 {
            for mut col in g.column_iter_mut() {
                col.axpy(-cs.s, &ntil, 1.0);
            }
        }
        Self {
            g,
            n2,
            n,
            p1: h.map(|c| psi.d1(c)),
            p2: h.map(|c| psi.d2(c)),
            p3: h.map(|c| psi.d3(c)),
            p1_tau: h.map(|c| psi.d1_tau(c)),
            p2_tau: h.map(|c| psi.d2_tau(c)),
        }
    }

    fn s1(&self) -> f64 {
        self.p1.sum()
    }

    /// The barrier part of the Hessian, without the factor rho.
    fn barrier_hessian(&self, s: f64) -> DMatrix<f64> {
        let mut scaled = self.g.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= self.p2[j];
        }
        let mut hb = scaled * self.g.transpose();
        if s != 0.0 {
            hb -= &self.n2 * (s * self.s1());
        }
        hb
    }

    /// Third-derivative tensor of the smoothed norm contracted with `a`, `b`.
    fn norm_third(&self, v: &DVector<f64>, q: f64, a: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
        let n3 = self.n.powi(3);
        let va = v.dot(a);
        let vb = v.dot(b);
        v * (-(q * q / n3) * a.dot(b) + 3.0 * q.powi(3) * va * vb / self.n.powi(5)) - (a * vb + b * va) * (q * q / n3)
    }
}

fn objective(cs: &ConstraintSet, v: &DVector<f64>, z: &DVector<f64>, rho: f64, psi: ExtendedLog) -> f64 {
    0.5 * (v - z).norm_squared() + rho * cs.residuals(v).iter().map(|&c| psi.value(c)).sum::<f64>()
}

#[derive(Debug, Clone)]
struct Step {
    v: DVector<f64>,
    d: DVector<f64>,
    size: f64,
    hessian: DMatrix<f64>,
}

/// Record of the unrolled Newton iterations.
#[derive(Debug, Clone)]
pub struct ProxTape {
    steps: Vec<Step>,
}

impl ProxTape {
    pub fn step_sizes(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.size).collect()
    }
}

fn solve_spd(h: &DMatrix<f64>, rhs: &DVector<f64>) -> Result<DVector<f64>> {
    match h.clone().cholesky() {
        Some(c) => Ok(c.solve(rhs)),
        None => h.clone().lu().solve(rhs).ok_or(Error::Singular { condition: f64::INFINITY }),
    }
}

/// Runs `steps` damped Newton iterations from `v0`.
///
/// Step sizes come from Armijo backtracking and are treated as constants by
/// [`prox_backward`].
pub fn prox_forward(
    cs: &ConstraintSet,
    v0: &DVector<f64>,
    z: &DVector<f64>,
    rho: f64,
    tau: f64,
    steps: usize,
) -> Result<(DVector<f64>, ProxTape)> {
    let psi = ExtendedLog { tau };
    let mut v = v0.clone();
    let mut tape = Vec::with_capacity(steps);
    for _ in 0..steps {
        let loc = Local::new(cs, &v, psi);
        let grad = &v - z + &loc.g * &loc.p1 * rho;
        let hessian = DMatrix::identity(v.len(), v.len()) + loc.barrier_hessian(cs.s) * rho;
        let d = -solve_spd(&hessian, &grad)?;
        let f0 = objective(cs, &v, z, rho, psi);
        let slope = grad.dot(&d);
        let mut size = 1.0;
        for _ in 0..MAX_HALVINGS {
            if objective(cs, &(&v + &d * size), z, rho, psi) <= f0 + ARMIJO * size * slope {
                break;
            }
            size *= 0.5;
        }
        let next = &v + &d * size;
        tape.push(Step { v, d, size, hessian });
        v = next;
    }
    Ok((v, ProxTape { steps: tape }))
}

/// Gradients of a scalar loss with respect to the prox inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxGrads {
    pub v0: DVector<f64>,
    pub z: DVector<f64>,
    pub rho: f64,
    pub tau: f64,
}

/// Reverse pass through [`prox_forward`] at fixed step sizes.
pub fn prox_backward(cs: &ConstraintSet, tape: &ProxTape, rho: f64, tau: f64, v_bar: DVector<f64>) -> Result<ProxGrads> {
    let psi = ExtendedLog { tau };
    let s = cs.s;
    let q = cs.q;
    let mut v_bar = v_bar;
    let mut z_bar = DVector::zeros(v_bar.len());
    let mut rho_bar = 0.0;
    let mut tau_bar = 0.0;
    for step in tape.steps.iter().rev() {
        let loc = Local::new(cs, &step.v, psi);
        let d_bar = &v_bar * step.size;
        let w = solve_spd(&step.hessian, &d_bar)?;
        let d = &step.d;
        z_bar += &w;
        let hb = loc.barrier_hessian(s);
        rho_bar -= w.dot(&(&loc.g * &loc.p1)) + w.dot(&(&hb * d));

        // Gradient of w^T Hb(v) d with respect to v.
        let gw = loc.g.tr_mul(&w);
        let gd = loc.g.tr_mul(d);
        let mut t_sens = gw.dot(&loc.p1_tau) + (0..cs.len()).map(|j| loc.p2_tau[j] * gw[j] * gd[j]).sum::<f64>();
        if s != 0.0 {
            t_sens -= s * w.dot(&(&loc.n2 * d)) * loc.p1_tau.sum();
        }
        tau_bar -= rho * t_sens;
        let mut dphi = DVector::zeros(d.len());
        for j in 0..cs.len() {
            dphi.axpy(loc.p3[j] * gw[j] * gd[j], &loc.g.column(j), 1.0);
        }
        if s != 0.0 {
            let n2w = &loc.n2 * &w;
            let n2d = &loc.n2 * d;
            let sum_p2gd: f64 = (0..cs.len()).map(|j| loc.p2[j] * gd[j]).sum();
            let sum_p2gw: f64 = (0..cs.len()).map(|j| loc.p2[j] * gw[j]).sum();
            dphi -= n2w * (s * sum_p2gd) + n2d * (s * sum_p2gw);
            dphi -= &loc.g * &loc.p2 * (s * w.dot(&(&loc.n2 * d)));
            dphi -= loc.norm_third(&step.v, q, &w, d) * (s * loc.s1());
        }
        v_bar = &v_bar - &d_bar - dphi * rho;
    }
    Ok(ProxGrads { v0: v_bar, z: z_bar, rho: rho_bar, tau: tau_bar })
}

/// Barrier duals 2 rho (-psi'(h(v))), nonnegative by construction.
pub fn barrier_multipliers(cs: &ConstraintSet, v: &DVector<f64>, rho: f64, tau: f64) -> DVector<f64> {
    if rho == 0.0 {
        return DVector::zeros(cs.len());
    }
    let psi = ExtendedLog { tau };
    cs.residuals(v).map(|c| -2.0 * rho * psi.d1(c))
}

/// Reverse pass through [`barrier_multipliers`]: returns (v_bar, rho_bar, tau_bar).
pub fn barrier_multipliers_backward(
    cs: &ConstraintSet,
    v: &DVector<f64>,
    rho: f64,
    tau: f64,
    mult_bar: &DVector<f64>,
) -> (DVector<f64>, f64, f64) {
    if rho == 0.0 {
        return (DVector::zeros(v.len()), 0.0, 0.0);
    }
    let psi = ExtendedLog { tau };
    let loc = Local::new(cs, v, psi);
    let rho_bar = -2.0 * loc.p1.dot(mult_bar);
    let tau_bar = -2.0 * rho * loc.p1_tau.dot(mult_bar);
    let h_bar = mult_bar.component_mul(&loc.p2) * (-2.0 * rho);
    (&loc.g * h_bar, rho_bar, tau_bar)
}

/// Everything one block produced for one sample.
#[derive(Debug, Clone)]
pub struct BlockState {
    pub u_in: DVector<f64>,
    pub u_out: DVector<f64>,
    pub multipliers: DVector<f64>,
    pub gamma: f64,
    pub lambda: f64,
    pub weight: f64,
    pub rho: f64,
    pub kappa: f64,
    pub tau: f64,
    tape: Option<ProxTape>,
}

impl BlockState {
    pub fn tape(&self) -> Option<&ProxTape> {
        self.tape.as_ref()
    }
}

/// z = (1 - 2 gamma) u + gamma lambda 1, rho = gamma w, tau = kappa rho.
pub fn pum_step(
    cs: &ConstraintSet,
    u_in: &DVector<f64>,
    gamma: f64,
    lambda: f64,
    weight: f64,
    kappa: f64,
    newton_steps: usize,
) -> Result<BlockState> {
    let z = u_in * (1.0 - 2.0 * gamma) + DVector::from_element(u_in.len(), gamma * lambda);
    let rho = gamma * weight;
    let tau = kappa * rho;
    let (u_out, tape) = if rho > 0.0 {
        let (v, tape) = prox_forward(cs, u_in, &z, rho, tau, newton_steps)?;
        (v, Some(tape))
    } else {
        (z, None)
    };
    let multipliers = barrier_multipliers(cs, &u_out, rho, tau);
    Ok(BlockState { u_in: u_in.clone(), u_out, multipliers, gamma, lambda, weight, rho, kappa, tau, tape })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepGrads {
    pub u_in: DVector<f64>,
    pub gamma: f64,
    pub lambda: f64,
    pub weight: f64,
}

/// Reverse pass through [`pum_step`].
pub fn pum_step_backward(
    cs: &ConstraintSet,
    st: &BlockState,
    u_out_bar: &DVector<f64>,
    mult_bar: &DVector<f64>,
) -> Result<StepGrads> {
    let (mv, rho_from_mult, tau_from_mult) = barrier_multipliers_backward(cs, &st.u_out, st.rho, st.tau, mult_bar);
    let v_bar = u_out_bar + mv;
    let (u_bar_direct, z_bar, rho_bar) = match &st.tape {
        Some(tape) => {
            let g = prox_backward(cs, tape, st.rho, st.tau, v_bar)?;
            (g.v0, g.z, g.rho + rho_from_mult + st.kappa * (g.tau + tau_from_mult))
        }
        None => (DVector::zeros(v_bar.len()), v_bar, rho_from_mult + st.kappa * tau_from_mult),
    };
    let u_in = u_bar_direct + &z_bar * (1.0 - 2.0 * st.gamma);
    let gamma = z_bar.dot(&(st.u_in.map(|x| -2.0 * x).add_scalar(st.lambda))) + st.weight * rho_bar;
    let lambda = st.gamma * z_bar.sum();
    let weight = st.gamma * rho_bar;
    Ok(StepGrads { u_in, gamma, lambda, weight })
}
