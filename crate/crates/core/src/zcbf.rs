//! Zero-CBF chains for stochastic control-affine systems, the affine control
//! constraints they induce, and the minimum-deviation QP filter.
//!
//! A chain starts from `h_0 = h` and lifts
//! `h_{k+1} = ∂h_k/∂x · g + ½ tr(σᵀBᵀ ∂²h_k/∂x² Bσ) + h_k`
//! until the control enters, i.e. `∂h_r/∂x · B ≠ 0`.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numeric::{fd_gradient, fd_jacobian};
use crate::sde::ControlAffine;

/// Central-difference step for barriers without closed-form derivatives.
pub const FD_STEP: f64 = 1e-5;
/// `‖∂h_k/∂x · B‖` below this counts as "control absent".
pub const DEGREE_TOL: f64 = 1e-9;
pub const DEFAULT_DEGREE_CAP: usize = 4;
/// Feasibility tolerance of filtered controls.
pub const FEASIBILITY_TOL: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ZcbfError {
    #[error("barrier lacks {0} and finite differences are disabled")]
    Capability(&'static str),
    #[error("degree cap exceeded: control absent up to level {cap}")]
    DegreeCapExceeded { cap: usize },
    #[error("safety constraints infeasible; conflicting constraints {conflicting:?}")]
    SafetyInfeasible { conflicting: Vec<ConstraintId> },
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("QP solver stalled after {0} iterations")]
    Stalled(usize),
}

/// A scalar barrier with first and second derivatives.
pub trait Barrier: Send + Sync {
    fn value(&self, x: &[f64]) -> f64;
    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>, ZcbfError>;
    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>, ZcbfError>;
}

/// Circular keep-out region on two consecutive position coordinates:
/// `h = (x − x_c)² + (y − y_c)² − (r_c + D_s)²`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CircleBarrier {
    pub center: [f64; 2],
    pub radius: f64,
    pub margin: f64,
    pub state_dim: usize,
    /// Index of the x coordinate in the state vector.
    pub offset: usize,
}

impl CircleBarrier {
    pub fn new(center: [f64; 2], radius: f64, margin: f64, state_dim: usize) -> Self {
        Self { center, radius, margin, state_dim, offset: 0 }
    }
}

impl Barrier for CircleBarrier {
    fn value(&self, x: &[f64]) -> f64 {
        let dx = x[self.offset] - self.center[0];
        let dy = x[self.offset + 1] - self.center[1];
        let r = self.radius + self.margin;
        dx * dx + dy * dy - r * r
    }

    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>, ZcbfError> {
        let mut g = DVector::zeros(self.state_dim);
        g[self.offset] = 2.0 * (x[self.offset] - self.center[0]);
        g[self.offset + 1] = 2.0 * (x[self.offset + 1] - self.center[1]);
        Ok(g)
    }

    fn hessian(&self, _x: &[f64]) -> Result<DMatrix<f64>, ZcbfError> {
        let mut h = DMatrix::zeros(self.state_dim, self.state_dim);
        h[(self.offset, self.offset)] = 2.0;
        h[(self.offset + 1, self.offset + 1)] = 2.0;
        Ok(h)
    }
}

type ValueFn = dyn Fn(&[f64]) -> f64 + Send + Sync;
type GradFn = dyn Fn(&[f64]) -> DVector<f64> + Send + Sync;
type HessFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// Closure-backed barrier; missing derivatives fall back to central
/// differences unless disabled.
#[derive(Clone)]
pub struct FnBarrier {
    value: Arc<ValueFn>,
    gradient: Option<Arc<GradFn>>,
    hessian: Option<Arc<HessFn>>,
    finite_differences: bool,
}

impl fmt::Debug for FnBarrier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("FnBarrier")
            .field("analytic_gradient", &self.gradient.is_some())
            .field("analytic_hessian", &self.hessian.is_some())
            .field("finite_differences", &self.finite_differences)
            .finish()
    }
}

impl FnBarrier {
    pub fn new(value: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        Self { value: Arc::new(value), gradient: None, hessian: None, finite_differences: true }
    }

    pub fn with_gradient(mut self, g: impl Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static) -> Self {
        self.gradient = Some(Arc::new(g));
        self
    }

    pub fn with_hessian(mut self, h: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.hessian = Some(Arc::new(h));
        self
    }

    pub fn finite_differences(mut self, enabled: bool) -> Self {
        self.finite_differences = enabled;
        self
    }
}

impl Barrier for FnBarrier {
    fn value(&self, x: &[f64]) -> f64 {
        (self.value)(x)
    }

    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>, ZcbfError> {
        match &self.gradient {
            Some(g) => Ok(g(x)),
            None if self.finite_differences => Ok(fd_gradient(&|p| (self.value)(p), x, FD_STEP)),
            None => Err(ZcbfError::Capability("gradient")),
        }
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>, ZcbfError> {
        match &self.hessian {
            Some(h) => Ok(h(x)),
            None if self.finite_differences => {
                if let Some(g) = &self.gradient {
                    Ok(fd_jacobian(&|p| g(p), x, FD_STEP, true))
                } else {
                    Ok(fd_hessian_of_value(&|p| (self.value)(p), x, 1e-4))
                }
            }
            None => Err(ZcbfError::Capability("hessian")),
        }
    }
}

fn fd_hessian_of_value(f: &dyn Fn(&[f64]) -> f64, x: &[f64], step: f64) -> DMatrix<f64> {
    let n = x.len();
    let mut p = x.to_vec();
    let mut h = DMatrix::zeros(n, n);
    let f0 = f(x);
    for i in 0..n {
        for j in i..n {
            let val = if i == j {
                p[i] = x[i] + step;
                let fp = f(&p);
                p[i] = x[i] - step;
                let fm = f(&p);
                p[i] = x[i];
                (fp - 2.0 * f0 + fm) / (step * step)
            } else {
                let mut eval = |si: f64, sj: f64| {
                    p[i] = x[i] + si * step;
                    p[j] = x[j] + sj * step;
                    let v = f(&p);
                    p[i] = x[i];
                    p[j] = x[j];
                    v
                };
                (eval(1.0, 1.0) - eval(1.0, -1.0) - eval(-1.0, 1.0) + eval(-1.0, -1.0)) / (4.0 * step * step)
            };
            h[(i, j)] = val;
            h[(j, i)] = val;
        }
    }
    h
}

/// `½ tr(σᵀBᵀ H Bσ)` for Hessian `H` at state `x`.
pub fn ito_correction(dynamics: &dyn ControlAffine, x: &[f64], hessian: &DMatrix<f64>) -> f64 {
    let b = dynamics.control_matrix(x);
    let bs = &b * dynamics.noise_cov();
    0.5 * (bs.transpose() * hessian * bs).trace()
}

/// One level up the chain.
#[derive(Clone)]
pub struct LiftedBarrier {
    inner: Arc<dyn Barrier>,
    dynamics: Arc<dyn ControlAffine>,
}

impl LiftedBarrier {
    fn drift_jacobian(&self, x: &[f64]) -> DMatrix<f64> {
        self.dynamics.drift_jacobian(x).unwrap_or_else(|| fd_jacobian(&|p| self.dynamics.drift(p), x, FD_STEP, false))
    }

    fn correction(&self, x: &[f64]) -> Result<f64, ZcbfError> {
        Ok(ito_correction(self.dynamics.as_ref(), x, &self.inner.hessian(x)?))
    }
}

impl Barrier for LiftedBarrier {
    fn value(&self, x: &[f64]) -> f64 {
        let grad = self.inner.gradient(x).expect("derivatives checked at lift time");
        let g = self.dynamics.drift(x);
        grad.dot(&g) + self.correction(x).expect("derivatives checked at lift time") + self.inner.value(x)
    }

    /// `H_k g + (∂g/∂x)ᵀ ∇h_k + ∇h_k + ∇(Itô term)`; only the Itô term is
    /// differenced.
    fn gradient(&self, x: &[f64]) -> Result<DVector<f64>, ZcbfError> {
        let grad = self.inner.gradient(x)?;
        let hess = self.inner.hessian(x)?;
        let g = self.dynamics.drift(x);
        let jac = self.drift_jacobian(x);
        let ito = fd_gradient(&|p| self.correction(p).unwrap_or(f64::NAN), x, FD_STEP);
        Ok(&hess * &g + jac.transpose() * &grad + &grad + ito)
    }

    fn hessian(&self, x: &[f64]) -> Result<DMatrix<f64>, ZcbfError> {
        self.gradient(x)?;
        Ok(fd_jacobian(&|p| self.gradient(p).expect("checked above"), x, FD_STEP, true))
    }
}

/// Lifts `h_k` to `h_{k+1}` under `dynamics`.
pub fn chain_lift(barrier: Arc<dyn Barrier>, dynamics: Arc<dyn ControlAffine>) -> Result<LiftedBarrier, ZcbfError> {
    let probe = vec![0.0; dynamics.state_dim()];
    barrier.gradient(&probe)?;
    barrier.hessian(&probe)?;
    Ok(LiftedBarrier { inner: barrier, dynamics })
}

fn control_coupling(barrier: &dyn Barrier, dynamics: &dyn ControlAffine, x: &[f64]) -> Result<DVector<f64>, ZcbfError> {
    Ok(dynamics.control_matrix(x).transpose() * barrier.gradient(x)?)
}

/// Smallest `r` with `max_samples ‖(∂h_r/∂x) B‖ > DEGREE_TOL`.
pub fn detect_relative_degree(h0: Arc<dyn Barrier>, dynamics: Arc<dyn ControlAffine>, samples: &[Vec<f64>], cap: usize) -> Result<usize, ZcbfError> {
    detect_levels(h0, dynamics, samples, cap).map(|levels| levels.len() - 1)
}

fn detect_levels(h0: Arc<dyn Barrier>, dynamics: Arc<dyn ControlAffine>, samples: &[Vec<f64>], cap: usize) -> Result<Vec<Arc<dyn Barrier>>, ZcbfError> {
    if samples.is_empty() {
        return Err(ZcbfError::Argument("relative degree detection needs sample states".into()));
    }
    let mut levels = vec![h0];
    loop {
        let current = levels.last().expect("nonempty").clone();
        let mut coupling: f64 = 0.0;
        for s in samples {
            coupling = coupling.max(control_coupling(current.as_ref(), dynamics.as_ref(), s)?.norm());
        }
        if coupling > DEGREE_TOL {
            return Ok(levels);
        }
        if levels.len() > cap {
            return Err(ZcbfError::DegreeCapExceeded { cap });
        }
        levels.push(Arc::new(chain_lift(current, dynamics.clone())?));
    }
}

/// Identifies a constraint: which obstacle, which chain level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub struct ConstraintId {
    pub obstacle: usize,
    pub level: usize,
}

/// `aᵀu ≥ b`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineConstraint {
    pub a: DVector<f64>,
    pub b: f64,
    pub id: ConstraintId,
}

impl AffineConstraint {
    pub fn new(a: DVector<f64>, b: f64, id: ConstraintId) -> Result<Self, ZcbfError> {
        if !a.iter().all(|v| v.is_finite()) || !b.is_finite() {
            return Err(ZcbfError::Argument(format!("constraint {id:?} has non-finite coefficients")));
        }
        Ok(Self { a, b, id })
    }

    /// `aᵀu − b`; nonnegative when satisfied.
    pub fn slack(&self, u: &DVector<f64>) -> f64 {
        self.a.dot(u) - self.b
    }
}

/// A barrier chain `h_0 … h_r` for one obstacle.
#[derive(Clone)]
pub struct ZcbfChain {
    pub levels: Vec<Arc<dyn Barrier>>,
    pub relative_degree: usize,
    pub dynamics: Arc<dyn ControlAffine>,
    pub margin: f64,
    pub obstacle_id: usize,
}

impl fmt::Debug for ZcbfChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ZcbfChain")
            .field("relative_degree", &self.relative_degree)
            .field("margin", &self.margin)
            .field("obstacle_id", &self.obstacle_id)
            .finish_non_exhaustive()
    }
}

impl ZcbfChain {
    /// Detects the relative degree on `samples` and keeps the lifted levels.
    pub fn build(h0: Arc<dyn Barrier>, dynamics: Arc<dyn ControlAffine>, samples: &[Vec<f64>], margin: f64, obstacle_id: usize) -> Result<Self, ZcbfError> {
        let levels = detect_levels(h0, dynamics.clone(), samples, DEFAULT_DEGREE_CAP)?;
        let relative_degree = levels.len() - 1;
        Ok(Self { levels, relative_degree, dynamics, margin, obstacle_id })
    }

    /// Lifts exactly `degree` times without detection.
    pub fn with_degree(h0: Arc<dyn Barrier>, dynamics: Arc<dyn ControlAffine>, degree: usize, margin: f64, obstacle_id: usize) -> Result<Self, ZcbfError> {
        let mut levels = vec![h0];
        for _ in 0..degree {
            let top = levels.last().expect("nonempty").clone();
            levels.push(Arc::new(chain_lift(top, dynamics.clone())?));
        }
        Ok(Self { levels, relative_degree: degree, dynamics, margin, obstacle_id })
    }

    pub fn values(&self, x: &[f64]) -> Vec<f64> {
        self.levels.iter().map(|h| h.value(x)).collect()
    }

    /// Constraint from the top level plus the lower-level couplings.
    pub fn constraints(&self, x: &[f64]) -> Result<Vec<AffineConstraint>, ZcbfError> {
        let mut out = vec![constraint_coeffs(self, x)?];
        for (level, a) in lower_degree_terms(self, x)?.into_iter().enumerate() {
            if a.norm() > DEGREE_TOL {
                out.push(AffineConstraint::new(a, 0.0, ConstraintId { obstacle: self.obstacle_id, level })?);
            }
        }
        Ok(out)
    }
}

/// `a = Bᵀ∇h_r`, `b = −h_r − ∇h_r·g − ½tr(σᵀBᵀ ∇²h_r Bσ)`.
pub fn constraint_coeffs(chain: &ZcbfChain, x: &[f64]) -> Result<AffineConstraint, ZcbfError> {
    let top = &chain.levels[chain.relative_degree];
    let dyns = chain.dynamics.as_ref();
    let grad = top.gradient(x)?;
    let a = dyns.control_matrix(x).transpose() * &grad;
    let b = -top.value(x) - grad.dot(&dyns.drift(x)) - ito_correction(dyns, x, &top.hessian(x)?);
    AffineConstraint::new(a, b, ConstraintId { obstacle: chain.obstacle_id, level: chain.relative_degree })
}

/// `Bᵀ∇h_k` for `k < r`; each must satisfy `aᵀu ≥ 0`.
pub fn lower_degree_terms(chain: &ZcbfChain, x: &[f64]) -> Result<Vec<DVector<f64>>, ZcbfError> {
    chain.levels[..chain.relative_degree].iter().map(|h| control_coupling(h.as_ref(), chain.dynamics.as_ref(), x)).collect()
}

/// `x ∈ C̄_r`: every level nonnegative.
pub fn in_safe_set(chain: &ZcbfChain, x: &[f64]) -> bool {
    chain.levels.iter().all(|h| h.value(x) >= 0.0)
}

/// Euclidean projection of `u_star` onto `{u : aᵢᵀu ≥ bᵢ}`.
///
/// A dual active-set method starting from the unconstrained minimizer: the
/// most violated constraint enters the active set (lowest id on ties), a
/// dependent constraint makes the current active set drop the blocking
/// multiplier. Infeasibility is reported with the active set and the
/// constraint that could not be satisfied.
pub fn safety_filter(u_star: &DVector<f64>, constraints: &[AffineConstraint]) -> Result<DVector<f64>, ZcbfError> {
    let p = u_star.len();
    if constraints.iter().any(|c| c.a.len() != p) {
        return Err(ZcbfError::Argument("constraint dimension does not match the control".into()));
    }
    if constraints.iter().all(|c| c.slack(u_star) >= 0.0) {
        return Ok(u_star.clone());
    }
    let mut order: Vec<usize> = (0..constraints.len()).collect();
    order.sort_by_key(|i| constraints[*i].id);

    let mut x = u_star.clone();
    let mut active: Vec<usize> = Vec::new();
    let mut mult: Vec<f64> = Vec::new();
    let max_iter = 10 * (constraints.len() + p) + 10;
    let add_tol = |c: &AffineConstraint, x: &DVector<f64>| 1e-13 * (1.0 + c.b.abs() + c.a.norm() * x.norm());

    for _ in 0..max_iter {
        let mut entering = None;
        let mut worst = 0.0;
        for &i in &order {
            if active.contains(&i) {
                continue;
            }
            let s = constraints[i].slack(&x);
            if s < -add_tol(&constraints[i], &x) && s < worst {
                worst = s;
                entering = Some(i);
            }
        }
        let Some(q) = entering else {
            return finish(x, constraints);
        };
        let aq = &constraints[q].a;
        let mut mult_q = 0.0;
        loop {
            let (z, r) = step_directions(constraints, &active, aq);
            let mut t1 = f64::INFINITY;
            let mut blocking = None;
            for (j, rj) in r.iter().enumerate() {
                if *rj > 1e-14 {
                    let ratio = mult[j] / rj;
                    if ratio < t1 {
                        t1 = ratio;
                        blocking = Some(j);
                    }
                }
            }
            let zz = z.dot(aq);
            let t2 = if z.norm() > 1e-12 * aq.norm().max(1e-300) && zz > 0.0 { -constraints[q].slack(&x) / zz } else { f64::INFINITY };
            let t = t1.min(t2);
            if !t.is_finite() {
                let mut conflicting: Vec<ConstraintId> = active.iter().chain([&q]).map(|i| constraints[*i].id).collect();
                conflicting.sort();
                return Err(ZcbfError::SafetyInfeasible { conflicting });
            }
            for (m, rj) in mult.iter_mut().zip(r.iter()) {
                *m -= t * rj;
            }
            mult_q += t;
            if t2.is_finite() {
                x += &z * t;
            }
            if t2 <= t1 {
                active.push(q);
                mult.push(mult_q);
                break;
            }
            let l = blocking.expect("finite t1 has a blocking constraint");
            active.remove(l);
            mult.remove(l);
        }
    }
    Err(ZcbfError::Stalled(max_iter))
}

fn step_directions(constraints: &[AffineConstraint], active: &[usize], aq: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
    if active.is_empty() {
        return (aq.clone(), DVector::zeros(0));
    }
    let n = DMatrix::from_columns(&active.iter().map(|i| constraints[*i].a.clone()).collect::<Vec<_>>());
    let gram = n.transpose() * &n;
    let rhs = n.transpose() * aq;
    let r = gram.clone().cholesky().map(|c| c.solve(&rhs)).unwrap_or_else(|| gram.pseudo_inverse(1e-14).expect("pseudo-inverse") * &rhs);
    let z = aq - &n * &r;
    (z, r)
}

fn finish(x: DVector<f64>, constraints: &[AffineConstraint]) -> Result<DVector<f64>, ZcbfError> {
    let worst = constraints.iter().filter(|c| c.slack(&x) < -FEASIBILITY_TOL).map(|c| c.id).collect::<Vec<_>>();
    if worst.is_empty() {
        Ok(x)
    } else {
        Err(ZcbfError::SafetyInfeasible { conflicting: worst })
    }
}
