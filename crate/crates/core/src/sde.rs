//! Control-affine Itô diffusions `dx = g(x)dt + B(x)[u dt + σ dω]`, seeded
//! Gaussian increments and fixed-step Euler–Maruyama integration.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::numeric::all_finite;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SdeError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("non-finite value during integration at step {step}: {what}")]
    NonFinite { step: usize, what: String },
}

/// A control-affine diffusion. Hot paths go through the slice methods; the
/// matrix accessors are used by the barrier and composition math.
pub trait ControlAffine: Send + Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Writes `g(x)` into `out`.
    fn drift_into(&self, x: &[f64], out: &mut [f64]);

    /// `B(x)`, an `M × P` matrix.
    fn control_matrix(&self, x: &[f64]) -> DMatrix<f64>;

    /// Constant noise covariance `σ` (`P × P`).
    fn noise_cov(&self) -> &DMatrix<f64>;

    /// `out += B(x) v`.
    fn add_input(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        let b = self.control_matrix(x);
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (c, vc) in v.iter().enumerate() {
                acc += b[(r, c)] * vc;
            }
            *o += acc;
        }
    }

    /// Analytic drift Jacobian `∂g/∂x`, when the model provides one.
    fn drift_jacobian(&self, _x: &[f64]) -> Option<DMatrix<f64>> {
        None
    }

    fn drift(&self, x: &[f64]) -> DVector<f64> {
        let mut out = DVector::zeros(self.state_dim());
        self.drift_into(x, out.as_mut_slice());
        out
    }
}

type DriftFn = dyn Fn(&[f64]) -> DVector<f64> + Send + Sync;
type MatrixFn = dyn Fn(&[f64]) -> DMatrix<f64> + Send + Sync;

/// Closure-backed dynamics for ad-hoc models.
#[derive(Clone)]
pub struct ControlAffineDynamics {
    state_dim: usize,
    input_dim: usize,
    drift: Arc<DriftFn>,
    control_matrix: Arc<MatrixFn>,
    drift_jacobian: Option<Arc<MatrixFn>>,
    noise_cov: DMatrix<f64>,
}

impl fmt::Debug for ControlAffineDynamics {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ControlAffineDynamics")
            .field("state_dim", &self.state_dim)
            .field("input_dim", &self.input_dim)
            .field("noise_cov", &self.noise_cov)
            .finish_non_exhaustive()
    }
}

impl ControlAffineDynamics {
    pub fn new(
        state_dim: usize,
        input_dim: usize,
        drift: impl Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
        control_matrix: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        noise_cov: DMatrix<f64>,
    ) -> Result<Self, SdeError> {
        if state_dim == 0 || input_dim == 0 {
            return Err(SdeError::Argument("state and input dimensions must be positive".into()));
        }
        if noise_cov.shape() != (input_dim, input_dim) {
            return Err(SdeError::Argument(format!("noise covariance is {:?}, expected {input_dim}x{input_dim}", noise_cov.shape())));
        }
        if noise_cov.clone().lu().determinant().abs() < 1e-300 {
            return Err(SdeError::Argument("noise covariance must have full rank".into()));
        }
        Ok(Self { state_dim, input_dim, drift: Arc::new(drift), control_matrix: Arc::new(control_matrix), drift_jacobian: None, noise_cov })
    }

    /// Same as [`new`](Self::new) but without the rank check, for degenerate
    /// test fixtures such as `σ = 0`.
    pub fn new_unchecked(
        state_dim: usize,
        input_dim: usize,
        drift: impl Fn(&[f64]) -> DVector<f64> + Send + Sync + 'static,
        control_matrix: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static,
        noise_cov: DMatrix<f64>,
    ) -> Self {
        Self { state_dim, input_dim, drift: Arc::new(drift), control_matrix: Arc::new(control_matrix), drift_jacobian: None, noise_cov }
    }

    pub fn with_drift_jacobian(mut self, jac: impl Fn(&[f64]) -> DMatrix<f64> + Send + Sync + 'static) -> Self {
        self.drift_jacobian = Some(Arc::new(jac));
        self
    }
}

impl ControlAffine for ControlAffineDynamics {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        let g = (self.drift)(x);
        out.copy_from_slice(g.as_slice());
    }

    fn control_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let b = (self.control_matrix)(x);
        debug_assert_eq!(b.shape(), (self.state_dim, self.input_dim));
        b
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.noise_cov
    }

    fn drift_jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        self.drift_jacobian.as_ref().map(|j| j(x))
    }
}

/// Purpose tag for counter-based stream ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamPurpose {
    Execution = 0,
    Rollout = 1,
    Auxiliary = 2,
}

const STEP_BITS: u32 = 26;
const AGENT_BITS: u32 = 8;
const INDEX_BITS: u32 = 28;

/// Packs `(purpose, step, agent, index)` into a 64-bit stream id so every
/// rollout of every agent at every control step has its own stream,
/// independent of execution order.
pub fn stream_id(purpose: StreamPurpose, step: u64, agent: u64, index: u64) -> u64 {
    assert!(step < (1 << STEP_BITS), "step {step} exceeds stream id range");
    assert!(agent < (1 << AGENT_BITS), "agent {agent} exceeds stream id range");
    assert!(index < (1 << INDEX_BITS), "index {index} exceeds stream id range");
    ((purpose as u64) << (STEP_BITS + AGENT_BITS + INDEX_BITS)) | (step << (AGENT_BITS + INDEX_BITS)) | (agent << INDEX_BITS) | index
}

/// A reproducible Gaussian stream keyed by `(seed, stream_id)`.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl NoiseStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Fills `out` with independent `N(0, dt)` draws.
    pub fn fill_increments(&mut self, dt: f64, out: &mut [f64]) {
        let scale = dt.sqrt();
        for o in out.iter_mut() {
            let z: f64 = self.rng.sample(StandardNormal);
            *o = scale * z;
        }
    }
}

/// Brownian increments `dω ~ N(0, dt·I)` of length `dim`.
///
/// `dt == 0` is accepted and yields the zero vector.
pub fn sample_increments(stream: &mut NoiseStream, dim: usize, dt: f64) -> Result<DVector<f64>, SdeError> {
    if dim == 0 {
        return Err(SdeError::Argument("increment dimension must be positive".into()));
    }
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(SdeError::Argument(format!("time step must be non-negative and finite, got {dt}")));
    }
    let mut out = DVector::zeros(dim);
    stream.fill_increments(dt, out.as_mut_slice());
    Ok(out)
}

/// In-place Euler–Maruyama step into `out`:
/// `out = x + g(x)dt + B(x)(u dt + σ dw)`. `scratch` must have length `P`.
pub fn em_step_into(dynamics: &dyn ControlAffine, x: &[f64], u: &[f64], dt: f64, dw: &[f64], scratch: &mut [f64], out: &mut [f64]) {
    dynamics.drift_into(x, out);
    for (o, xi) in out.iter_mut().zip(x) {
        *o = xi + *o * dt;
    }
    let sigma = dynamics.noise_cov();
    for (r, s) in scratch.iter_mut().enumerate() {
        let mut acc = u[r] * dt;
        for (c, w) in dw.iter().enumerate() {
            acc += sigma[(r, c)] * w;
        }
        *s = acc;
    }
    dynamics.add_input(x, scratch, out);
}

/// One Euler–Maruyama step with dimension and finiteness checks.
pub fn em_step(dynamics: &dyn ControlAffine, x: &DVector<f64>, u: &DVector<f64>, dt: f64, dw: &DVector<f64>) -> Result<DVector<f64>, SdeError> {
    let (m, p) = (dynamics.state_dim(), dynamics.input_dim());
    if x.len() != m || u.len() != p || dw.len() != p {
        return Err(SdeError::Argument(format!("dimension mismatch: x {} (M={m}), u {} and dw {} (P={p})", x.len(), u.len(), dw.len())));
    }
    if !all_finite(x.as_slice()) || !all_finite(u.as_slice()) || !all_finite(dw.as_slice()) || !dt.is_finite() {
        return Err(SdeError::NonFinite { step: 0, what: "em_step input".into() });
    }
    let mut out = DVector::zeros(m);
    let mut scratch = vec![0.0; p];
    em_step_into(dynamics, x.as_slice(), u.as_slice(), dt, dw.as_slice(), &mut scratch, out.as_mut_slice());
    if !all_finite(out.as_slice()) {
        return Err(SdeError::NonFinite { step: 0, what: "em_step output".into() });
    }
    Ok(out)
}

/// Why a trajectory stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitReason {
    TargetReached,
    MaxTime,
    SafetyInfeasible,
    /// Left the operating domain box.
    LeftDomain,
}

impl ExitReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExitReason::TargetReached => "target_reached",
            ExitReason::MaxTime => "max_time",
            ExitReason::SafetyInfeasible => "safety_infeasible",
            ExitReason::LeftDomain => "left_domain",
        }
    }
}

/// Recorded execution: `controls.len() + 1 == states.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<DVector<f64>>,
    pub controls: Vec<DVector<f64>>,
    pub exit_reason: ExitReason,
}

impl Trajectory {
    pub fn start(t0: f64, x0: DVector<f64>) -> Self {
        Self { times: vec![t0], states: vec![x0], controls: Vec::new(), exit_reason: ExitReason::MaxTime }
    }

    pub fn push(&mut self, u: DVector<f64>, t: f64, x: DVector<f64>) {
        self.controls.push(u);
        self.times.push(t);
        self.states.push(x);
    }

    pub fn last_state(&self) -> &DVector<f64> {
        self.states.last().expect("trajectory holds at least the initial state")
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }
}

/// Failure a policy can report to [`simulate`].
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ControlError {
    /// The safety constraints admit no control; the run halts cleanly.
    #[error("safety constraints infeasible: {0}")]
    Infeasible(String),
    #[error("policy failed: {0}")]
    Failed(String),
}

/// A run that stopped on an error, with everything recorded so far.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("{error}")]
pub struct SimulationAbort {
    pub error: SdeError,
    pub partial: Trajectory,
}

/// Integrates `dynamics` under `policy` from `x0` with step `dt` until
/// `stop(x, t)` fires or `max_time` elapses.
pub fn simulate(
    dynamics: &dyn ControlAffine,
    mut policy: impl FnMut(&DVector<f64>, f64) -> Result<DVector<f64>, ControlError>,
    x0: &DVector<f64>,
    dt: f64,
    max_time: f64,
    stop: impl Fn(&DVector<f64>, f64) -> bool,
    stream: &mut NoiseStream,
) -> Result<Trajectory, SimulationAbort> {
    let mut traj = Trajectory::start(0.0, x0.clone());
    let abort = |error: SdeError, partial: Trajectory| Err(SimulationAbort { error, partial });
    if !(dt > 0.0) {
        return abort(SdeError::Argument(format!("dt must be positive, got {dt}")), traj);
    }
    if x0.len() != dynamics.state_dim() || !all_finite(x0.as_slice()) {
        return abort(SdeError::Argument("initial state must be finite with dimension M".into()), traj);
    }
    let p = dynamics.input_dim();
    let max_steps = (max_time / dt).round() as usize;
    let mut x = x0.clone();
    let mut dw = DVector::zeros(p);
    let mut scratch = vec![0.0; p];
    for step in 0..max_steps {
        let t = step as f64 * dt;
        if stop(&x, t) {
            traj.exit_reason = ExitReason::TargetReached;
            return Ok(traj);
        }
        let u = match policy(&x, t) {
            Ok(u) => u,
            Err(ControlError::Infeasible(_)) => {
                traj.exit_reason = ExitReason::SafetyInfeasible;
                return Ok(traj);
            }
            Err(ControlError::Failed(msg)) => return abort(SdeError::Argument(msg), traj),
        };
        if u.len() != p || !all_finite(u.as_slice()) {
            return abort(SdeError::NonFinite { step, what: format!("policy control {u:?}") }, traj);
        }
        stream.fill_increments(dt, dw.as_mut_slice());
        let mut next = DVector::zeros(x.len());
        em_step_into(dynamics, x.as_slice(), u.as_slice(), dt, dw.as_slice(), &mut scratch, next.as_mut_slice());
        if !all_finite(next.as_slice()) {
            return abort(SdeError::NonFinite { step, what: "state".into() }, traj);
        }
        traj.push(u, (step + 1) as f64 * dt, next.clone());
        x = next;
    }
    if stop(&x, max_steps as f64 * dt) {
        traj.exit_reason = ExitReason::TargetReached;
    }
    Ok(traj)
}

/// Checks the cancellation condition `σσᵀ = λR⁻¹` entrywise.
pub fn validate_lambda_condition(control_weight: &DMatrix<f64>, sigma: &DMatrix<f64>, lambda: f64, tol: f64) -> Result<bool, SdeError> {
    if !control_weight.is_square() || control_weight.shape() != sigma.shape() {
        return Err(SdeError::Argument("R and σ must be square with equal shape".into()));
    }
    let r_inv = control_weight.clone().try_inverse().ok_or_else(|| SdeError::Argument("control weight R is singular".into()))?;
    let diff = sigma * sigma.transpose() - r_inv * lambda;
    Ok(diff.iter().all(|d| d.abs() <= tol))
}

/// `R = λ(σσᵀ)⁻¹`, the control weight that satisfies the cancellation
/// condition by construction.
pub fn derive_control_weight(sigma: &DMatrix<f64>, lambda: f64) -> Result<DMatrix<f64>, SdeError> {
    (sigma * sigma.transpose()).try_inverse().map(|m| m * lambda).ok_or_else(|| SdeError::Argument("σσᵀ is singular".into()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_dynamics(m: usize, p: usize, sigma: f64) -> ControlAffineDynamics {
        ControlAffineDynamics::new_unchecked(m, p, move |_| DVector::zeros(m), move |_| DMatrix::identity(m, p), DMatrix::identity(p, p) * sigma)
    }

    fn constant_dynamics() -> ControlAffineDynamics {
        ControlAffineDynamics::new(2, 1, |_| DVector::from_vec(vec![0.5, -1.0]), |_| DMatrix::from_vec(2, 1, vec![1.0, 2.0]), DMatrix::from_element(1, 1, 0.3))
            .unwrap()
    }

    #[test]
    fn zero_dt_gives_zero_increments() {
        let mut s = NoiseStream::new(7, 0);
        let dw = sample_increments(&mut s, 3, 0.0).unwrap();
        assert!(dw.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn increment_arguments_are_checked() {
        let mut s = NoiseStream::new(7, 0);
        assert!(sample_increments(&mut s, 0, 0.1).is_err());
        assert!(sample_increments(&mut s, 2, -0.1).is_err());
        assert!(sample_increments(&mut s, 2, f64::NAN).is_err());
    }

    #[test]
    fn identical_streams_reproduce() {
        let mut a = NoiseStream::new(42, 9);
        let mut b = NoiseStream::new(42, 9);
        let mut c = NoiseStream::new(42, 10);
        let va = sample_increments(&mut a, 16, 0.01).unwrap();
        let vb = sample_increments(&mut b, 16, 0.01).unwrap();
        let vc = sample_increments(&mut c, 16, 0.01).unwrap();
        assert_eq!(va, vb);
        assert_ne!(va, vc);
    }

    #[test]
    fn increment_mean_and_variance_at_one_million_draws() {
        let n = 1_000_000;
        let dt = 0.01;
        let mut s = NoiseStream::new(2024, 1);
        let mut buf = vec![0.0; n];
        s.fill_increments(dt, &mut buf);
        let mean = buf.iter().sum::<f64>() / n as f64;
        let var = buf.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        assert!(mean.abs() < 4.0 * (dt / n as f64).sqrt(), "mean {mean}");
        assert!((var - dt).abs() / dt < 0.01, "variance {var}");
    }

    #[test]
    fn distinct_streams_are_uncorrelated() {
        let n = 200_000;
        let mut a = NoiseStream::new(5, stream_id(StreamPurpose::Rollout, 3, 1, 0));
        let mut b = NoiseStream::new(5, stream_id(StreamPurpose::Rollout, 3, 1, 1));
        let mut va = vec![0.0; n];
        let mut vb = vec![0.0; n];
        a.fill_increments(1.0, &mut va);
        b.fill_increments(1.0, &mut vb);
        let corr = va.iter().zip(&vb).map(|(x, y)| x * y).sum::<f64>() / n as f64;
        assert!(corr.abs() < 4.0 / (n as f64).sqrt(), "correlation {corr}");
    }

    #[test]
    fn stream_ids_do_not_collide() {
        let a = stream_id(StreamPurpose::Rollout, 1, 0, 0);
        let b = stream_id(StreamPurpose::Rollout, 0, 1, 0);
        let c = stream_id(StreamPurpose::Execution, 1, 0, 0);
        assert!(a != b && b != c && a != c);
    }

    #[test]
    fn em_step_without_drift_input_or_noise_is_identity() {
        let dyns = zero_dynamics(3, 3, 1.0);
        let x = DVector::from_vec(vec![1.0, -2.0, 3.0]);
        let out = em_step(&dyns, &x, &DVector::zeros(3), 0.1, &DVector::zeros(3)).unwrap();
        assert_eq!(out, x);
    }

    #[test]
    fn em_step_is_affine_in_noise() {
        let dyns = constant_dynamics();
        let x = DVector::from_vec(vec![0.2, 0.1]);
        let u = DVector::from_vec(vec![0.4]);
        let dw = DVector::from_vec(vec![0.37]);
        let plus = em_step(&dyns, &x, &u, 0.05, &dw).unwrap();
        let minus = em_step(&dyns, &x, &u, 0.05, &(-&dw)).unwrap();
        let det = em_step(&dyns, &x, &u, 0.05, &DVector::zeros(1)).unwrap();
        assert!(((plus + minus) * 0.5 - det).norm() < 1e-15);
    }

    #[test]
    fn em_step_is_exact_for_constant_fields() {
        let dyns = constant_dynamics();
        let x0 = DVector::from_vec(vec![1.0, 1.0]);
        let u = DVector::from_vec(vec![0.25]);
        let dt = 0.05;
        let mut x = x0.clone();
        for _ in 0..40 {
            x = em_step(&dyns, &x, &u, dt, &DVector::zeros(1)).unwrap();
        }
        let rate = DVector::from_vec(vec![0.5 + 0.25, -1.0 + 0.5]);
        let closed = x0 + rate * (40.0 * dt);
        assert!((x - closed).norm() < 1e-12);
    }

    #[test]
    fn em_step_rejects_bad_input() {
        let dyns = constant_dynamics();
        let x = DVector::from_vec(vec![f64::NAN, 0.0]);
        let u = DVector::zeros(1);
        assert!(matches!(em_step(&dyns, &x, &u, 0.1, &u), Err(SdeError::NonFinite { .. })));
        let short = DVector::zeros(1);
        assert!(matches!(em_step(&dyns, &short, &u, 0.1, &u), Err(SdeError::Argument(_))));
    }

    #[test]
    fn simulation_without_forces_is_constant() {
        let dyns = zero_dynamics(2, 2, 0.0);
        let x0 = DVector::from_vec(vec![3.0, 4.0]);
        let mut s = NoiseStream::new(1, 0);
        let traj = simulate(&dyns, |_, _| Ok(DVector::zeros(2)), &x0, 0.1, 1.0, |_, _| false, &mut s).unwrap();
        assert_eq!(traj.states.len(), 11);
        assert_eq!(traj.controls.len(), 10);
        assert!(traj.states.iter().all(|x| *x == x0));
        assert_eq!(traj.exit_reason, ExitReason::MaxTime);
        for w in traj.times.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn simulation_stops_immediately_inside_target() {
        let dyns = zero_dynamics(2, 2, 1.0);
        let x0 = DVector::from_vec(vec![3.0, 4.0]);
        let centre = x0.clone();
        let mut s = NoiseStream::new(1, 0);
        let traj = simulate(&dyns, |_, _| Ok(DVector::zeros(2)), &x0, 0.1, 5.0, move |x, _| (x - &centre).norm() <= 1.0, &mut s).unwrap();
        assert_eq!(traj.states.len(), 1);
        assert_eq!(traj.exit_reason, ExitReason::TargetReached);
    }

    #[test]
    fn non_finite_policy_aborts_with_partial_trajectory() {
        let dyns = zero_dynamics(1, 1, 1.0);
        let x0 = DVector::from_vec(vec![0.0]);
        let mut s = NoiseStream::new(1, 0);
        let err =
            simulate(&dyns, |_, t| Ok(DVector::from_vec(vec![if t > 0.25 { f64::INFINITY } else { 1.0 }])), &x0, 0.1, 1.0, |_, _| false, &mut s).unwrap_err();
        assert!(matches!(err.error, SdeError::NonFinite { step: 3, .. }));
        assert_eq!(err.partial.states.len(), 4);
    }

    #[test]
    fn infeasible_policy_records_exit_reason() {
        let dyns = zero_dynamics(1, 1, 1.0);
        let x0 = DVector::from_vec(vec![0.0]);
        let mut s = NoiseStream::new(1, 0);
        let traj = simulate(&dyns, |_, _| Err(ControlError::Infeasible("test".into())), &x0, 0.1, 1.0, |_, _| false, &mut s).unwrap();
        assert_eq!(traj.exit_reason, ExitReason::SafetyInfeasible);
    }

    #[test]
    fn seeded_simulation_reproduces_bitwise() {
        let dyns = constant_dynamics();
        let x0 = DVector::from_vec(vec![0.0, 0.0]);
        let run = || {
            let mut s = NoiseStream::new(99, 3);
            simulate(&dyns, |x, _| Ok(DVector::from_vec(vec![-x[0]])), &x0, 0.05, 2.0, |_, _| false, &mut s).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn lambda_condition_cases() {
        let sigma = DMatrix::from_diagonal(&DVector::from_vec(vec![0.05, 0.025]));
        let r = DMatrix::from_diagonal(&DVector::from_vec(vec![400.0, 1600.0]));
        assert!(validate_lambda_condition(&r, &sigma, 1.0, 1e-12).unwrap());
        let eye = DMatrix::<f64>::identity(2, 2);
        assert!(validate_lambda_condition(&eye, &eye, 1.0, 1e-12).unwrap());
        assert!(!validate_lambda_condition(&(eye.clone() * 2.0), &eye, 1.0, 1e-12).unwrap());
        assert!(validate_lambda_condition(&DMatrix::zeros(2, 2), &eye, 1.0, 1e-12).is_err());
        let derived = derive_control_weight(&sigma, 1.0).unwrap();
        assert!((derived - r).abs().max() < 1e-9);
    }
}
