//! Path-integral estimation of the desirability `Z = exp(-V/λ)` and the
//! linear-form optimal control, with a grid HJB solver used as an oracle on
//! one- and two-dimensional problems.
//!
//! Rollouts follow the passive dynamics (`u = 0`). Each rollout accrues
//! `q(x)·dt` at interior states and ends at the horizon, on an exit state, or
//! on an absorbing state. An absorbing state stops the rollout and charges its
//! running cost for every remaining horizon step. The final cost is charged at
//! the last recorded state. Weights `exp(-S/λ)` are always normalized in the
//! log domain.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use thiserror::Error;

use crate::numeric::{effective_sample_size, log_sum_exp};
use crate::sde::{em_step_into, stream_id, validate_lambda_condition, ControlAffine, ControlError, NoiseStream, SdeError, StreamPurpose};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LsocError {
    #[error("invalid argument: {0}")]
    Argument(String),
    #[error("start on boundary: rollouts cannot start on an exit state")]
    StartOnBoundary,
    #[error("desirability underflow: max log-weight {max_log_weight}")]
    DesirabilityUnderflow { max_log_weight: f64 },
    #[error("no finite path cost in batch")]
    NoFiniteWeights,
    #[error("singular discrete operator at node {node} ({coords:?}), pivot {pivot:e}")]
    SingularOperator { node: usize, coords: Vec<f64>, pivot: f64 },
    #[error(transparent)]
    Sde(#[from] SdeError),
}

/// Region of a state with respect to the first-exit problem.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateClass {
    Interior,
    /// Boundary state: the rollout ends and pays the final cost.
    Exit,
    /// Trap state: the rollout ends, pays its running cost for the rest of the
    /// horizon, then the final cost.
    Absorb,
}

pub type ScalarField = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;
pub type Classifier = Arc<dyn Fn(&[f64]) -> StateClass + Send + Sync>;

/// A first-exit linearly-solvable control problem.
#[derive(Clone)]
pub struct LsocProblem {
    pub dynamics: Arc<dyn ControlAffine>,
    pub state_cost: ScalarField,
    pub control_weight: DMatrix<f64>,
    pub temperature: f64,
    pub final_cost: ScalarField,
    pub classify: Classifier,
}

impl fmt::Debug for LsocProblem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LsocProblem")
            .field("state_dim", &self.dynamics.state_dim())
            .field("input_dim", &self.dynamics.input_dim())
            .field("control_weight", &self.control_weight)
            .field("temperature", &self.temperature)
            .finish_non_exhaustive()
    }
}

impl LsocProblem {
    /// Builds a problem and checks `σσᵀ = λR⁻¹` to a relative tolerance.
    pub fn new(
        dynamics: Arc<dyn ControlAffine>,
        state_cost: ScalarField,
        control_weight: DMatrix<f64>,
        temperature: f64,
        final_cost: ScalarField,
        classify: Classifier,
    ) -> Result<Self, LsocError> {
        if !(temperature > 0.0) {
            return Err(LsocError::Argument(format!("temperature must be positive, got {temperature}")));
        }
        let sigma = dynamics.noise_cov();
        let scale = (sigma * sigma.transpose()).abs().max().max(f64::MIN_POSITIVE);
        if !validate_lambda_condition(&control_weight, sigma, temperature, 1e-9 * scale)? {
            return Err(LsocError::Argument("σσᵀ = λR⁻¹ does not hold for this problem".into()));
        }
        Ok(Self::new_unchecked(dynamics, state_cost, control_weight, temperature, final_cost, classify))
    }

    /// Skips the cancellation check; for degenerate fixtures such as `σ = 0`.
    pub fn new_unchecked(
        dynamics: Arc<dyn ControlAffine>,
        state_cost: ScalarField,
        control_weight: DMatrix<f64>,
        temperature: f64,
        final_cost: ScalarField,
        classify: Classifier,
    ) -> Self {
        Self { dynamics, state_cost, control_weight, temperature, final_cost, classify }
    }
}

/// How a rollout ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RolloutEnd {
    Horizon,
    Exit,
    Absorbed,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    /// Accrued running cost, including any absorbing penalty.
    pub running_cost: f64,
    pub end_state: Vec<f64>,
    /// Unscaled first Brownian increment `dω_0`.
    pub first_noise: Vec<f64>,
    pub steps: usize,
    pub end: RolloutEnd,
    /// Full state path, only when requested.
    pub path: Option<Vec<Vec<f64>>>,
}

/// `K` passive rollouts sharing start state, `dt` and horizon.
#[derive(Debug, Clone)]
pub struct RolloutBatch {
    pub rollouts: Vec<Rollout>,
    pub dt: f64,
    pub horizon: usize,
    pub start: Vec<f64>,
    /// Noise covariance of the sampled dynamics.
    pub sigma: DMatrix<f64>,
    /// Path costs `S_k` under the problem's own final cost.
    pub costs: Vec<f64>,
}

impl RolloutBatch {
    pub fn len(&self) -> usize {
        self.rollouts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rollouts.is_empty()
    }

    /// Path costs under an alternative final cost; the running part is shared.
    pub fn path_costs(&self, final_cost: &dyn Fn(&[f64]) -> f64) -> Vec<f64> {
        self.rollouts.iter().map(|r| r.running_cost + final_cost(&r.end_state)).collect()
    }

    /// `σ dω_0` for rollout `k`.
    pub fn scaled_first_noise(&self, k: usize) -> DVector<f64> {
        &self.sigma * DVector::from_column_slice(&self.rollouts[k].first_noise)
    }
}

/// Identifies the family of streams a batch draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchNoise {
    pub seed: u64,
    pub step: u64,
    pub agent: u64,
}

impl BatchNoise {
    pub fn stream(&self, rollout: usize) -> NoiseStream {
        NoiseStream::new(self.seed, stream_id(StreamPurpose::Rollout, self.step, self.agent, rollout as u64))
    }
}

fn single_rollout(problem: &LsocProblem, x0: &[f64], dt: f64, horizon: usize, mut stream: NoiseStream, record_path: bool) -> Rollout {
    let dyns = problem.dynamics.as_ref();
    let (m, p) = (dyns.state_dim(), dyns.input_dim());
    let zero_u = vec![0.0; p];
    let mut dw = vec![0.0; p];
    let mut first_noise = vec![0.0; p];
    let mut scratch = vec![0.0; p];
    let mut x = x0.to_vec();
    let mut next = vec![0.0; m];
    let mut running = 0.0;
    let mut path = record_path.then(|| vec![x.clone()]);
    let mut end = RolloutEnd::Horizon;
    let mut steps = horizon;
    // absorption applies on entry; a rollout starting inside waits until it is out
    let mut armed = (problem.classify)(x0) == StateClass::Interior;
    for t in 0..horizon {
        running += (problem.state_cost)(&x) * dt;
        stream.fill_increments(dt, &mut dw);
        if t == 0 {
            first_noise.copy_from_slice(&dw);
        }
        em_step_into(dyns, &x, &zero_u, dt, &dw, &mut scratch, &mut next);
        std::mem::swap(&mut x, &mut next);
        if let Some(path) = path.as_mut() {
            path.push(x.clone());
        }
        match (problem.classify)(&x) {
            StateClass::Interior => armed = true,
            StateClass::Absorb if !armed => {}
            StateClass::Exit => {
                end = RolloutEnd::Exit;
                steps = t + 1;
                break;
            }
            StateClass::Absorb => {
                running += (problem.state_cost)(&x) * dt * (horizon - t - 1) as f64;
                end = RolloutEnd::Absorbed;
                steps = t + 1;
                break;
            }
        }
    }
    Rollout { running_cost: running, end_state: x, first_noise, steps, end, path }
}

/// Draws `K` passive rollouts of `H` steps from `x0`. Rollout `k` uses the
/// stream `noise.stream(k)`; rollouts run in parallel and are stored in index
/// order, so the batch does not depend on the thread count.
pub fn rollout_batch(
    problem: &LsocProblem,
    x0: &[f64],
    dt: f64,
    horizon: usize,
    count: usize,
    noise: BatchNoise,
    record_paths: bool,
) -> Result<RolloutBatch, LsocError> {
    if count == 0 || horizon == 0 {
        return Err(LsocError::Argument("rollout count and horizon must be at least 1".into()));
    }
    if !(dt > 0.0) {
        return Err(LsocError::Argument(format!("dt must be positive, got {dt}")));
    }
    if x0.len() != problem.dynamics.state_dim() {
        return Err(LsocError::Argument(format!("start state has dimension {}, expected {}", x0.len(), problem.dynamics.state_dim())));
    }
    if (problem.classify)(x0) == StateClass::Exit {
        return Err(LsocError::StartOnBoundary);
    }
    let rollouts: Vec<Rollout> =
        (0..count).into_par_iter().with_min_len(64).map(|k| single_rollout(problem, x0, dt, horizon, noise.stream(k), record_paths)).collect();
    let costs: Vec<f64> = rollouts.iter().map(|r| r.running_cost + (problem.final_cost)(&r.end_state)).collect();
    if costs.iter().any(|s| s.is_nan()) {
        return Err(LsocError::Argument("path cost evaluated to NaN".into()));
    }
    Ok(RolloutBatch { rollouts, dt, horizon, start: x0.to_vec(), sigma: problem.dynamics.noise_cov().clone(), costs })
}

/// `log Z = log((1/K) Σ exp(-S_k/λ))`.
pub fn log_desirability(costs: &[f64], lambda: f64) -> f64 {
    let logs: Vec<f64> = costs.iter().map(|s| -s / lambda).collect();
    log_sum_exp(&logs) - (costs.len() as f64).ln()
}

/// Monte-Carlo desirability `Z = (1/K) Σ exp(-S_k/λ)`.
pub fn estimate_desirability(batch: &RolloutBatch, lambda: f64) -> Result<f64, LsocError> {
    desirability_from_costs(&batch.costs, lambda)
}

pub fn desirability_from_costs(costs: &[f64], lambda: f64) -> Result<f64, LsocError> {
    if costs.is_empty() {
        return Err(LsocError::Argument("empty batch".into()));
    }
    if !(lambda > 0.0) {
        return Err(LsocError::Argument(format!("temperature must be positive, got {lambda}")));
    }
    let log_z = log_desirability(costs, lambda);
    let z = log_z.exp();
    if z == 0.0 || !z.is_finite() {
        let max_log_weight = costs.iter().map(|s| -s / lambda).fold(f64::NEG_INFINITY, f64::max);
        return Err(LsocError::DesirabilityUnderflow { max_log_weight });
    }
    Ok(z)
}

/// Weighted first-step-noise control estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlEstimate {
    pub control: DVector<f64>,
    pub log_z: f64,
    pub effective_sample_size: f64,
    /// Set when the effective sample size drops below 2.
    pub degenerate: bool,
}

/// `u = Σ w_k σ dω_0^(k) / (dt Σ w_k)` with `w_k = exp(-S_k/λ)`.
pub fn estimate_optimal_control(batch: &RolloutBatch, lambda: f64, dt: f64) -> Result<ControlEstimate, LsocError> {
    control_from_costs(batch, &batch.costs, lambda, dt)
}

/// Same estimator over externally supplied path costs (for example the
/// same rollouts under a different final cost).
pub fn control_from_costs(batch: &RolloutBatch, costs: &[f64], lambda: f64, dt: f64) -> Result<ControlEstimate, LsocError> {
    if batch.is_empty() || costs.len() != batch.len() {
        return Err(LsocError::Argument("cost vector must match a nonempty batch".into()));
    }
    if !(lambda > 0.0) || !(dt > 0.0) {
        return Err(LsocError::Argument("temperature and dt must be positive".into()));
    }
    let logs: Vec<f64> = costs.iter().map(|s| -s / lambda).collect();
    let lse = log_sum_exp(&logs);
    if !lse.is_finite() {
        return Err(LsocError::NoFiniteWeights);
    }
    let weights: Vec<f64> = logs.iter().map(|l| (l - lse).exp()).collect();
    let p = batch.sigma.nrows();
    let mut mean_noise = DVector::zeros(p);
    for (r, w) in batch.rollouts.iter().zip(&weights) {
        if *w == 0.0 {
            continue;
        }
        for (acc, n) in mean_noise.iter_mut().zip(&r.first_noise) {
            *acc += w * n;
        }
    }
    let control = (&batch.sigma * mean_noise) / dt;
    let ess = effective_sample_size(&weights);
    Ok(ControlEstimate { control, log_z: lse - (costs.len() as f64).ln(), effective_sample_size: ess, degenerate: ess < 2.0 })
}

/// Receding-horizon path-integral controller settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PiConfig {
    pub rollouts: usize,
    pub horizon: usize,
    pub dt: f64,
    pub seed: u64,
    pub agent: u64,
}

impl Default for PiConfig {
    fn default() -> Self {
        Self { rollouts: 2000, horizon: 60, dt: 0.05, seed: 0, agent: 0 }
    }
}

/// Re-estimates the control from a fresh batch at every call and keeps the
/// most recent batch for reuse.
pub struct PiController {
    problem: LsocProblem,
    config: PiConfig,
    step: u64,
    last_batch: Option<Arc<RolloutBatch>>,
}

impl PiController {
    pub fn new(problem: LsocProblem, config: PiConfig) -> Self {
        Self { problem, config, step: 0, last_batch: None }
    }

    pub fn problem(&self) -> &LsocProblem {
        &self.problem
    }

    pub fn last_batch(&self) -> Option<Arc<RolloutBatch>> {
        self.last_batch.clone()
    }

    pub fn control(&mut self, x: &[f64]) -> Result<ControlEstimate, LsocError> {
        let noise = BatchNoise { seed: self.config.seed, step: self.step, agent: self.config.agent };
        let batch = rollout_batch(&self.problem, x, self.config.dt, self.config.horizon, self.config.rollouts, noise, false)?;
        self.step += 1;
        let estimate = estimate_optimal_control(&batch, self.problem.temperature, self.config.dt)?;
        self.last_batch = Some(Arc::new(batch));
        Ok(estimate)
    }
}

/// Policy closure for [`crate::sde::simulate`] backed by a [`PiController`].
pub fn pi_policy(problem: LsocProblem, config: PiConfig) -> impl FnMut(&DVector<f64>, f64) -> Result<DVector<f64>, ControlError> {
    let mut controller = PiController::new(problem, config);
    move |x, _t| controller.control(x.as_slice()).map(|e| e.control).map_err(|e| ControlError::Failed(e.to_string()))
}

/// Node grid over an axis-aligned box in one or two dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Cells per dimension; there are `cells + 1` nodes per dimension.
    pub cells: Vec<usize>,
}

impl GridSpec {
    pub fn dims(&self) -> usize {
        self.cells.len()
    }

    pub fn spacing(&self, d: usize) -> f64 {
        (self.upper[d] - self.lower[d]) / self.cells[d] as f64
    }

    fn nodes_per_dim(&self) -> Vec<usize> {
        self.cells.iter().map(|c| c + 1).collect()
    }

    pub fn node_count(&self) -> usize {
        self.nodes_per_dim().iter().product()
    }

    /// Multi-index of a flat node index (first dimension fastest).
    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        let mut rem = node;
        self.nodes_per_dim()
            .iter()
            .map(|n| {
                let i = rem % n;
                rem /= n;
                i
            })
            .collect()
    }

    pub fn flat_index(&self, idx: &[usize]) -> usize {
        let n = self.nodes_per_dim();
        let mut flat = 0;
        let mut stride = 1;
        for (i, ni) in idx.iter().zip(&n) {
            flat += i * stride;
            stride *= ni;
        }
        flat
    }

    pub fn coords(&self, node: usize) -> Vec<f64> {
        self.multi_index(node).iter().enumerate().map(|(d, i)| self.lower[d] + *i as f64 * self.spacing(d)).collect()
    }

    fn on_edge(&self, idx: &[usize]) -> bool {
        idx.iter().zip(&self.cells).any(|(i, c)| *i == 0 || i == c)
    }
}

/// Solved desirability field on a grid.
#[derive(Debug, Clone)]
pub struct GridField {
    pub spec: GridSpec,
    pub values: Vec<f64>,
    /// Dirichlet nodes (box edges and non-interior states).
    pub boundary: Vec<bool>,
    pub gradient: Vec<DVector<f64>>,
}

impl GridField {
    pub fn value(&self, idx: &[usize]) -> f64 {
        self.values[self.spec.flat_index(idx)]
    }

    /// `σσᵀBᵀ∇Z/Z` at a node.
    pub fn optimal_control(&self, dynamics: &dyn ControlAffine, node: usize) -> DVector<f64> {
        let x = self.spec.coords(node);
        let sigma = dynamics.noise_cov();
        let b = dynamics.control_matrix(&x);
        sigma * sigma.transpose() * b.transpose() * (&self.gradient[node] / self.values[node])
    }
}

/// Solves `gᵀ∇Z + ½tr(BσσᵀBᵀ∇²Z) − (q/λ)Z = 0` on the interior nodes with
/// `Z = exp(−φ/λ)` on Dirichlet nodes. Drift terms are upwinded, diffusion is
/// centred; the banded system is solved by Gaussian elimination.
pub fn grid_hjb_oracle(problem: &LsocProblem, spec: &GridSpec) -> Result<GridField, LsocError> {
    let dims = spec.dims();
    let dyns = problem.dynamics.as_ref();
    if dims == 0 || dims > 2 || dyns.state_dim() != dims {
        return Err(LsocError::Argument("grid oracle supports state dimension 1 or 2 matching the grid".into()));
    }
    if spec.lower.len() != dims || spec.upper.len() != dims || spec.cells.iter().any(|c| *c < 2) {
        return Err(LsocError::Argument("grid spec needs bounds per dimension and at least 2 cells".into()));
    }
    let n = spec.node_count();
    let stride: Vec<usize> = if dims == 1 { vec![1] } else { vec![1, spec.cells[0] + 1] };
    let band = if dims == 1 { 1 } else { stride[1] + 1 };
    let width = 2 * band + 1;
    let mut mat = vec![0.0; n * width];
    let mut rhs = vec![0.0; n];
    let mut boundary = vec![false; n];
    let h: Vec<f64> = (0..dims).map(|d| spec.spacing(d)).collect();
    let sigma = dyns.noise_cov();
    let sst = sigma * sigma.transpose();
    let lambda = problem.temperature;
    let at = |row: usize, col: usize| row * width + (col + band - row);

    for node in 0..n {
        let idx = spec.multi_index(node);
        let x = spec.coords(node);
        if spec.on_edge(&idx) || (problem.classify)(&x) != StateClass::Interior {
            boundary[node] = true;
            mat[at(node, node)] = 1.0;
            rhs[node] = (-(problem.final_cost)(&x) / lambda).exp();
            continue;
        }
        let g = dyns.drift(&x);
        let b = dyns.control_matrix(&x);
        let diff = &b * &sst * b.transpose();
        let mut diag = -(problem.state_cost)(&x) / lambda;
        for d in 0..dims {
            let s = stride[d];
            if g[d] >= 0.0 {
                mat[at(node, node + s)] += g[d] / h[d];
                diag -= g[d] / h[d];
            } else {
                mat[at(node, node - s)] -= g[d] / h[d];
                diag += g[d] / h[d];
            }
            let a = 0.5 * diff[(d, d)] / (h[d] * h[d]);
            mat[at(node, node + s)] += a;
            mat[at(node, node - s)] += a;
            diag -= 2.0 * a;
        }
        if dims == 2 {
            let c = 0.5 * (diff[(0, 1)] + diff[(1, 0)]) / (4.0 * h[0] * h[1]);
            if c != 0.0 {
                let (s0, s1) = (stride[0], stride[1]);
                mat[at(node, node + s0 + s1)] += c;
                mat[at(node, node - s0 - s1)] += c;
                mat[at(node, node + s1 - s0)] -= c;
                mat[at(node, node - s1 + s0)] -= c;
            }
        }
        mat[at(node, node)] += diag;
    }

    // Banded elimination without pivoting; the upwinded operator is
    // diagonally dominant on interior rows.
    for k in 0..n {
        let pivot = mat[at(k, k)];
        let row_scale = (k.saturating_sub(band)..(k + band + 1).min(n)).map(|c| mat[at(k, c)].abs()).fold(0.0, f64::max);
        if pivot.abs() <= 1e-14 * row_scale.max(1.0) {
            return Err(LsocError::SingularOperator { node: k, coords: spec.coords(k), pivot });
        }
        for r in (k + 1)..(k + band + 1).min(n) {
            let factor = mat[at(r, k)] / pivot;
            if factor == 0.0 {
                continue;
            }
            for c in k..(k + band + 1).min(n) {
                mat[at(r, c)] -= factor * mat[at(k, c)];
            }
            rhs[r] -= factor * rhs[k];
        }
    }
    let mut values = vec![0.0; n];
    for k in (0..n).rev() {
        let mut acc = rhs[k];
        for c in (k + 1)..(k + band + 1).min(n) {
            acc -= mat[at(k, c)] * values[c];
        }
        values[k] = acc / mat[at(k, k)];
    }

    let gradient = (0..n)
        .map(|node| {
            let idx = spec.multi_index(node);
            DVector::from_fn(dims, |d, _| {
                let s = stride[d];
                if idx[d] == 0 {
                    (values[node + s] - values[node]) / h[d]
                } else if idx[d] == spec.cells[d] {
                    (values[node] - values[node - s]) / h[d]
                } else {
                    (values[node + s] - values[node - s]) / (2.0 * h[d])
                }
            })
        })
        .collect();
    Ok(GridField { spec: spec.clone(), values, boundary, gradient })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::ControlAffineDynamics;

    fn brownian(dim: usize, sigma: f64) -> Arc<dyn ControlAffine> {
        Arc::new(ControlAffineDynamics::new_unchecked(
            dim,
            dim,
            move |_| DVector::zeros(dim),
            move |_| DMatrix::identity(dim, dim),
            DMatrix::identity(dim, dim) * sigma,
        ))
    }

    fn interval_problem(q: f64, phi: impl Fn(f64) -> f64 + Send + Sync + 'static) -> LsocProblem {
        LsocProblem::new(
            brownian(1, 1.0),
            Arc::new(move |_| q),
            DMatrix::identity(1, 1),
            1.0,
            Arc::new(move |x| phi(x[0])),
            Arc::new(|x| if x[0].abs() >= 1.0 { StateClass::Exit } else { StateClass::Interior }),
        )
        .unwrap()
    }

    fn noise(step: u64) -> BatchNoise {
        BatchNoise { seed: 11, step, agent: 0 }
    }

    fn batch_with_costs(costs: Vec<f64>, noises: Vec<Vec<f64>>, sigma: f64) -> RolloutBatch {
        let p = noises[0].len();
        RolloutBatch {
            rollouts: noises
                .into_iter()
                .zip(&costs)
                .map(|(n, c)| Rollout { running_cost: *c, end_state: vec![0.0], first_noise: n, steps: 1, end: RolloutEnd::Horizon, path: None })
                .collect(),
            dt: 0.1,
            horizon: 1,
            start: vec![0.0],
            sigma: DMatrix::identity(p, p) * sigma,
            costs,
        }
    }

    #[test]
    fn zero_cost_problem_has_zero_path_costs() {
        let p = interval_problem(0.0, |_| 0.0);
        let b = rollout_batch(&p, &[0.0], 0.01, 50, 64, noise(0), false).unwrap();
        assert!(b.costs.iter().all(|s| *s == 0.0));
        assert_eq!(estimate_desirability(&b, 1.0).unwrap(), 1.0);
    }

    #[test]
    fn degenerate_noise_gives_identical_rollouts() {
        let prob = LsocProblem::new_unchecked(
            brownian(2, 0.0),
            Arc::new(|x| x[0] * x[0] + 1.0),
            DMatrix::identity(2, 2),
            1.0,
            Arc::new(|x| x[1]),
            Arc::new(|_| StateClass::Interior),
        );
        let b = rollout_batch(&prob, &[0.5, 0.2], 0.1, 10, 16, noise(0), true).unwrap();
        let first = &b.rollouts[0];
        assert!(b.rollouts.iter().all(|r| r.end_state == first.end_state && r.running_cost == first.running_cost));
        assert!(b.costs.windows(2).all(|w| w[0] == w[1]));
        assert_eq!(first.path.as_ref().unwrap().len(), 11);
    }

    #[test]
    fn start_on_boundary_is_rejected() {
        let p = interval_problem(0.0, |_| 0.0);
        assert_eq!(rollout_batch(&p, &[1.0], 0.01, 10, 4, noise(0), false).unwrap_err(), LsocError::StartOnBoundary);
        assert!(rollout_batch(&p, &[0.0], 0.01, 0, 4, noise(0), false).is_err());
        assert!(rollout_batch(&p, &[0.0], 0.01, 4, 0, noise(0), false).is_err());
    }

    #[test]
    fn absorbing_states_charge_remaining_horizon() {
        let prob = LsocProblem::new_unchecked(
            Arc::new(ControlAffineDynamics::new_unchecked(1, 1, |_| DVector::from_vec(vec![1.0]), |_| DMatrix::identity(1, 1), DMatrix::zeros(1, 1))),
            Arc::new(|x| if x[0] >= 0.25 { 10.0 } else { 0.0 }),
            DMatrix::identity(1, 1),
            1.0,
            Arc::new(|_| 0.0),
            Arc::new(|x| if x[0] >= 0.25 { StateClass::Absorb } else { StateClass::Interior }),
        );
        // Steps of 0.1 from 0: absorbed at x = 0.3 after 3 steps; 7 steps remain.
        let b = rollout_batch(&prob, &[0.0], 0.1, 10, 1, noise(0), false).unwrap();
        let r = &b.rollouts[0];
        assert_eq!(r.end, RolloutEnd::Absorbed);
        assert_eq!(r.steps, 3);
        assert!((r.running_cost - 10.0 * 0.1 * 7.0).abs() < 1e-12);
        // Starting inside, the rollout is not absorbed and pays the rate throughout.
        let b = rollout_batch(&prob, &[0.5], 0.1, 10, 1, noise(0), false).unwrap();
        let r = &b.rollouts[0];
        assert_eq!((r.end, r.steps), (RolloutEnd::Horizon, 10));
        assert!((r.running_cost - 10.0).abs() < 1e-12);
    }

    #[test]
    fn desirability_arithmetic() {
        let b = batch_with_costs(vec![1.0, 1.0, 1.0], vec![vec![0.0]; 3], 1.0);
        assert!((estimate_desirability(&b, 1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15);
        let b = batch_with_costs(vec![0.0, 1e6], vec![vec![0.0]; 2], 1.0);
        assert!((estimate_desirability(&b, 1.0).unwrap() - 0.5).abs() < 1e-15);
        let b = batch_with_costs(vec![1e6, 2e6], vec![vec![0.0]; 2], 1.0);
        match estimate_desirability(&b, 1.0) {
            Err(LsocError::DesirabilityUnderflow { max_log_weight }) => assert_eq!(max_log_weight, -1e6),
            other => panic!("expected underflow, got {other:?}"),
        }
    }

    #[test]
    fn control_follows_the_cheap_rollout() {
        let (d1, d2) = (0.3, -0.7);
        let b = batch_with_costs(vec![0.0, 1e4], vec![vec![d1], vec![d2]], 0.5);
        let est = estimate_optimal_control(&b, 1.0, 0.1).unwrap();
        assert!((est.control[0] - 0.5 * d1 / 0.1).abs() < 1e-12);
        assert!(est.degenerate);
    }

    #[test]
    fn uniform_weights_average_the_noise() {
        let p = interval_problem(0.0, |_| 0.0);
        let b = rollout_batch(&p, &[0.0], 0.01, 20, 4000, noise(1), false).unwrap();
        let est = estimate_optimal_control(&b, 1.0, 0.01).unwrap();
        // σ dω_0 / dt has standard deviation 10; the mean over 4000 draws has 0.16.
        assert!(est.control[0].abs() < 4.0 * 10.0 / 4000f64.sqrt());
        assert!((est.effective_sample_size - 4000.0).abs() < 1e-6);
    }

    #[test]
    fn shifting_costs_scales_z_and_keeps_control() {
        let p = interval_problem(0.3, |x| x);
        let b = rollout_batch(&p, &[0.1], 0.01, 200, 500, noise(2), false).unwrap();
        let shifted: Vec<f64> = b.costs.iter().map(|s| s + 2.5).collect();
        let z = estimate_desirability(&b, 1.0).unwrap();
        let z2 = desirability_from_costs(&shifted, 1.0).unwrap();
        assert!((z2 / z - (-2.5f64).exp()).abs() < 1e-12);
        let u = estimate_optimal_control(&b, 1.0, 0.01).unwrap().control;
        let u2 = control_from_costs(&b, &shifted, 1.0, 0.01).unwrap().control;
        assert!((u - u2).norm() < 1e-12);
    }

    #[test]
    fn fixed_horizon_gaussian_final_cost_matches_closed_form() {
        // Pure diffusion for T = 0.5 with φ(x) = x²: E[exp(−X_T²)] with
        // X_T ~ N(x0, T) equals exp(−x0²/(1+2T)) / sqrt(1+2T).
        let prob =
            LsocProblem::new(brownian(1, 1.0), Arc::new(|_| 0.0), DMatrix::identity(1, 1), 1.0, Arc::new(|x| x[0] * x[0]), Arc::new(|_| StateClass::Interior))
                .unwrap();
        let x0 = 0.4;
        let b = rollout_batch(&prob, &[x0], 0.01, 50, 10_000, noise(3), false).unwrap();
        let z = estimate_desirability(&b, 1.0).unwrap();
        let exact = (-x0 * x0 / 2.0f64).exp() / 2.0f64.sqrt();
        assert!((z - exact).abs() / exact < 0.05, "z {z} exact {exact}");
    }

    #[test]
    fn grid_oracle_constant_solution() {
        let p = interval_problem(0.0, |_| 0.0);
        let spec = GridSpec { lower: vec![-1.0], upper: vec![1.0], cells: vec![40] };
        let f = grid_hjb_oracle(&p, &spec).unwrap();
        assert!(f.values.iter().all(|z| (z - 1.0).abs() < 1e-12));
        let p2 =
            LsocProblem::new(brownian(2, 1.0), Arc::new(|_| 0.0), DMatrix::identity(2, 2), 1.0, Arc::new(|_| 0.0), Arc::new(|_| StateClass::Interior)).unwrap();
        let spec2 = GridSpec { lower: vec![-1.0, -1.0], upper: vec![1.0, 1.0], cells: vec![16, 16] };
        let f2 = grid_hjb_oracle(&p2, &spec2).unwrap();
        assert!(f2.values.iter().all(|z| (z - 1.0).abs() < 1e-12));
    }

    #[test]
    fn grid_oracle_obeys_maximum_principle() {
        // q = 0 with boundary data exp(0) and exp(-2): the solution is linear,
        // monotone and bracketed by the boundary values.
        let p = interval_problem(0.0, |x| x + 1.0);
        let spec = GridSpec { lower: vec![-1.0], upper: vec![1.0], cells: vec![50] };
        let f = grid_hjb_oracle(&p, &spec).unwrap();
        let (hi, lo) = (1.0, (-2.0f64).exp());
        for w in f.values.windows(2) {
            assert!(w[1] < w[0]);
        }
        assert!(f.values.iter().all(|z| *z <= hi + 1e-12 && *z >= lo - 1e-12));
        for (node, z) in f.values.iter().enumerate() {
            let x = f.spec.coords(node)[0];
            let linear = lo + (hi - lo) * (1.0 - x) / 2.0;
            assert!((z - linear).abs() < 1e-10);
        }
    }

    #[test]
    fn grid_oracle_refinement_is_first_order() {
        // Drift plus state cost: upwinding makes the scheme first order.
        let make = || {
            LsocProblem::new(
                Arc::new(ControlAffineDynamics::new_unchecked(
                    1,
                    1,
                    |x| DVector::from_vec(vec![1.0 - x[0]]),
                    |_| DMatrix::identity(1, 1),
                    DMatrix::identity(1, 1),
                )),
                Arc::new(|x| 0.5 + x[0] * x[0]),
                DMatrix::identity(1, 1),
                1.0,
                Arc::new(|x| 1.0 + x[0]),
                Arc::new(|x| if x[0].abs() >= 1.0 { StateClass::Exit } else { StateClass::Interior }),
            )
            .unwrap()
        };
        let solve = |cells| grid_hjb_oracle(&make(), &GridSpec { lower: vec![-1.0], upper: vec![1.0], cells: vec![cells] }).unwrap();
        let fine = solve(640);
        let err = |cells: usize| {
            let f = solve(cells);
            let ratio = 640 / cells;
            (0..=cells).map(|i| (f.values[i] - fine.values[i * ratio]).abs()).fold(0.0, f64::max)
        };
        let (e1, e2, e3) = (err(20), err(40), err(80));
        let r1 = e1 / e2;
        let r2 = e2 / e3;
        assert!(r1 > 1.6 && r1 < 3.0, "ratio {r1}");
        assert!(r2 > 1.6 && r2 < 3.0, "ratio {r2}");
    }

    #[test]
    fn grid_oracle_rejects_high_dimension() {
        let p =
            LsocProblem::new(brownian(3, 1.0), Arc::new(|_| 0.0), DMatrix::identity(3, 3), 1.0, Arc::new(|_| 0.0), Arc::new(|_| StateClass::Interior)).unwrap();
        let spec = GridSpec { lower: vec![0.0; 3], upper: vec![1.0; 3], cells: vec![4; 3] };
        assert!(grid_hjb_oracle(&p, &spec).is_err());
    }

    #[test]
    fn grid_oracle_reports_singular_operator() {
        // σ = 0, no drift, no cost: interior rows are identically zero.
        let p = LsocProblem::new_unchecked(
            brownian(1, 0.0),
            Arc::new(|_| 0.0),
            DMatrix::identity(1, 1),
            1.0,
            Arc::new(|_| 0.0),
            Arc::new(|_| StateClass::Interior),
        );
        let spec = GridSpec { lower: vec![0.0], upper: vec![1.0], cells: vec![8] };
        assert!(matches!(grid_hjb_oracle(&p, &spec), Err(LsocError::SingularOperator { node: 1, .. })));
    }

    #[test]
    fn pi_policy_is_deterministic_and_small_for_zero_cost() {
        let run = || {
            let prob = interval_problem(0.0, |_| 0.0);
            let mut policy = pi_policy(prob, PiConfig { rollouts: 256, horizon: 20, dt: 0.01, seed: 5, agent: 0 });
            (0..3).map(|_| policy(&DVector::from_vec(vec![0.0]), 0.0).unwrap()[0]).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        // Uniform weights: each estimate is a mean of 256 N(0, 100) draws.
        assert!(a.iter().all(|u| u.abs() < 4.0 * 10.0 / 16.0));
    }

    #[test]
    fn pi_controller_caches_its_batch() {
        let mut c = PiController::new(interval_problem(0.1, |x| x), PiConfig { rollouts: 32, horizon: 10, dt: 0.01, seed: 1, agent: 0 });
        assert!(c.last_batch().is_none());
        c.control(&[0.0]).unwrap();
        assert_eq!(c.last_batch().unwrap().len(), 32);
    }

    #[test]
    fn control_sign_points_toward_cheaper_boundary() {
        // φ = 0 on the left, 3 on the right: the control pushes left.
        let p = interval_problem(0.0, |x| if x > 0.0 { 3.0 } else { 0.0 });
        let b = rollout_batch(&p, &[0.0], 0.005, 2000, 4000, noise(9), false).unwrap();
        let est = estimate_optimal_control(&b, 1.0, 0.005).unwrap();
        assert!(est.control[0] < 0.0, "control {}", est.control[0]);
    }
}
