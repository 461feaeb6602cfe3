//! Experiment runners: single-task and composite executions, margin sweeps,
//! metrics and file exports.
//!
//! Every agent re-plans each step from a snapshot of the previous step's
//! states. Noise streams depend only on `(seed, step, agent, rollout)`, so
//! baseline and filtered runs with the same seed see the same disturbances
//! and results do not depend on the thread count.

mod export;
pub mod validate;

use std::time::Instant;

use nalgebra::DVector;
use serde::Serialize;
use thiserror::Error;

use crate::compose::{composite_control, safe_composite_control, state_weights, ComposeError, CompositionWeights};
use crate::lsoc::{control_from_costs, estimate_optimal_control, rollout_batch, BatchNoise, LsocError, LsocProblem, ScalarField};
use crate::mas::{assemble_joint, extract_local_control};
use crate::scenarios::{wrap_angle, Obstacle, RunGoal, Scenario, ScenarioError, TaskMode};
use crate::sde::{em_step_into, stream_id, ExitReason, NoiseStream, StreamPurpose, Trajectory};
use crate::zcbf::{safety_filter, AffineConstraint, Barrier, ZcbfError};

pub use export::{export, export_sweep, metrics_json, parse_trajectory_csv, paths_from_rows, sweep_csv, trajectory_csv, CsvRow};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "SAFE_LSOC_THREADS";

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("agent {agent} at step {step}: {source}")]
    Lsoc { agent: usize, step: usize, source: LsocError },
    #[error("agent {agent} at step {step}: {source}")]
    Compose { agent: usize, step: usize, source: ComposeError },
    #[error("agent {agent} state became non-finite at step {step}")]
    NonFinite { agent: usize, step: usize, partial: Box<RunResult> },
    #[error("I/O error at {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("invalid argument: {0}")]
    Argument(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunMode {
    /// Raw path-integral control.
    Baseline,
    /// Path-integral control projected onto the ZCBF constraints.
    Filtered,
}

impl RunMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            RunMode::Baseline => "baseline",
            RunMode::Filtered => "filtered",
        }
    }
}

impl std::str::FromStr for RunMode {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "baseline" => Ok(RunMode::Baseline),
            "filtered" => Ok(RunMode::Filtered),
            other => Err(HarnessError::Argument(format!("unknown mode {other:?}"))),
        }
    }
}

/// Distance statistics of one cooperating pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairDistance {
    pub agents: [usize; 2],
    pub initial: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    /// Executed control steps.
    pub steps: usize,
    /// `[agent][obstacle]` minimum distance to the obstacle center.
    pub min_center_distance: Vec<Vec<f64>>,
    /// Final distance of each agent to its run target.
    pub terminal_error: Vec<f64>,
    pub pair_distances: Vec<PairDistance>,
    /// Recorded agent states with `h_0 < 0` for some obstacle.
    pub safety_violations: usize,
    /// Agent steps where the applied control differs from the nominal one.
    pub filter_activations: usize,
}

/// Positions and controls of one agent, the inputs metrics are computed from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct AgentPath {
    pub positions: Vec<[f64; 2]>,
    pub applied: Vec<[f64; 2]>,
    pub nominal: Vec<[f64; 2]>,
}

impl Metrics {
    pub fn compute(obstacles: &[Obstacle], targets: &[[f64; 2]], pairs: &[[usize; 2]], paths: &[AgentPath]) -> Self {
        let steps = paths.iter().map(|p| p.applied.len()).max().unwrap_or(0);
        let mut min_center_distance = Vec::with_capacity(paths.len());
        let mut safety_violations = 0;
        let mut filter_activations = 0;
        let mut terminal_error = Vec::with_capacity(paths.len());
        for (i, p) in paths.iter().enumerate() {
            let mut mins = vec![f64::INFINITY; obstacles.len()];
            for pos in &p.positions {
                let mut violated = false;
                for (k, o) in obstacles.iter().enumerate() {
                    mins[k] = mins[k].min(o.center_distance(pos[0], pos[1]));
                    let h0 = o.barrier(0, 2).value(pos);
                    violated |= h0 < 0.0;
                }
                safety_violations += violated as usize;
            }
            min_center_distance.push(mins);
            filter_activations += p.applied.iter().zip(&p.nominal).filter(|(a, n)| a != n).count();
            let last = p.positions.last().copied().unwrap_or([f64::NAN; 2]);
            terminal_error.push((last[0] - targets[i][0]).hypot(last[1] - targets[i][1]));
        }
        let at = |p: &AgentPath, k: usize| p.positions[k.min(p.positions.len() - 1)];
        let pair_distances = pairs
            .iter()
            .filter(|[a, b]| *a < paths.len() && *b < paths.len() && !paths[*a].positions.is_empty() && !paths[*b].positions.is_empty())
            .map(|&[a, b]| {
                let d = |k: usize| {
                    let (pa, pb) = (at(&paths[a], k), at(&paths[b], k));
                    (pa[0] - pb[0]).hypot(pa[1] - pb[1])
                };
                let total: f64 = (0..=steps).map(d).sum();
                PairDistance { agents: [a, b], initial: d(0), mean: total / (steps + 1) as f64 }
            })
            .collect();
        Self { steps, min_center_distance, terminal_error, pair_distances, safety_violations, filter_activations }
    }
}

/// One execution and everything recorded along it.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub scenario: String,
    pub mode: RunMode,
    /// `single`, `component-<f>` or `composite`.
    pub task: String,
    pub seed: u64,
    /// Index of the kept attempt under best-of-N selection.
    pub attempt: usize,
    pub dt: f64,
    pub targets: Vec<[f64; 2]>,
    pub obstacles: Vec<Obstacle>,
    pub cooperative_pairs: Vec<[usize; 2]>,
    pub trajectories: Vec<Trajectory>,
    /// Control before the final safety projection, per agent and step.
    pub nominal_controls: Vec<Vec<DVector<f64>>>,
    /// `[agent][state][obstacle][level]` barrier values.
    pub barrier_values: Vec<Vec<Vec<Vec<f64>>>>,
    /// Steps whose estimate had an effective sample size below 2.
    pub degenerate_steps: usize,
    pub metrics: Metrics,
    /// Set when the run stopped on an infeasible safety QP.
    pub halted: Option<String>,
    /// Seconds; excluded from exports.
    pub wall_time: f64,
}

impl RunResult {
    pub fn agent_paths(&self) -> Vec<AgentPath> {
        self.trajectories
            .iter()
            .zip(&self.nominal_controls)
            .map(|(t, nom)| AgentPath {
                positions: t.states.iter().map(|s| [s[0], s[1]]).collect(),
                applied: t.controls.iter().map(|u| [u[0], u[1]]).collect(),
                nominal: nom.iter().map(|u| [u[0], u[1]]).collect(),
            })
            .collect()
    }

    pub fn recompute_metrics(&self) -> Metrics {
        Metrics::compute(&self.obstacles, &self.targets, &self.cooperative_pairs, &self.agent_paths())
    }

    pub fn exit_reasons(&self) -> Vec<ExitReason> {
        self.trajectories.iter().map(|t| t.exit_reason).collect()
    }

    pub fn is_halted(&self) -> bool {
        self.halted.is_some()
    }

    /// Fewest distance to the center of obstacle `k` over all agents.
    pub fn min_distance_to(&self, k: usize) -> f64 {
        self.metrics.min_center_distance.iter().map(|row| row[k]).fold(f64::INFINITY, f64::min)
    }
}

/// Caps the global worker pool from [`THREADS_ENV`]; later calls are no-ops.
pub fn configure_threads() {
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()).filter(|n| *n > 0) {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

enum Planner {
    Single { problems: Vec<LsocProblem> },
    Composite { problems: Vec<LsocProblem>, weights: Vec<CompositionWeights>, components: Vec<ScalarField> },
}

struct StepControl {
    nominal: DVector<f64>,
    applied: DVector<f64>,
    degenerate: bool,
}

enum StepFailure {
    Infeasible(ZcbfError),
    Lsoc(LsocError),
    Compose(ComposeError),
}

struct RunContext<'a> {
    scenario: &'a Scenario,
    mode: RunMode,
    goal: &'a RunGoal,
    planner: Planner,
    seed: u64,
}

impl RunContext<'_> {
    fn constraints(&self, agent: usize, x: &[f64]) -> Result<Vec<AffineConstraint>, ZcbfError> {
        let mut out = Vec::new();
        for chain in &self.scenario.chains[agent] {
            out.extend(chain.constraints(x)?);
        }
        Ok(out)
    }

    fn filter(&self, agent: usize, x: &[f64], u: &DVector<f64>) -> Result<DVector<f64>, ZcbfError> {
        match self.mode {
            RunMode::Baseline => Ok(u.clone()),
            RunMode::Filtered => safety_filter(u, &self.constraints(agent, x)?),
        }
    }

    fn control(&self, agent: usize, step: usize, joint: &DVector<f64>, x: &[f64]) -> Result<StepControl, StepFailure> {
        let pi = &self.scenario.file.pi;
        let dt = self.scenario.file.sim.dt;
        let sub = &self.scenario.subsystems[agent];
        let noise = BatchNoise { seed: self.seed, step: step as u64, agent: agent as u64 };
        let lambda = pi.temperature;
        match &self.planner {
            Planner::Single { problems } => {
                let batch = rollout_batch(&problems[agent], joint.as_slice(), dt, pi.horizon, pi.rollouts, noise, false).map_err(StepFailure::Lsoc)?;
                let est = estimate_optimal_control(&batch, lambda, dt).map_err(StepFailure::Lsoc)?;
                let nominal = extract_local_control(&est.control, sub).expect("subsystem dimensions");
                let applied = self.filter(agent, x, &nominal).map_err(StepFailure::Infeasible)?;
                Ok(StepControl { nominal, applied, degenerate: est.degenerate })
            }
            Planner::Composite { problems, weights, components } => {
                let batch = rollout_batch(&problems[agent], joint.as_slice(), dt, pi.horizon, pi.rollouts, noise, false).map_err(StepFailure::Lsoc)?;
                let mut log_z = Vec::with_capacity(components.len());
                let mut safe = Vec::with_capacity(components.len());
                let mut degenerate = false;
                for phi in components {
                    let costs = batch.path_costs(phi.as_ref());
                    let est = control_from_costs(&batch, &costs, lambda, dt).map_err(StepFailure::Lsoc)?;
                    let local = extract_local_control(&est.control, sub).expect("subsystem dimensions");
                    safe.push(self.filter(agent, x, &local).map_err(StepFailure::Infeasible)?);
                    log_z.push(est.log_z);
                    degenerate |= est.degenerate;
                }
                let w = state_weights(&weights[agent], &log_z).map_err(StepFailure::Compose)?;
                let nominal = composite_control(&w, &safe).map_err(StepFailure::Compose)?;
                let applied = match self.mode {
                    RunMode::Baseline => nominal.clone(),
                    RunMode::Filtered => {
                        let cons = self.constraints(agent, x).map_err(StepFailure::Infeasible)?;
                        safe_composite_control(&nominal, &cons).map_err(|e| match e {
                            ComposeError::Safety(z) => StepFailure::Infeasible(z),
                            other => StepFailure::Compose(other),
                        })?
                    }
                };
                Ok(StepControl { nominal, applied, degenerate })
            }
        }
    }
}

fn arrival(goal: &RunGoal, scenario: &Scenario, agent: usize, x: &[f64]) -> Option<ExitReason> {
    let (px, py) = (x[0], x[1]);
    let t = goal.targets[agent];
    if (px - t[0]).hypot(py - t[1]) <= goal.success_radius || goal.exit_balls[agent].iter().any(|(c, r)| (px - c[0]).hypot(py - c[1]) <= *r) {
        return Some(ExitReason::TargetReached);
    }
    let d = scenario.domain;
    if px < d[0] || px > d[1] || py < d[2] || py > d[3] {
        return Some(ExitReason::LeftDomain);
    }
    None
}

fn execute(ctx: RunContext<'_>, task: String) -> Result<RunResult, HarnessError> {
    let started = Instant::now();
    let scenario = ctx.scenario;
    let n = scenario.agent_count();
    let dt = scenario.file.sim.dt;
    let max_steps = (scenario.file.sim.max_time / dt - 1e-9).ceil() as usize;
    let mut states: Vec<DVector<f64>> = scenario.file.agents.iter().map(|a| DVector::from_column_slice(&a.start)).collect();
    let mut trajectories: Vec<Trajectory> = states.iter().map(|s| Trajectory::start(0.0, s.clone())).collect();
    let mut nominal_controls: Vec<Vec<DVector<f64>>> = vec![Vec::new(); n];
    let mut barrier_values: Vec<Vec<Vec<Vec<f64>>>> = (0..n).map(|i| vec![barrier_row(scenario, i, states[i].as_slice())]).collect();
    let mut done: Vec<Option<ExitReason>> = (0..n).map(|i| arrival(ctx.goal, scenario, i, states[i].as_slice())).collect();
    let mut degenerate_steps = 0;
    let mut halted = None;
    let mut scratch = [0.0; 2];
    let mut dw = [0.0; 2];
    let mut next = DVector::zeros(4);

    'steps: for step in 0..max_steps {
        if done.iter().all(Option::is_some) {
            break;
        }
        let snapshot = states.clone();
        let mut controls: Vec<Option<StepControl>> = Vec::with_capacity(n);
        for i in 0..n {
            if done[i].is_some() {
                controls.push(None);
                continue;
            }
            let joint = assemble_joint(&scenario.subsystems[i], &snapshot).expect("complete snapshot");
            match ctx.control(i, step, &joint, snapshot[i].as_slice()) {
                Ok(c) => controls.push(Some(c)),
                Err(StepFailure::Infeasible(e)) => {
                    halted = Some(format!("agent {i} at step {step}: {e}"));
                    for (d, t) in done.iter_mut().zip(trajectories.iter_mut()) {
                        if d.is_none() {
                            *d = Some(ExitReason::SafetyInfeasible);
                            t.exit_reason = ExitReason::SafetyInfeasible;
                        }
                    }
                    break 'steps;
                }
                Err(StepFailure::Lsoc(source)) => return Err(HarnessError::Lsoc { agent: i, step, source }),
                Err(StepFailure::Compose(source)) => return Err(HarnessError::Compose { agent: i, step, source }),
            }
        }
        let t = (step + 1) as f64 * dt;
        for (i, c) in controls.into_iter().enumerate() {
            let Some(c) = c else { continue };
            let mut stream = NoiseStream::new(ctx.seed, stream_id(StreamPurpose::Execution, step as u64, i as u64, 0));
            stream.fill_increments(dt, &mut dw);
            let dynamics = scenario.dynamics[i].as_ref();
            em_step_into(dynamics, states[i].as_slice(), c.applied.as_slice(), dt, &dw, &mut scratch, next.as_mut_slice());
            degenerate_steps += c.degenerate as usize;
            trajectories[i].push(c.applied, t, next.clone());
            nominal_controls[i].push(c.nominal);
            if !next.iter().all(|v| v.is_finite()) {
                let partial = assemble_result(&ctx, &task, trajectories, nominal_controls, barrier_values, degenerate_steps, halted, started);
                return Err(HarnessError::NonFinite { agent: i, step, partial: Box::new(partial) });
            }
            states[i].copy_from(&next);
            barrier_values[i].push(barrier_row(scenario, i, states[i].as_slice()));
            if let Some(reason) = arrival(ctx.goal, scenario, i, states[i].as_slice()) {
                done[i] = Some(reason);
            }
        }
    }
    for (d, t) in done.iter().zip(trajectories.iter_mut()) {
        t.exit_reason = d.unwrap_or(ExitReason::MaxTime);
    }
    Ok(assemble_result(&ctx, &task, trajectories, nominal_controls, barrier_values, degenerate_steps, halted, started))
}

#[allow(clippy::too_many_arguments)]
fn assemble_result(
    ctx: &RunContext<'_>,
    task: &str,
    trajectories: Vec<Trajectory>,
    nominal_controls: Vec<Vec<DVector<f64>>>,
    barrier_values: Vec<Vec<Vec<Vec<f64>>>>,
    degenerate_steps: usize,
    halted: Option<String>,
    started: Instant,
) -> RunResult {
    let scenario = ctx.scenario;
    let mut result = RunResult {
        scenario: scenario.name().to_string(),
        mode: ctx.mode,
        task: task.to_string(),
        seed: ctx.seed,
        attempt: 0,
        dt: scenario.file.sim.dt,
        targets: ctx.goal.targets.clone(),
        obstacles: scenario.obstacles().to_vec(),
        cooperative_pairs: scenario.file.costs.cooperative_pairs.clone(),
        trajectories,
        nominal_controls,
        barrier_values,
        degenerate_steps,
        metrics: Metrics::compute(&[], &[], &[], &[]),
        halted,
        wall_time: 0.0,
    };
    result.metrics = result.recompute_metrics();
    result.wall_time = started.elapsed().as_secs_f64();
    result
}

fn barrier_row(scenario: &Scenario, agent: usize, x: &[f64]) -> Vec<Vec<f64>> {
    scenario.chains[agent].iter().map(|c| c.values(x)).collect()
}

fn single_planner(scenario: &Scenario, goal: &RunGoal) -> Planner {
    Planner::Single { problems: (0..scenario.agent_count()).map(|i| scenario.goal_problem(i, goal)).collect() }
}

/// Runs every agent toward its own target.
pub fn run_task(scenario: &Scenario, mode: RunMode, seed: u64) -> Result<RunResult, HarnessError> {
    let goal = scenario.single_goal();
    let ctx = RunContext { scenario, mode, goal: &goal, planner: single_planner(scenario, &goal), seed };
    execute(ctx, "single".into())
}

/// Runs component `f` of a composite or component-set scenario on its own.
pub fn run_component(scenario: &Scenario, component: usize, mode: RunMode, seed: u64) -> Result<RunResult, HarnessError> {
    if component >= scenario.file.task.components.len() {
        return Err(HarnessError::Argument(format!("scenario has no component {component}")));
    }
    let goal = scenario.component_goal(component);
    let ctx = RunContext { scenario, mode, goal: &goal, planner: single_planner(scenario, &goal), seed };
    execute(ctx, format!("component-{component}"))
}

fn attempt_seed(seed: u64, attempt: usize) -> u64 {
    if attempt == 0 {
        return seed;
    }
    // splitmix64 finalizer over (seed, attempt)
    let mut z = seed ^ (attempt as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Composite execution toward the new target; with `task.best_of > 1` the
/// attempt with the least summed terminal error is kept.
pub fn run_generalization(scenario: &Scenario, mode: RunMode, seed: u64) -> Result<RunResult, HarnessError> {
    if scenario.file.task.mode != TaskMode::Composite || scenario.file.task.new_target.is_none() {
        return Err(HarnessError::Argument("scenario is not in composite mode".into()));
    }
    let goal = scenario.composite_goal();
    let mut best: Option<RunResult> = None;
    for attempt in 0..scenario.file.task.best_of {
        let mut problems = Vec::with_capacity(scenario.agent_count());
        let mut weights = Vec::with_capacity(scenario.agent_count());
        for i in 0..scenario.agent_count() {
            let phi = scenario.composite_final_cost(i).map_err(|source| HarnessError::Compose { agent: i, step: 0, source })?;
            problems.push(scenario.subsystem_problem(i, &goal, phi));
            weights.push(scenario.composition_weights(i).map_err(|source| HarnessError::Compose { agent: i, step: 0, source })?);
        }
        let planner = Planner::Composite { problems, weights, components: scenario.component_final_costs() };
        let ctx = RunContext { scenario, mode, goal: &goal, planner, seed: attempt_seed(seed, attempt) };
        let mut r = execute(ctx, "composite".into())?;
        r.seed = seed;
        r.attempt = attempt;
        let score = |r: &RunResult| r.metrics.terminal_error.iter().sum::<f64>();
        if best.as_ref().is_none_or(|b| score(&r) < score(b)) {
            best = Some(r);
        }
    }
    Ok(best.expect("best_of ≥ 1"))
}

/// Runs a scenario according to its task mode.
pub fn run_scenario(scenario: &Scenario, mode: RunMode, seed: u64) -> Result<Vec<RunResult>, HarnessError> {
    match scenario.file.task.mode {
        TaskMode::Single => Ok(vec![run_task(scenario, mode, seed)?]),
        TaskMode::ComponentSet => (0..scenario.file.task.components.len()).map(|f| run_component(scenario, f, mode, seed)).collect(),
        TaskMode::Composite => Ok(vec![run_generalization(scenario, mode, seed)?]),
    }
}

/// One row of the margin sweep table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub margin: f64,
    pub mode: RunMode,
    pub obstacle: usize,
    /// `r_c + D_s`.
    pub threshold: f64,
    pub min: f64,
    pub mean: f64,
    pub max: f64,
    /// Runs whose minimum distance fell below the threshold.
    pub below_threshold: usize,
    pub runs: usize,
    pub halted: usize,
}

/// Minimum center distance per obstacle across seeds for each margin and
/// mode; runs use each agent's own target.
pub fn margin_sweep(scenario: &Scenario, margins: &[f64], seeds: &[u64], modes: &[RunMode]) -> Result<Vec<SweepRow>, HarnessError> {
    if margins.is_empty() || seeds.is_empty() || modes.is_empty() {
        return Err(HarnessError::Argument("margin sweep needs margins, seeds and modes".into()));
    }
    let mut rows = Vec::new();
    for &margin in margins {
        let s = scenario.with_margin(margin)?;
        for &mode in modes {
            let results: Vec<RunResult> = seeds.iter().map(|seed| run_task(&s, mode, *seed)).collect::<Result<_, _>>()?;
            for (k, o) in s.obstacles().iter().enumerate() {
                let mins: Vec<f64> = results.iter().map(|r| r.min_distance_to(k)).collect();
                let threshold = o.threshold();
                rows.push(SweepRow {
                    margin,
                    mode,
                    obstacle: k,
                    threshold,
                    min: mins.iter().copied().fold(f64::INFINITY, f64::min),
                    mean: mins.iter().sum::<f64>() / mins.len() as f64,
                    max: mins.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                    below_threshold: mins.iter().filter(|m| **m < threshold).count(),
                    runs: mins.len(),
                    halted: results.iter().filter(|r| r.is_halted()).count(),
                });
            }
        }
    }
    Ok(rows)
}

/// Heading reported in `(-π, π]`.
pub(crate) fn reported_heading(phi: f64) -> f64 {
    wrap_angle(phi)
}
