//! Planar unicycle UAVs, their running and final costs, circular obstacles,
//! and the JSON scenario file.
//!
//! State `(x, y, v, φ)`, inputs `(a, ω)` acting on `v` and `φ`:
//! `ẋ = v cos φ`, `ẏ = v sin φ`, `v̇ = a`, `φ̇ = ω`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::compose::{composite_final_cost_tempered, composition_weights, position_kernel, CompositionWeights};
use crate::lsoc::{Classifier, LsocProblem, ScalarField, StateClass};
use crate::mas::{build_subsystems, joint_dynamics, AgentGraph, FactorialSubsystem};
use crate::sde::{derive_control_weight, validate_lambda_condition, ControlAffine};
use crate::zcbf::{in_safe_set, Barrier, CircleBarrier, ZcbfChain};

pub const UAV_STATE_DIM: usize = 4;
pub const UAV_INPUT_DIM: usize = 2;
pub const DEFAULT_NOISE: [f64; 2] = [0.05, 0.025];
pub const DEFAULT_SOFT_COST: f64 = 160.0;
pub const COOP_GOAL_WEIGHT: f64 = 0.7;
pub const COOP_PAIR_WEIGHT: f64 = 1.4;

const BUNDLED: &[(&str, &str)] = &[
    ("single_uav", include_str!("../scenarios/single_uav.json")),
    ("single_composition", include_str!("../scenarios/single_composition.json")),
    ("team_of_three", include_str!("../scenarios/team_of_three.json")),
    ("team_of_five_composition", include_str!("../scenarios/team_of_five_composition.json")),
];

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("schema violation at {location}: {message}")]
    Schema { location: String, message: String },
    #[error("λ-condition fails for agent {agent}: σσᵀ ≠ λR⁻¹")]
    LambdaCondition { agent: usize },
    #[error("unsafe start for (agent, obstacle) pairs {pairs:?}")]
    UnsafeStart { pairs: Vec<(usize, usize)> },
    #[error("unknown bundled scenario {0:?}")]
    UnknownBundled(String),
}

fn schema(location: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Schema { location: location.into(), message: message.into() }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UavState {
    pub x: f64,
    pub y: f64,
    pub v: f64,
    pub phi: f64,
}

impl UavState {
    pub fn from_slice(s: &[f64]) -> Self {
        Self { x: s[0], y: s[1], v: s[2], phi: s[3] }
    }

    pub fn to_vec(self) -> Vec<f64> {
        vec![self.x, self.y, self.v, self.phi]
    }

    /// Heading wrapped to `(-π, π]`, for reporting.
    pub fn wrapped_heading(&self) -> f64 {
        wrap_angle(self.phi)
    }
}

pub fn wrap_angle(phi: f64) -> f64 {
    use std::f64::consts::{PI, TAU};
    let mut a = phi.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    a
}

pub fn uav_drift(s: &UavState) -> [f64; 4] {
    [s.v * s.phi.cos(), s.v * s.phi.sin(), 0.0, 0.0]
}

/// Unicycle with inputs on `v` and `φ` and diagonal noise.
#[derive(Debug, Clone)]
pub struct UavDynamics {
    sigma: DMatrix<f64>,
}

impl UavDynamics {
    pub fn new(noise: [f64; 2]) -> Self {
        Self { sigma: DMatrix::from_diagonal(&DVector::from_column_slice(&noise)) }
    }
}

impl Default for UavDynamics {
    fn default() -> Self {
        Self::new(DEFAULT_NOISE)
    }
}

impl ControlAffine for UavDynamics {
    fn state_dim(&self) -> usize {
        UAV_STATE_DIM
    }

    fn input_dim(&self) -> usize {
        UAV_INPUT_DIM
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        let (s, c) = x[3].sin_cos();
        out[0] = x[2] * c;
        out[1] = x[2] * s;
        out[2] = 0.0;
        out[3] = 0.0;
    }

    fn control_matrix(&self, _x: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(4, 2, &[0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0])
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    fn add_input(&self, _x: &[f64], v: &[f64], out: &mut [f64]) {
        out[2] += v[0];
        out[3] += v[1];
    }

    fn drift_jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let (s, c) = x[3].sin_cos();
        let v = x[2];
        Some(DMatrix::from_row_slice(4, 4, &[0.0, 0.0, c, -v * s, 0.0, 0.0, s, v * c, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Obstacle {
    pub center: [f64; 2],
    pub radius: f64,
    pub margin: f64,
    #[serde(default = "default_soft_cost")]
    pub soft_cost: f64,
}

fn default_soft_cost() -> f64 {
    DEFAULT_SOFT_COST
}

impl Obstacle {
    pub fn center_distance(&self, x: f64, y: f64) -> f64 {
        planar_norm(x - self.center[0], y - self.center[1])
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        dx * dx + dy * dy < self.radius * self.radius
    }

    /// Clearance threshold `r_c + D_s`.
    pub fn threshold(&self) -> f64 {
        self.radius + self.margin
    }

    pub fn barrier(&self, offset: usize, state_dim: usize) -> CircleBarrier {
        CircleBarrier { center: self.center, radius: self.radius, margin: self.margin, state_dim, offset }
    }
}

fn obstacle_penalty(obstacles: &[Obstacle], x: f64, y: f64) -> f64 {
    obstacles.iter().filter(|o| o.contains(x, y)).map(|o| o.soft_cost).sum()
}

/// `max(0, ‖p − p_d‖ − d_max + obstacle penalties)`.
pub fn running_cost_single(pos: [f64; 2], target: [f64; 2], d_max: f64, obstacles: &[Obstacle]) -> f64 {
    let goal = planar_norm(pos[0] - target[0], pos[1] - target[1]) - d_max;
    (goal + obstacle_penalty(obstacles, pos[0], pos[1])).max(0.0)
}

/// Running cost of a subsystem with the central agent in block 0.
#[derive(Debug, Clone, PartialEq)]
pub struct CoopCost {
    pub target: [f64; 2],
    pub d_max: f64,
    pub goal_weight: f64,
    pub pair_weight: f64,
    /// `(block, d_ij_max)` for each cooperating partner.
    pub partners: Vec<(usize, f64)>,
    pub obstacles: Vec<Obstacle>,
}

impl CoopCost {
    pub fn eval(&self, joint: &[f64]) -> f64 {
        let (x, y) = (joint[0], joint[1]);
        let mut q = self.goal_weight * (planar_norm(x - self.target[0], y - self.target[1]) - self.d_max);
        for (block, d) in &self.partners {
            let o = block * UAV_STATE_DIM;
            q += self.pair_weight * (planar_norm(x - joint[o], y - joint[o + 1]) - d);
        }
        (q + obstacle_penalty(&self.obstacles, x, y)).max(0.0)
    }
}

/// Cooperative running cost `0.7·(goal) + 1.4·Σ(pair)`, clamped at 0.
pub fn running_cost_coop(joint: &[f64], params: &CoopCost) -> Result<f64, ScenarioError> {
    if params.partners.is_empty() {
        return Err(schema("costs.cooperative_pairs", "pairwise term requested for an agent without partners"));
    }
    if params.partners.iter().any(|(b, _)| (b + 1) * UAV_STATE_DIM > joint.len()) {
        return Err(schema("costs.cooperative_pairs", "partner block outside the joint state"));
    }
    Ok(params.eval(joint))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinalCostParams {
    #[serde(default)]
    pub c: f64,
    #[serde(default = "default_d")]
    pub d: f64,
    #[serde(default)]
    pub alpha: f64,
}

fn default_d() -> f64 {
    2.0
}

impl Default for FinalCostParams {
    fn default() -> Self {
        Self { c: 0.0, d: 2.0, alpha: 0.0 }
    }
}

/// How `|x − x_d|` in the final cost is read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeviationMetric {
    /// `|x − x_d| + |y − y_d|`.
    #[default]
    PositionL1,
    /// `|x − x_d|` only.
    XOnly,
    /// `‖(x, y) − (x_d, y_d)‖₂`. L1 rewards diagonal motion, which pulls the
    /// heading toward 45° regardless of the target bearing.
    PositionL2,
}

/// `φ = (d/2)(|p − p_d| + c) + α`.
pub fn final_cost(pos: [f64; 2], params: &FinalCostParams, target: [f64; 2], metric: DeviationMetric) -> f64 {
    let dev = match metric {
        DeviationMetric::PositionL1 => (pos[0] - target[0]).abs() + (pos[1] - target[1]).abs(),
        DeviationMetric::XOnly => (pos[0] - target[0]).abs(),
        DeviationMetric::PositionL2 => planar_norm(pos[0] - target[0], pos[1] - target[1]),
    };
    0.5 * params.d * (dev + params.c) + params.alpha
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentSpec {
    /// `(x, y, v, φ)`.
    pub start: [f64; 4],
    pub target: [f64; 2],
    #[serde(default = "default_noise")]
    pub noise: [f64; 2],
}

fn default_noise() -> [f64; 2] {
    DEFAULT_NOISE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostSpec {
    #[serde(default = "default_goal_weight")]
    pub goal_weight: f64,
    #[serde(default = "default_pair_weight")]
    pub pair_weight: f64,
    /// Pairs flying distance-minimized; each pair must also be an edge.
    #[serde(default)]
    pub cooperative_pairs: Vec<[usize; 2]>,
    #[serde(default)]
    pub final_cost: FinalCostParams,
    #[serde(default)]
    pub deviation: DeviationMetric,
}

fn default_goal_weight() -> f64 {
    COOP_GOAL_WEIGHT
}

fn default_pair_weight() -> f64 {
    COOP_PAIR_WEIGHT
}

impl Default for CostSpec {
    fn default() -> Self {
        Self {
            goal_weight: COOP_GOAL_WEIGHT,
            pair_weight: COOP_PAIR_WEIGHT,
            cooperative_pairs: Vec::new(),
            final_cost: FinalCostParams::default(),
            deviation: DeviationMetric::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PiSpec {
    #[serde(default = "default_rollouts")]
    pub rollouts: usize,
    #[serde(default = "default_horizon")]
    pub horizon: usize,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_target_radius")]
    pub target_radius: f64,
    /// `[x_min, x_max, y_min, y_max]`; derived from the scene when absent.
    #[serde(default)]
    pub domain: Option<[f64; 4]>,
    /// Optional explicit `R` (same for every agent), checked against λ and σ.
    #[serde(default)]
    pub control_weight: Option<[[f64; 2]; 2]>,
}

fn default_rollouts() -> usize {
    2000
}
fn default_horizon() -> usize {
    60
}
fn default_temperature() -> f64 {
    1.0
}
fn default_target_radius() -> f64 {
    1.0
}

impl Default for PiSpec {
    fn default() -> Self {
        Self {
            rollouts: default_rollouts(),
            horizon: default_horizon(),
            temperature: default_temperature(),
            target_radius: default_target_radius(),
            domain: None,
            control_weight: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimSpec {
    #[serde(default = "default_dt")]
    pub dt: f64,
    pub max_time: f64,
    #[serde(default)]
    pub seeds: Vec<u64>,
}

fn default_dt() -> f64 {
    0.05
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    #[default]
    Single,
    ComponentSet,
    Composite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentSpec {
    /// Target shared by every agent in this component.
    pub target: [f64; 2],
    #[serde(default)]
    pub final_cost: Option<FinalCostParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    #[serde(default)]
    pub mode: TaskMode,
    #[serde(default)]
    pub components: Vec<ComponentSpec>,
    #[serde(default)]
    pub new_target: Option<[f64; 2]>,
    #[serde(default = "default_kernel_width")]
    pub kernel_width: f64,
    #[serde(default = "default_success_radius")]
    pub success_radius: f64,
    /// Runs per seed in composite mode; the one with the smallest summed
    /// terminal error is kept.
    #[serde(default = "default_best_of")]
    pub best_of: usize,
}

fn default_kernel_width() -> f64 {
    crate::compose::DEFAULT_KERNEL_WIDTH
}
fn default_success_radius() -> f64 {
    3.0
}
fn default_best_of() -> usize {
    1
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            mode: TaskMode::Single,
            components: Vec::new(),
            new_target: None,
            kernel_width: default_kernel_width(),
            success_radius: default_success_radius(),
            best_of: default_best_of(),
        }
    }
}

/// The scenario document as written on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub agents: Vec<AgentSpec>,
    #[serde(default)]
    pub edges: Vec<[usize; 2]>,
    #[serde(default)]
    pub obstacles: Vec<Obstacle>,
    #[serde(default)]
    pub costs: CostSpec,
    #[serde(default)]
    pub pi: PiSpec,
    pub sim: SimSpec,
    #[serde(default)]
    pub task: TaskSpec,
}

/// Goal of one run: what each agent steers to and where rollouts stop.
#[derive(Debug, Clone, PartialEq)]
pub struct RunGoal {
    /// Running-cost and final-cost target per agent.
    pub targets: Vec<[f64; 2]>,
    /// Final-cost parameters of the run.
    pub final_cost: FinalCostParams,
    /// Rollout exit balls: `(center, radius)` per agent.
    pub exit_balls: Vec<Vec<([f64; 2], f64)>>,
    /// Execution stops once an agent is within this distance of its target.
    pub success_radius: f64,
}

/// A validated scenario with derived quantities.
#[derive(Clone)]
pub struct Scenario {
    pub file: ScenarioFile,
    pub graph: AgentGraph,
    pub subsystems: Vec<FactorialSubsystem>,
    pub dynamics: Vec<Arc<dyn ControlAffine>>,
    /// `R = λ(σσᵀ)⁻¹` per agent.
    pub control_weights: Vec<DMatrix<f64>>,
    /// Distance from each start to its own target.
    pub d_max: Vec<f64>,
    /// Initial distances of cooperating pairs, keyed `(min, max)`.
    pub pair_d_max: BTreeMap<(usize, usize), f64>,
    /// `[agent][obstacle]` barrier chains on the agent's own state.
    pub chains: Vec<Vec<ZcbfChain>>,
    pub domain: [f64; 4],
}

impl fmt::Debug for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Scenario")
            .field("name", &self.file.name)
            .field("agents", &self.file.agents.len())
            .field("obstacles", &self.file.obstacles.len())
            .field("mode", &self.file.task.mode)
            .finish_non_exhaustive()
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    planar_norm(a[0] - b[0], a[1] - b[1])
}

/// `√(dx² + dy²)`; `hypot`'s overflow guard is slow in rollouts and scenario
/// coordinates are nowhere near overflow.
#[inline]
pub(crate) fn planar_norm(dx: f64, dy: f64) -> f64 {
    (dx * dx + dy * dy).sqrt()
}

fn start_pos(a: &AgentSpec) -> [f64; 2] {
    [a.start[0], a.start[1]]
}

pub fn parse_scenario(text: &str) -> Result<ScenarioFile, ScenarioError> {
    serde_json::from_str(text).map_err(|e| ScenarioError::Parse { line: e.line(), column: e.column(), message: e.to_string() })
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io { path: path.display().to_string(), source })?;
    Scenario::from_file(parse_scenario(&text)?)
}

pub fn bundled_names() -> Vec<&'static str> {
    BUNDLED.iter().map(|(n, _)| *n).collect()
}

/// Sample states for relative-degree detection around a scene.
fn detection_samples(domain: [f64; 4]) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (i, fx) in [0.1, 0.35, 0.6, 0.85].iter().enumerate() {
        for (j, fy) in [0.15, 0.5, 0.9].iter().enumerate() {
            let x = domain[0] + fx * (domain[1] - domain[0]);
            let y = domain[2] + fy * (domain[3] - domain[2]);
            out.push(vec![x, y, 0.5 + 0.5 * (i + j) as f64, 0.4 * (i as f64) - 0.7 * (j as f64)]);
        }
    }
    out
}

impl Scenario {
    pub fn bundled(name: &str) -> Result<Self, ScenarioError> {
        let (_, text) = BUNDLED.iter().find(|(n, _)| *n == name).ok_or_else(|| ScenarioError::UnknownBundled(name.to_string()))?;
        Self::from_file(parse_scenario(text)?)
    }

    pub fn name(&self) -> &str {
        &self.file.name
    }

    pub fn agent_count(&self) -> usize {
        self.file.agents.len()
    }

    pub fn obstacles(&self) -> &[Obstacle] {
        &self.file.obstacles
    }

    pub fn from_file(file: ScenarioFile) -> Result<Self, ScenarioError> {
        validate_schema(&file)?;
        let n = file.agents.len();
        let edges: Vec<(usize, usize)> = file.edges.iter().map(|e| (e[0], e[1])).collect();
        let graph = AgentGraph::new(n, &edges).map_err(|e| schema("edges", e.to_string()))?;
        for (k, p) in file.costs.cooperative_pairs.iter().enumerate() {
            if p[0] >= n || p[1] >= n || p[0] == p[1] {
                return Err(schema(format!("costs.cooperative_pairs[{k}]"), "invalid agent pair"));
            }
            if !graph.are_adjacent(p[0], p[1]) {
                return Err(schema(format!("costs.cooperative_pairs[{k}]"), "cooperating agents must share an edge"));
            }
        }
        let subsystems = build_subsystems(&graph, UAV_STATE_DIM, UAV_INPUT_DIM);
        let lambda = file.pi.temperature;
        let mut dynamics: Vec<Arc<dyn ControlAffine>> = Vec::with_capacity(n);
        let mut control_weights = Vec::with_capacity(n);
        for (i, a) in file.agents.iter().enumerate() {
            let d = UavDynamics::new(a.noise);
            let r = match file.pi.control_weight {
                Some(rw) => DMatrix::from_row_slice(2, 2, &[rw[0][0], rw[0][1], rw[1][0], rw[1][1]]),
                None => derive_control_weight(d.noise_cov(), lambda).map_err(|e| schema(format!("agents[{i}].noise"), e.to_string()))?,
            };
            let tol = 1e-9 * (d.noise_cov() * d.noise_cov().transpose()).amax().max(1e-300);
            match validate_lambda_condition(&r, d.noise_cov(), lambda, tol) {
                Ok(true) => {}
                _ => return Err(ScenarioError::LambdaCondition { agent: i }),
            }
            dynamics.push(Arc::new(d));
            control_weights.push(r);
        }
        let d_max = file.agents.iter().map(|a| dist(start_pos(a), a.target)).collect();
        let pair_d_max = file
            .costs
            .cooperative_pairs
            .iter()
            .map(|p| {
                let (a, b) = (p[0].min(p[1]), p[0].max(p[1]));
                ((a, b), dist(start_pos(&file.agents[a]), start_pos(&file.agents[b])))
            })
            .collect();
        let domain = file.pi.domain.unwrap_or_else(|| default_domain(&file));
        let samples = detection_samples(domain);
        let mut chains = Vec::with_capacity(n);
        let mut unsafe_pairs = Vec::new();
        for (i, a) in file.agents.iter().enumerate() {
            let mut row = Vec::with_capacity(file.obstacles.len());
            for (k, o) in file.obstacles.iter().enumerate() {
                let h0: Arc<dyn Barrier> = Arc::new(o.barrier(0, UAV_STATE_DIM));
                let chain = ZcbfChain::build(h0, dynamics[i].clone(), &samples, o.margin, k).map_err(|e| schema(format!("obstacles[{k}]"), e.to_string()))?;
                if !in_safe_set(&chain, &a.start) {
                    unsafe_pairs.push((i, k));
                }
                row.push(chain);
            }
            chains.push(row);
        }
        if !unsafe_pairs.is_empty() {
            return Err(ScenarioError::UnsafeStart { pairs: unsafe_pairs });
        }
        Ok(Self { file, graph, subsystems, dynamics, control_weights, d_max, pair_d_max, chains, domain })
    }

    /// Copy with every obstacle margin replaced; chains are rebuilt and the
    /// start states re-checked.
    pub fn with_margin(&self, margin: f64) -> Result<Self, ScenarioError> {
        let mut file = self.file.clone();
        for o in &mut file.obstacles {
            o.margin = margin;
        }
        Self::from_file(file)
    }

    pub fn pair_distance(&self, a: usize, b: usize) -> Option<f64> {
        self.pair_d_max.get(&(a.min(b), a.max(b))).copied()
    }

    /// Each agent flies to its own target.
    pub fn single_goal(&self) -> RunGoal {
        let targets: Vec<[f64; 2]> = self.file.agents.iter().map(|a| a.target).collect();
        self.goal_for(targets, self.file.costs.final_cost, None)
    }

    /// Every agent flies to component `f`'s target.
    pub fn component_goal(&self, f: usize) -> RunGoal {
        let c = &self.file.task.components[f];
        let targets = vec![c.target; self.agent_count()];
        self.goal_for(targets, c.final_cost.unwrap_or(self.file.costs.final_cost), None)
    }

    /// Composite run: steer to the new target; rollouts exit on any
    /// component target ball.
    pub fn composite_goal(&self) -> RunGoal {
        let t = self.file.task.new_target.expect("validated composite scenario");
        let mut g = self.goal_for(vec![t; self.agent_count()], self.file.costs.final_cost, Some(self.file.task.success_radius));
        let rho = self.file.pi.target_radius;
        let balls: Vec<([f64; 2], f64)> = self.file.task.components.iter().map(|c| (c.target, rho)).collect();
        g.exit_balls = vec![balls; self.agent_count()];
        g
    }

    fn goal_for(&self, targets: Vec<[f64; 2]>, final_cost: FinalCostParams, success: Option<f64>) -> RunGoal {
        let rho = self.file.pi.target_radius;
        let exit_balls = targets.iter().map(|t| vec![(*t, rho)]).collect();
        RunGoal { targets, final_cost, exit_balls, success_radius: success.unwrap_or(rho) }
    }

    /// Running cost of agent `i`'s subsystem toward `target`.
    pub fn subsystem_cost(&self, agent: usize, target: [f64; 2]) -> CoopCost {
        let sub = &self.subsystems[agent];
        let partners: Vec<(usize, f64)> = self
            .file
            .costs
            .cooperative_pairs
            .iter()
            .filter_map(|p| {
                let other = if p[0] == agent {
                    p[1]
                } else if p[1] == agent {
                    p[0]
                } else {
                    return None;
                };
                let slot = sub.slot(other).expect("cooperating agents are adjacent");
                Some((slot, self.pair_distance(agent, other).expect("derived at load")))
            })
            .collect();
        let goal_weight = if partners.is_empty() { 1.0 } else { self.file.costs.goal_weight };
        CoopCost {
            target,
            d_max: dist(start_pos(&self.file.agents[agent]), target),
            goal_weight,
            pair_weight: self.file.costs.pair_weight,
            partners,
            obstacles: self.file.obstacles.clone(),
        }
    }

    /// Final cost on the central agent's position.
    pub fn final_cost_field(&self, target: [f64; 2], params: FinalCostParams) -> ScalarField {
        let metric = self.file.costs.deviation;
        Arc::new(move |x: &[f64]| final_cost([x[0], x[1]], &params, target, metric))
    }

    fn classifier(&self, balls: Vec<([f64; 2], f64)>) -> Classifier {
        let obstacles = self.file.obstacles.clone();
        let dom = self.domain;
        Arc::new(move |x: &[f64]| {
            let (px, py) = (x[0], x[1]);
            if obstacles.iter().any(|o| o.contains(px, py)) {
                return StateClass::Absorb;
            }
            if balls.iter().any(|(c, r)| dist([px, py], *c) <= *r) || px < dom[0] || px > dom[1] || py < dom[2] || py > dom[3] {
                return StateClass::Exit;
            }
            StateClass::Interior
        })
    }

    /// LSOC problem of agent `i`'s subsystem under `goal`, with final cost
    /// `final_cost` on the joint state.
    pub fn subsystem_problem(&self, agent: usize, goal: &RunGoal, final_cost: ScalarField) -> LsocProblem {
        let sub = &self.subsystems[agent];
        let dynamics = joint_dynamics(sub, &self.dynamics).expect("uniform UAV dimensions");
        let cost = self.subsystem_cost(agent, goal.targets[agent]);
        let lambda = self.file.pi.temperature;
        let r = crate::numeric::block_diagonal(&sub.members.iter().map(|m| &self.control_weights[*m]).collect::<Vec<_>>());
        LsocProblem::new_unchecked(dynamics, Arc::new(move |x: &[f64]| cost.eval(x)), r, lambda, final_cost, self.classifier(goal.exit_balls[agent].clone()))
    }

    /// Problem of agent `i` for a single-target goal.
    pub fn goal_problem(&self, agent: usize, goal: &RunGoal) -> LsocProblem {
        let phi = self.final_cost_field(goal.targets[agent], goal.final_cost);
        self.subsystem_problem(agent, goal, phi)
    }

    /// Component final costs for agent `i` (central position only).
    pub fn component_final_costs(&self) -> Vec<ScalarField> {
        self.file.task.components.iter().map(|c| self.final_cost_field(c.target, c.final_cost.unwrap_or(self.file.costs.final_cost))).collect()
    }

    /// Kernel weights of agent `i`'s subsystem: joint terminal states built
    /// from target positions with zero velocity and heading.
    pub fn composition_weights(&self, agent: usize) -> Result<CompositionWeights, crate::compose::ComposeError> {
        let sub = &self.subsystems[agent];
        let dim = sub.joint_state_dim();
        let joint_target = |t: [f64; 2]| {
            let mut v = DVector::zeros(dim);
            for slot in 0..sub.size() {
                v[slot * UAV_STATE_DIM] = t[0];
                v[slot * UAV_STATE_DIM + 1] = t[1];
            }
            v
        };
        let positions: Vec<usize> = (0..sub.size()).flat_map(|s| [s * UAV_STATE_DIM, s * UAV_STATE_DIM + 1]).collect();
        let kernel = position_kernel(dim, &positions, self.file.task.kernel_width);
        let targets: Vec<DVector<f64>> = self.file.task.components.iter().map(|c| joint_target(c.target)).collect();
        let new_target = joint_target(self.file.task.new_target.expect("validated composite scenario"));
        composition_weights(&targets, &new_target, &kernel)
    }

    /// Composite final cost `-λ log Σ ω̃ exp(-φ^f/λ)` of agent `i`.
    pub fn composite_final_cost(&self, agent: usize) -> Result<ScalarField, crate::compose::ComposeError> {
        let w = self.composition_weights(agent)?;
        composite_final_cost_tempered(&self.component_final_costs(), &w, self.file.pi.temperature)
    }
}

fn default_domain(file: &ScenarioFile) -> [f64; 4] {
    let mut pts: Vec<[f64; 2]> = Vec::new();
    for a in &file.agents {
        pts.push(start_pos(a));
        pts.push(a.target);
    }
    for o in &file.obstacles {
        pts.push(o.center);
    }
    for c in &file.task.components {
        pts.push(c.target);
    }
    if let Some(t) = file.task.new_target {
        pts.push(t);
    }
    let pad = 15.0;
    let xs = pts.iter().map(|p| p[0]);
    let ys = pts.iter().map(|p| p[1]);
    [
        xs.clone().fold(f64::INFINITY, f64::min) - pad,
        xs.fold(f64::NEG_INFINITY, f64::max) + pad,
        ys.clone().fold(f64::INFINITY, f64::min) - pad,
        ys.fold(f64::NEG_INFINITY, f64::max) + pad,
    ]
}

fn finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}

fn validate_schema(f: &ScenarioFile) -> Result<(), ScenarioError> {
    if f.agents.is_empty() {
        return Err(schema("agents", "at least one agent is required"));
    }
    if f.agents.len() > 256 {
        return Err(schema("agents", "at most 256 agents are supported"));
    }
    for (i, a) in f.agents.iter().enumerate() {
        if !finite(&a.start) || !finite(&a.target) {
            return Err(schema(format!("agents[{i}]"), "start and target must be finite"));
        }
        if !a.noise.iter().all(|s| *s > 0.0 && s.is_finite()) {
            return Err(schema(format!("agents[{i}].noise"), "noise levels must be positive"));
        }
    }
    for (k, o) in f.obstacles.iter().enumerate() {
        if !(o.radius > 0.0) || !(o.margin >= 0.0) || !finite(&o.center) || !o.soft_cost.is_finite() || o.soft_cost < 0.0 {
            return Err(schema(format!("obstacles[{k}]"), "need radius > 0, margin ≥ 0, finite center, soft_cost ≥ 0"));
        }
    }
    let c = &f.costs;
    for (name, v) in [("goal_weight", c.goal_weight), ("pair_weight", c.pair_weight), ("final_cost.d", c.final_cost.d)] {
        if !(v >= 0.0 && v.is_finite()) {
            return Err(schema(format!("costs.{name}"), "must be finite and nonnegative"));
        }
    }
    let pi = &f.pi;
    if pi.rollouts == 0 || pi.horizon == 0 {
        return Err(schema("pi", "rollouts and horizon must be at least 1"));
    }
    if !(pi.temperature > 0.0 && pi.temperature.is_finite()) {
        return Err(schema("pi.temperature", "must be positive"));
    }
    if !(pi.target_radius > 0.0) {
        return Err(schema("pi.target_radius", "must be positive"));
    }
    if let Some(d) = pi.domain {
        if !finite(&d) || d[0] >= d[1] || d[2] >= d[3] {
            return Err(schema("pi.domain", "expected [x_min, x_max, y_min, y_max] with min < max"));
        }
    }
    if !(f.sim.dt > 0.0 && f.sim.dt.is_finite()) {
        return Err(schema("sim.dt", "must be positive"));
    }
    if !(f.sim.max_time > 0.0 && f.sim.max_time.is_finite()) {
        return Err(schema("sim.max_time", "must be positive"));
    }
    let t = &f.task;
    match t.mode {
        TaskMode::Single => {}
        TaskMode::ComponentSet | TaskMode::Composite => {
            if t.components.is_empty() {
                return Err(schema("task.components", "at least one component is required"));
            }
            if t.mode == TaskMode::Composite && t.new_target.is_none() {
                return Err(schema("task.new_target", "composite mode needs a new target"));
            }
        }
    }
    if !(t.kernel_width > 0.0) {
        return Err(schema("task.kernel_width", "must be positive"));
    }
    if !(t.success_radius > 0.0) {
        return Err(schema("task.success_radius", "must be positive"));
    }
    if t.best_of == 0 {
        return Err(schema("task.best_of", "must be at least 1"));
    }
    Ok(())
}
