//! Communication graphs, factorial subsystems and joint dynamics.
//!
//! The subsystem of agent `i` is `i` together with its neighbors. Member
//! order is `[i, neighbors ascending]`, so the central agent always occupies
//! block 0 of every joint vector.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::numeric::block_diagonal;
use crate::sde::ControlAffine;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MasError {
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("invalid argument: {0}")]
    Argument(String),
}

/// Undirected communication graph over agents `0..N`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgentGraph {
    neighbors: Vec<BTreeSet<usize>>,
}

impl AgentGraph {
    pub fn new(agents: usize, edges: &[(usize, usize)]) -> Result<Self, MasError> {
        let mut neighbors = vec![BTreeSet::new(); agents];
        for &(a, b) in edges {
            if a >= agents || b >= agents {
                return Err(MasError::Graph(format!("edge ({a}, {b}) references a missing agent (N = {agents})")));
            }
            if a == b {
                return Err(MasError::Graph(format!("self-loop on agent {a}")));
            }
            neighbors[a].insert(b);
            neighbors[b].insert(a);
        }
        Ok(Self { neighbors })
    }

    pub fn agent_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, agent: usize) -> &BTreeSet<usize> {
        &self.neighbors[agent]
    }

    pub fn are_adjacent(&self, a: usize, b: usize) -> bool {
        self.neighbors.get(a).is_some_and(|n| n.contains(&b))
    }

    /// Edges `(a, b)` with `a < b`, sorted.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (a, ns) in self.neighbors.iter().enumerate() {
            out.extend(ns.iter().filter(|b| **b > a).map(|b| (a, *b)));
        }
        out
    }
}

/// Agent `central` and its neighbors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorialSubsystem {
    pub central: usize,
    /// `[central, neighbors ascending]`.
    pub members: Vec<usize>,
    pub state_dim: usize,
    pub input_dim: usize,
}

impl FactorialSubsystem {
    pub fn size(&self) -> usize {
        self.members.len()
    }

    pub fn joint_state_dim(&self) -> usize {
        self.state_dim * self.members.len()
    }

    pub fn joint_input_dim(&self) -> usize {
        self.input_dim * self.members.len()
    }

    /// Block index of agent `id`, if it is a member.
    pub fn slot(&self, id: usize) -> Option<usize> {
        self.members.iter().position(|m| *m == id)
    }
}

/// One subsystem per agent, indexed by central agent.
pub fn build_subsystems(graph: &AgentGraph, state_dim: usize, input_dim: usize) -> Vec<FactorialSubsystem> {
    (0..graph.agent_count())
        .map(|i| {
            let mut members = vec![i];
            members.extend(graph.neighbors(i).iter().copied());
            FactorialSubsystem { central: i, members, state_dim, input_dim }
        })
        .collect()
}

/// Concatenates member states in slot order; `states` is indexed by agent id.
pub fn assemble_joint(sub: &FactorialSubsystem, states: &[DVector<f64>]) -> Result<DVector<f64>, MasError> {
    let mut out = DVector::zeros(sub.joint_state_dim());
    for (slot, id) in sub.members.iter().enumerate() {
        let s = states.get(*id).ok_or_else(|| MasError::Argument(format!("missing state for agent {id}")))?;
        if s.len() != sub.state_dim {
            return Err(MasError::Argument(format!("agent {id} state has dimension {}, expected {}", s.len(), sub.state_dim)));
        }
        out.rows_mut(slot * sub.state_dim, sub.state_dim).copy_from(s);
    }
    Ok(out)
}

/// Block `slot` of a joint state.
pub fn extract_block(joint: &DVector<f64>, sub: &FactorialSubsystem, slot: usize) -> Result<DVector<f64>, MasError> {
    if joint.len() != sub.joint_state_dim() || slot >= sub.size() {
        return Err(MasError::Argument("joint state or slot out of range".into()));
    }
    Ok(joint.rows(slot * sub.state_dim, sub.state_dim).into_owned())
}

/// The central agent's rows of a joint control.
pub fn extract_local_control(joint_u: &DVector<f64>, sub: &FactorialSubsystem) -> Result<DVector<f64>, MasError> {
    if joint_u.len() != sub.joint_input_dim() {
        return Err(MasError::Argument(format!("joint control has dimension {}, expected {}", joint_u.len(), sub.joint_input_dim())));
    }
    Ok(joint_u.rows(0, sub.input_dim).into_owned())
}

/// Stacked independent member dynamics.
pub struct JointDynamics {
    members: Vec<Arc<dyn ControlAffine>>,
    m: usize,
    p: usize,
    sigma: DMatrix<f64>,
}

impl JointDynamics {
    pub fn members(&self) -> &[Arc<dyn ControlAffine>] {
        &self.members
    }
}

impl ControlAffine for JointDynamics {
    fn state_dim(&self) -> usize {
        self.m * self.members.len()
    }

    fn input_dim(&self) -> usize {
        self.p * self.members.len()
    }

    fn drift_into(&self, x: &[f64], out: &mut [f64]) {
        for (k, d) in self.members.iter().enumerate() {
            let r = k * self.m..(k + 1) * self.m;
            d.drift_into(&x[r.clone()], &mut out[r]);
        }
    }

    fn control_matrix(&self, x: &[f64]) -> DMatrix<f64> {
        let blocks: Vec<DMatrix<f64>> = self.members.iter().enumerate().map(|(k, d)| d.control_matrix(&x[k * self.m..(k + 1) * self.m])).collect();
        block_diagonal(&blocks.iter().collect::<Vec<_>>())
    }

    fn noise_cov(&self) -> &DMatrix<f64> {
        &self.sigma
    }

    fn add_input(&self, x: &[f64], v: &[f64], out: &mut [f64]) {
        for (k, d) in self.members.iter().enumerate() {
            let r = k * self.m..(k + 1) * self.m;
            d.add_input(&x[r.clone()], &v[k * self.p..(k + 1) * self.p], &mut out[r]);
        }
    }

    fn drift_jacobian(&self, x: &[f64]) -> Option<DMatrix<f64>> {
        let blocks = self.members.iter().enumerate().map(|(k, d)| d.drift_jacobian(&x[k * self.m..(k + 1) * self.m])).collect::<Option<Vec<_>>>()?;
        Some(block_diagonal(&blocks.iter().collect::<Vec<_>>()))
    }
}

/// Joint dynamics of `sub`; `agents` is indexed by agent id. A singleton
/// subsystem gets the agent's own dynamics back.
pub fn joint_dynamics(sub: &FactorialSubsystem, agents: &[Arc<dyn ControlAffine>]) -> Result<Arc<dyn ControlAffine>, MasError> {
    let mut members = Vec::with_capacity(sub.size());
    for id in &sub.members {
        let d = agents.get(*id).ok_or_else(|| MasError::Argument(format!("missing dynamics for agent {id}")))?;
        if d.state_dim() != sub.state_dim || d.input_dim() != sub.input_dim {
            return Err(MasError::Argument(format!(
                "agent {id} has dimensions ({}, {}), subsystem expects ({}, {})",
                d.state_dim(),
                d.input_dim(),
                sub.state_dim,
                sub.input_dim
            )));
        }
        members.push(d.clone());
    }
    if members.len() == 1 {
        return Ok(members.pop().expect("one member"));
    }
    let sigma = block_diagonal(&members.iter().map(|d| d.noise_cov()).collect::<Vec<_>>());
    Ok(Arc::new(JointDynamics { members, m: sub.state_dim, p: sub.input_dim, sigma }))
}
