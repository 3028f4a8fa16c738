//! Factor-graph container and Levenberg-Marquardt smoother.
//!
//! Variables are laid out per state as `[pose (rot; trans); velocity; bias
//! (accel; gyro)]` with the shared gravity direction appended last. Blocks
//! no factor touches are left out of the normal equations.

mod cholesky;

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use cholesky::{minimum_degree_order, BlockCholesky, BlockSystem};

use crate::factors::{Factor, FactorKind, Linearization, StateNode, VarBlock};
use crate::geometry::Twist;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum GraphError {
    #[error("factor references state {index} but the graph has {len} states")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("graph has no prior factor to anchor the gauge")]
    NotAnchored,
    #[error("normal equations are singular at {}", describe_state(.state))]
    SingularSystem { state: Option<usize> },
    #[error("non-finite cost during optimization")]
    NonFinite,
    #[error("invalid optimizer parameters: {0}")]
    InvalidParams(&'static str),
}

fn describe_state(state: &Option<usize>) -> String {
    match state {
        Some(i) => format!("state {i}"),
        None => "the gravity variable".to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerParams {
    pub max_iterations: usize,
    /// Stop when the relative cost decrease of an accepted step falls below this.
    pub relative_tolerance: f64,
    pub initial_damping: f64,
    pub damping_increase: f64,
    pub damping_decrease: f64,
    pub min_damping: f64,
    pub max_damping: f64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        Self {
            max_iterations: 50,
            relative_tolerance: 1e-9,
            initial_damping: 1e-4,
            damping_increase: 10.0,
            damping_decrease: 0.5,
            min_damping: 1e-9,
            max_damping: 1e6,
        }
    }
}

impl OptimizerParams {
    pub fn validate(&self) -> Result<(), GraphError> {
        if self.max_iterations == 0 {
            return Err(GraphError::InvalidParams("max_iterations must be positive"));
        }
        if !(self.relative_tolerance > 0.0 && self.relative_tolerance < 1.0) {
            return Err(GraphError::InvalidParams("relative_tolerance must lie in (0, 1)"));
        }
        if !(self.min_damping > 0.0 && self.min_damping <= self.max_damping) {
            return Err(GraphError::InvalidParams("damping bounds must satisfy 0 < min <= max"));
        }
        if !(self.initial_damping >= self.min_damping && self.initial_damping <= self.max_damping) {
            return Err(GraphError::InvalidParams("initial_damping outside the damping bounds"));
        }
        if !(self.damping_increase > 1.0 && self.damping_decrease > 0.0 && self.damping_decrease < 1.0) {
            return Err(GraphError::InvalidParams(
                "damping multipliers must be > 1 (increase) and in (0, 1) (decrease)",
            ));
        }
        Ok(())
    }
}

/// One LM iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub cost: f64,
    pub trial_cost: f64,
    pub damping: f64,
    pub step_norm: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizeSummary {
    pub initial_cost: f64,
    /// Total cost over every factor in the graph after the solve.
    pub final_cost: f64,
    pub iterations: usize,
    pub converged: bool,
    pub log: Vec<IterationRecord>,
}

/// Writes an iteration log as CSV.
pub fn write_iteration_csv<W: Write>(mut out: W, log: &[IterationRecord]) -> std::io::Result<()> {
    writeln!(out, "iteration,cost,trial_cost,damping,step_norm,accepted")?;
    for r in log {
        writeln!(
            out,
            "{},{:e},{:e},{:e},{:e},{}",
            r.iteration, r.cost, r.trial_cost, r.damping, r.step_norm, r.accepted as u8
        )?;
    }
    Ok(())
}

const SINGULAR_PIVOT_TOL: f64 = 1e-14;
const ABSOLUTE_COST_FLOOR: f64 = 1e-28;

#[derive(Debug, Clone)]
pub struct FactorGraph {
    states: Vec<StateNode>,
    factors: Vec<Factor>,
    /// Shared gravity direction (unit norm at the optimum).
    gravity: Vector3<f64>,
}

impl Default for FactorGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl FactorGraph {
    pub fn new() -> Self {
        Self { states: Vec::new(), factors: Vec::new(), gravity: Vector3::new(0.0, 0.0, -1.0) }
    }

    pub fn add_state(&mut self, node: StateNode) -> usize {
        self.states.push(node);
        self.states.len() - 1
    }

    pub fn add_factor(&mut self, factor: Factor) -> Result<usize, GraphError> {
        let len = self.states.len();
        if let Some(&index) = factor.kind.state_indices().iter().find(|&&i| i >= len) {
            return Err(GraphError::IndexOutOfRange { index, len });
        }
        self.factors.push(factor);
        Ok(self.factors.len() - 1)
    }

    pub fn states(&self) -> &[StateNode] {
        &self.states
    }

    pub fn state_mut(&mut self, i: usize) -> &mut StateNode {
        &mut self.states[i]
    }

    pub fn factors(&self) -> &[Factor] {
        &self.factors
    }

    pub fn gravity(&self) -> Vector3<f64> {
        self.gravity
    }

    pub fn set_gravity(&mut self, g: Vector3<f64>) {
        self.gravity = g;
    }

    pub fn is_anchored(&self) -> bool {
        self.factors.iter().any(|f| matches!(f.kind, FactorKind::Prior { .. }))
    }

    /// Total cost over every factor.
    pub fn cost(&self) -> f64 {
        self.factors.iter().map(|f| f.cost(&self.states, &self.gravity)).sum()
    }

    /// Full-batch optimization over every variable.
    pub fn optimize(&mut self, params: &OptimizerParams) -> Result<OptimizeSummary, GraphError> {
        self.optimize_window(params, 0)
    }

    /// Adds a state with its factors, then re-optimizes only the newest
    /// `window` states (0 = full batch). Older states are held fixed, so
    /// their factors act as priors on the window.
    pub fn solve_incremental(
        &mut self,
        node: StateNode,
        factors: Vec<Factor>,
        window: usize,
        params: &OptimizerParams,
    ) -> Result<OptimizeSummary, GraphError> {
        self.add_state(node);
        for f in factors {
            self.add_factor(f)?;
        }
        self.optimize_window(params, window)
    }

    /// Optimizes the newest `window` states (0 or >= state count: all).
    /// Gravity is held fixed while the graph has no gravity factor.
    pub fn optimize_window(&mut self, params: &OptimizerParams, window: usize) -> Result<OptimizeSummary, GraphError> {
        params.validate()?;
        if !self.is_anchored() {
            return Err(GraphError::NotAnchored);
        }
        let first_free = if window == 0 || window >= self.states.len() { 0 } else { self.states.len() - window };
        let problem = Problem::new(self, first_free);
        let initial_cost = self.cost();
        let mut log = Vec::new();
        if problem.blocks.is_empty() {
            return Ok(OptimizeSummary { initial_cost, final_cost: initial_cost, iterations: 0, converged: true, log });
        }

        let order = minimum_degree_order(&problem.adjacency());
        let mut damping = params.initial_damping;
        let mut cost = problem.cost(&self.states, &self.gravity);
        if !cost.is_finite() {
            return Err(GraphError::NonFinite);
        }
        // rank test on the undamped system
        let system = problem.assemble(&self.states, &self.gravity);
        BlockCholesky::factor(&system, &order, 0.0, SINGULAR_PIVOT_TOL)
            .map_err(|b| GraphError::SingularSystem { state: problem.blocks[b].state() })?;
        let mut system = Some(system);

        let mut converged = cost <= ABSOLUTE_COST_FLOOR;
        let mut iterations = 0;

        while !converged && iterations < params.max_iterations {
            iterations += 1;
            let system = system.take().unwrap_or_else(|| problem.assemble(&self.states, &self.gravity));
            loop {
                let chol = BlockCholesky::factor(&system, &order, damping, 0.0)
                    .map_err(|b| GraphError::SingularSystem { state: problem.blocks[b].state() })?;
                let neg_g: Vec<DVector<f64>> = system.rhs().iter().map(|v| -v).collect();
                let step = chol.solve(&neg_g);
                let step_norm = step.iter().map(|v| v.norm_squared()).sum::<f64>().sqrt();
                let (trial_states, trial_gravity) = problem.retract(&self.states, &self.gravity, &step);
                let trial_cost = problem.cost(&trial_states, &trial_gravity);
                let accepted = trial_cost.is_finite() && trial_cost <= cost;
                log.push(IterationRecord { iteration: iterations, cost, trial_cost, damping, step_norm, accepted });
                if accepted {
                    let decrease = cost - trial_cost;
                    self.states = trial_states;
                    self.gravity = trial_gravity;
                    damping = (damping * params.damping_decrease).max(params.min_damping);
                    if decrease <= params.relative_tolerance * cost || trial_cost <= ABSOLUTE_COST_FLOOR {
                        converged = true;
                    }
                    cost = trial_cost;
                    break;
                }
                if step_norm <= 1e-15 || damping >= params.max_damping {
                    // no descent available at numerical precision
                    converged = true;
                    break;
                }
                damping = (damping * params.damping_increase).min(params.max_damping);
            }
        }
        Ok(OptimizeSummary { initial_cost, final_cost: self.cost(), iterations, converged, log })
    }
}

/// The active subproblem: included factors and free variable blocks.
struct Problem {
    factors: Vec<Factor>,
    blocks: Vec<VarBlock>,
    index: BTreeMap<VarBlock, usize>,
}

fn block_sort_key(b: &VarBlock) -> (usize, usize) {
    match *b {
        VarBlock::Pose(i) => (i, 0),
        VarBlock::Velocity(i) => (i, 1),
        VarBlock::Bias(i) => (i, 2),
        VarBlock::Gravity => (usize::MAX, 0),
    }
}

impl Problem {
    fn new(graph: &FactorGraph, first_free: usize) -> Self {
        // gravity stays at its initial value until something observes its direction
        let gravity_free = graph.factors.iter().any(|f| matches!(f.kind, FactorKind::Gravity { .. }));
        let is_free = |b: &VarBlock| match b.state() {
            Some(i) => i >= first_free,
            None => gravity_free,
        };
        let mut factors = Vec::new();
        let mut blocks = std::collections::BTreeSet::new();
        for f in &graph.factors {
            let vars = f.kind.variables();
            if vars.iter().any(is_free) {
                blocks.extend(vars.into_iter().filter(is_free).map(|b| (block_sort_key(&b), b)));
                factors.push(f.clone());
            }
        }
        let blocks: Vec<VarBlock> = blocks.into_iter().map(|(_, b)| b).collect();
        let index = blocks.iter().enumerate().map(|(i, b)| (*b, i)).collect();
        Self { factors, blocks, index }
    }

    fn adjacency(&self) -> Vec<std::collections::BTreeSet<usize>> {
        let mut adj = vec![std::collections::BTreeSet::new(); self.blocks.len()];
        for f in &self.factors {
            let ids: Vec<usize> = f.kind.variables().iter().filter_map(|b| self.index.get(b).copied()).collect();
            for &a in &ids {
                for &b in &ids {
                    if a != b {
                        adj[a].insert(b);
                    }
                }
            }
        }
        adj
    }

    fn linearize_all(&self, states: &[StateNode], gravity: &Vector3<f64>) -> Vec<Linearization> {
        self.factors.par_iter().map(|f| f.linearize(states, gravity)).collect()
    }

    fn cost(&self, states: &[StateNode], gravity: &Vector3<f64>) -> f64 {
        let costs: Vec<f64> = self.factors.par_iter().map(|f| f.cost(states, gravity)).collect();
        costs.iter().sum()
    }

    /// Gauss-Newton system `H = sum J^T W J`, rhs `g = sum J^T W r`.
    fn assemble(&self, states: &[StateNode], gravity: &Vector3<f64>) -> BlockSystem {
        let lins = self.linearize_all(states, gravity);
        let mut sys = BlockSystem::new(self.blocks.iter().map(|b| b.dim()).collect());
        for (f, lin) in self.factors.iter().zip(&lins) {
            let w = &f.information;
            let active: Vec<(usize, DMatrix<f64>)> =
                lin.jacobians.iter().filter_map(|(b, j)| self.index.get(b).map(|&k| (k, j.transpose() * w))).collect();
            let jac: BTreeMap<usize, &DMatrix<f64>> =
                lin.jacobians.iter().filter_map(|(b, j)| self.index.get(b).map(|&k| (k, j))).collect();
            for (a, jt_w) in &active {
                sys.add_rhs(*a, &(jt_w * &lin.residual));
                for (b, jb) in &jac {
                    if b <= a {
                        sys.add_block(*a, *b, &(jt_w * *jb));
                    }
                }
            }
        }
        sys
    }

    fn retract(
        &self,
        states: &[StateNode],
        gravity: &Vector3<f64>,
        step: &[DVector<f64>],
    ) -> (Vec<StateNode>, Vector3<f64>) {
        let mut out = states.to_vec();
        let mut g = *gravity;
        for (b, d) in self.blocks.iter().zip(step) {
            match *b {
                VarBlock::Pose(i) => {
                    let xi = Twist::from_vector(&Vector6::from_column_slice(d.as_slice()));
                    out[i].pose = out[i].pose.retract_left(&xi);
                }
                VarBlock::Velocity(i) => out[i].velocity += Vector3::from_column_slice(d.as_slice()),
                VarBlock::Bias(i) => {
                    out[i].bias.accel += Vector3::new(d[0], d[1], d[2]);
                    out[i].bias.gyro += Vector3::new(d[3], d[4], d[5]);
                }
                VarBlock::Gravity => g += Vector3::from_column_slice(d.as_slice()),
            }
        }
        (out, g)
    }
}
