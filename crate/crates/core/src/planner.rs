//! RRT with pluggable steer functions.
//!
//! Sampling order: each iteration draws one uniform `f64` for the goal-bias
//! coin; if the coin does not select the goal, one uniform `f64` per joint
//! follows, mapped to `lo + (hi - lo) · x`. Nearest neighbours use the
//! Euclidean joint metric with the lowest index winning ties.

use std::time::Instant;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::cbf::{CbfFunction, HandcraftedCbf, LearnedCbf};
use crate::controller::{nominal_control, safe_rollout, NominalPolicy, RolloutLimits, SafeControllerConfig, StallRule};
use crate::environment::{signed_distance, Environment};
use crate::kinematics::{integrate, ArmModel, JointConfig};
use crate::rng::{stream, ChaCha8Rng};
use crate::{Error, Result};

/// Serializable name of a steer function.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SteerKind {
    StraightLine,
    CbfInc,
    /// Filtered-rollout steering until `activation_after` steer attempts,
    /// then nominal control that stops at the first action the barrier
    /// rejects. Zero gives the rejecting variant throughout.
    CbfFilterLqr { activation_after: usize },
    HandCbf { margin: f64 },
}

impl SteerKind {
    pub fn label(&self) -> String {
        match self {
            SteerKind::StraightLine => "rrt".into(),
            SteerKind::CbfInc => "cbf-inc-rrt".into(),
            SteerKind::CbfFilterLqr { activation_after } => format!("cbf-filter-lqr-rrt@{activation_after}"),
            SteerKind::HandCbf { margin } => format!("hcbf-rrt@{margin}"),
        }
    }

    pub fn needs_network(&self) -> bool {
        matches!(self, SteerKind::CbfInc | SteerKind::CbfFilterLqr { .. })
    }
}

/// A steer function with the barrier it uses.
#[derive(Debug, Clone, Copy)]
pub enum Steer<'a> {
    StraightLine,
    CbfInc(&'a LearnedCbf),
    CbfFilterLqr { cbf: &'a LearnedCbf, activation_after: usize },
    HandCbf(HandcraftedCbf),
}

impl<'a> Steer<'a> {
    /// Binds a steer kind to a network. Learned kinds need `net`.
    pub fn bind(kind: SteerKind, net: Option<&'a LearnedCbf>, hand_fd_step: f64) -> Result<Self> {
        let need = || net.ok_or_else(|| Error::InvalidConfig(format!("{} needs a trained network", kind.label())));
        Ok(match kind {
            SteerKind::StraightLine => Steer::StraightLine,
            SteerKind::CbfInc => Steer::CbfInc(need()?),
            SteerKind::CbfFilterLqr { activation_after } => Steer::CbfFilterLqr { cbf: need()?, activation_after },
            SteerKind::HandCbf { margin } => Steer::HandCbf(HandcraftedCbf { margin, fd_step: hand_fd_step, alpha: 1.0 }),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlannerConfig {
    /// Cap on steer attempts.
    pub max_nodes: usize,
    pub goal_bias: f64,
    pub step_size: f64,
    pub check_resolution: f64,
    pub max_ctrl_steps: usize,
    pub r_goal: f64,
    /// A new node this close to the goal triggers a direct steer to it.
    pub connect_radius: f64,
    pub policy: NominalPolicy,
    pub controller: SafeControllerConfig,
    pub sim_hz: u32,
    pub ctrl_hz: u32,
    pub stall: StallRule,
    /// Record wall-clock planning time; off gives reproducible results.
    pub timing: bool,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            max_nodes: 200,
            goal_bias: 0.1,
            step_size: 0.5,
            check_resolution: 0.02,
            max_ctrl_steps: 90,
            r_goal: 0.1,
            connect_radius: 0.5,
            policy: NominalPolicy::default(),
            controller: SafeControllerConfig::default(),
            sim_hz: 120,
            ctrl_hz: 30,
            stall: StallRule::default(),
            timing: true,
        }
    }
}

impl PlannerConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.step_size > 0.0
            && self.check_resolution > 0.0
            && self.r_goal > 0.0
            && self.connect_radius >= 0.0
            && (0.0..=1.0).contains(&self.goal_bias)
            && self.ctrl_hz > 0
            && self.sim_hz.is_multiple_of(self.ctrl_hz);
        if !ok {
            return Err(Error::InvalidConfig("planner limits out of range".into()));
        }
        Ok(())
    }

    fn rollout_limits(&self) -> RolloutLimits {
        RolloutLimits {
            horizon_s: self.max_ctrl_steps as f64 / self.ctrl_hz as f64,
            sim_hz: self.sim_hz,
            ctrl_hz: self.ctrl_hz,
            r_goal: self.r_goal,
            stall: Some(self.stall),
            stop_on_collision: true,
        }
    }
}

/// States reached from a parent node, excluding the parent, and the
/// controls that produced them (empty for geometric edges). `controls[i]`
/// is held for `dt` seconds to go from the previous state to `states[i]`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Edge {
    pub states: Vec<JointConfig>,
    pub controls: Vec<Vec<f64>>,
    pub dt: f64,
}

impl Edge {
    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn end(&self) -> Option<&JointConfig> {
        self.states.last()
    }

    fn truncate(&mut self, keep: usize) {
        self.states.truncate(keep);
        if !self.controls.is_empty() {
            self.controls.truncate(keep);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeNode {
    pub config: JointConfig,
    pub parent: Option<usize>,
    pub edge: Edge,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SearchTree {
    pub nodes: Vec<TreeNode>,
}

impl SearchTree {
    fn nearest(&self, q: &JointConfig) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (i, n) in self.nodes.iter().enumerate() {
            let d = n.config.distance(q);
            if d < best.0 {
                best = (d, i);
            }
        }
        best.1
    }

    /// Node indices from the root to `leaf`.
    pub fn lineage(&self, leaf: usize) -> Vec<usize> {
        let mut chain = vec![leaf];
        while let Some(p) = self.nodes[*chain.last().unwrap()].parent {
            chain.push(p);
        }
        chain.reverse();
        chain
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanStatus {
    Solved,
    NodeLimit,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub status: PlanStatus,
    /// Start, then every edge state along the solution branch.
    pub path: Vec<JointConfig>,
    /// Controls of the solution branch's rollout edges, in order.
    pub controls: Vec<Vec<f64>>,
    /// Steer attempts, successful or not.
    pub explored_nodes: usize,
    pub tree_nodes: usize,
    pub planning_seconds: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct PlanProblem<'a> {
    pub arm: &'a ArmModel,
    pub env: &'a Environment,
    pub start: &'a JointConfig,
    pub goal: &'a JointConfig,
}

/// Number of leading `states` for which every segment, starting from
/// `from`, is collision-free when sampled every `resolution` radians
/// (segment endpoints included, start point excluded).
pub fn valid_prefix(env: &Environment, arm: &ArmModel, from: &JointConfig, states: &[JointConfig], resolution: f64) -> Result<usize> {
    let mut prev = from;
    for (k, s) in states.iter().enumerate() {
        let pieces = ((prev.distance(s) / resolution) - 1e-9).ceil().max(1.0) as usize;
        for j in 1..=pieces {
            let q = if j == pieces { s.clone() } else { prev.lerp(s, j as f64 / pieces as f64) };
            if signed_distance(env, arm, &q)? < 0.0 {
                return Ok(k);
            }
        }
        prev = s;
    }
    Ok(states.len())
}

/// Straight joint-space segment of length at most `step_size`, sampled
/// every `check_resolution` and cut at the last free sample before the
/// first collision.
pub fn steer_straight(
    arm: &ArmModel,
    env: &Environment,
    from: &JointConfig,
    toward: &JointConfig,
    step_size: f64,
    check_resolution: f64,
) -> Result<Edge> {
    let dist = from.distance(toward);
    if dist == 0.0 {
        return Ok(Edge::default());
    }
    let len = dist.min(step_size);
    let pieces = ((len / check_resolution) - 1e-9).ceil().max(1.0) as usize;
    let states: Vec<JointConfig> = (1..=pieces)
        .map(|k| {
            if k == pieces && len == dist {
                toward.clone()
            } else {
                from.lerp(toward, (len * k as f64 / pieces as f64) / dist)
            }
        })
        .collect();
    let keep = valid_prefix(env, arm, from, &states, check_resolution)?;
    let mut edge = Edge { states, controls: Vec::new(), dt: 0.0 };
    edge.truncate(keep);
    Ok(edge)
}

/// Filtered-controller rollout toward `toward`, stored at simulation rate
/// and cut before any colliding state.
pub fn steer_cbf_inc(
    arm: &ArmModel,
    env: &Environment,
    from: &JointConfig,
    toward: &JointConfig,
    cbf: &dyn CbfFunction,
    cfg: &PlannerConfig,
) -> Result<Edge> {
    let controller = SafeControllerConfig { alpha: cbf.alpha(), ..cfg.controller };
    let limits = cfg.rollout_limits();
    let rec = safe_rollout(cbf, &cfg.policy, &controller, arm, from, toward, env, &limits)?;
    let keep = rec.min_signed_distance[1..].iter().take_while(|d| **d >= 0.0).count();
    Ok(Edge {
        states: rec.configs[1..=keep].to_vec(),
        controls: rec.controls[..keep].to_vec(),
        dt: 1.0 / limits.sim_hz as f64,
    })
}

/// Unmodified nominal control, one state per control tick, stopping at
/// the first tick whose action violates the barrier's derivative condition
/// at the current state or whose successor has `h > 0`. Rejection at tick
/// `k` (counting from zero) leaves exactly `k` states.
pub fn steer_filter_lqr(
    arm: &ArmModel,
    env: &Environment,
    from: &JointConfig,
    toward: &JointConfig,
    cbf: &dyn CbfFunction,
    cfg: &PlannerConfig,
) -> Result<Edge> {
    let (lo, hi) = (arm.action_lower(), arm.action_upper());
    let substeps = (cfg.sim_hz / cfg.ctrl_hz) as usize;
    let dt = 1.0 / cfg.sim_hz as f64;
    let mut edge = Edge { dt: 1.0 / cfg.ctrl_hz as f64, ..Edge::default() };
    let mut q = from.clone();
    let (mut h, mut grad) = cbf.evaluate(env, arm, &q)?;
    for _ in 0..cfg.max_ctrl_steps {
        if q.distance(toward) <= cfg.r_goal {
            break;
        }
        let u = nominal_control(&cfg.policy, &q, toward, &lo, &hi);
        let lie: f64 = grad.iter().zip(&u).map(|(a, b)| a * b).sum();
        if lie + cbf.alpha() * h > 0.0 {
            break;
        }
        let mut next = q.clone();
        for _ in 0..substeps {
            next = integrate(arm, &next, &u, dt)?.0;
        }
        let (h_next, grad_next) = cbf.evaluate(env, arm, &next)?;
        if h_next > 0.0 {
            break;
        }
        edge.states.push(next.clone());
        edge.controls.push(u);
        (q, h, grad) = (next, h_next, grad_next);
    }
    let keep = valid_prefix(env, arm, from, &edge.states, cfg.check_resolution)?;
    edge.truncate(keep);
    Ok(edge)
}

fn sample(arm: &ArmModel, goal: &JointConfig, goal_bias: f64, rng: &mut ChaCha8Rng) -> JointConfig {
    if rng.gen::<f64>() < goal_bias {
        return goal.clone();
    }
    JointConfig::new(
        arm.joint_lower
            .iter()
            .zip(&arm.joint_upper)
            .map(|(lo, hi)| lo + (hi - lo) * rng.gen::<f64>())
            .collect(),
    )
}

fn steer_once(
    steer: &Steer<'_>,
    problem: &PlanProblem<'_>,
    from: &JointConfig,
    toward: &JointConfig,
    cfg: &PlannerConfig,
    attempts_so_far: usize,
) -> Result<Edge> {
    let (arm, env) = (problem.arm, problem.env);
    let mut edge = match steer {
        Steer::StraightLine => return steer_straight(arm, env, from, toward, cfg.step_size, cfg.check_resolution),
        Steer::CbfInc(cbf) => steer_cbf_inc(arm, env, from, toward, *cbf, cfg)?,
        Steer::HandCbf(cbf) => steer_cbf_inc(arm, env, from, toward, cbf, cfg)?,
        Steer::CbfFilterLqr { cbf, activation_after } => {
            if attempts_so_far >= *activation_after {
                steer_filter_lqr(arm, env, from, toward, *cbf, cfg)?
            } else {
                steer_cbf_inc(arm, env, from, toward, *cbf, cfg)?
            }
        }
    };
    // The tree only trusts geometry, never the barrier.
    let keep = valid_prefix(env, arm, from, &edge.states, cfg.check_resolution)?;
    edge.truncate(keep);
    Ok(edge)
}

/// Plans and returns the search tree alongside the result.
pub fn plan_with_tree(problem: &PlanProblem<'_>, steer: &Steer<'_>, cfg: &PlannerConfig, seed: u64) -> Result<(PlanResult, SearchTree)> {
    cfg.validate()?;
    let (arm, env) = (problem.arm, problem.env);
    arm.validate()?;
    for (name, q) in [("start", problem.start), ("goal", problem.goal)] {
        if signed_distance(env, arm, q)? < 0.0 {
            return Err(Error::InvalidProblem(format!("{name} configuration is in collision")));
        }
    }
    let started = Instant::now();
    let mut rng = stream(seed, "planner");
    let mut tree = SearchTree {
        nodes: vec![TreeNode { config: problem.start.clone(), parent: None, edge: Edge::default() }],
    };
    let mut explored = 0;
    let in_goal = |q: &JointConfig| q.distance(problem.goal) <= cfg.r_goal;

    // Adds a node; then, if close enough, tries to connect it to the goal.
    let mut solved = if in_goal(problem.start) { Some(0) } else { None };
    let extend = |tree: &mut SearchTree, parent: usize, edge: Edge| -> usize {
        let config = edge.end().expect("non-empty edge").clone();
        tree.nodes.push(TreeNode { config, parent: Some(parent), edge });
        tree.nodes.len() - 1
    };
    let try_connect = |tree: &mut SearchTree, node: usize, explored: &mut usize| -> Result<Option<usize>> {
        let here = tree.nodes[node].config.clone();
        if in_goal(&here) {
            return Ok(Some(node));
        }
        if here.distance(problem.goal) > cfg.connect_radius || *explored >= cfg.max_nodes {
            return Ok(None);
        }
        *explored += 1;
        let edge = steer_once(steer, problem, &here, problem.goal, cfg, *explored - 1)?;
        if edge.is_empty() {
            return Ok(None);
        }
        let id = extend(tree, node, edge);
        Ok(in_goal(&tree.nodes[id].config).then_some(id))
    };

    if solved.is_none() {
        solved = try_connect(&mut tree, 0, &mut explored)?;
    }
    while solved.is_none() && explored < cfg.max_nodes {
        let target = sample(arm, problem.goal, cfg.goal_bias, &mut rng);
        let near = tree.nearest(&target);
        let from = tree.nodes[near].config.clone();
        explored += 1;
        let edge = steer_once(steer, problem, &from, &target, cfg, explored - 1)?;
        if edge.is_empty() || edge.end() == Some(&from) {
            continue;
        }
        let id = extend(&mut tree, near, edge);
        solved = try_connect(&mut tree, id, &mut explored)?;
    }

    let (status, path, controls) = match solved {
        Some(leaf) => {
            let mut path = vec![problem.start.clone()];
            let mut controls = Vec::new();
            for id in tree.lineage(leaf).into_iter().skip(1) {
                path.extend(tree.nodes[id].edge.states.iter().cloned());
                controls.extend(tree.nodes[id].edge.controls.iter().cloned());
            }
            (PlanStatus::Solved, path, controls)
        }
        None => (PlanStatus::NodeLimit, Vec::new(), Vec::new()),
    };
    let result = PlanResult {
        status,
        path,
        controls,
        explored_nodes: explored,
        tree_nodes: tree.nodes.len(),
        planning_seconds: if cfg.timing { started.elapsed().as_secs_f64() } else { 0.0 },
        seed,
    };
    Ok((result, tree))
}

pub fn rrt_plan(problem: &PlanProblem<'_>, steer: &Steer<'_>, cfg: &PlannerConfig, seed: u64) -> Result<PlanResult> {
    Ok(plan_with_tree(problem, steer, cfg, seed)?.0)
}
