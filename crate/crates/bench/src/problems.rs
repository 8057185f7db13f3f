//! Planning problems: generation, validation, files and the easy/hard split.

use std::path::Path;

use cbfrrt::environment::{random_environment, signed_distance, EnvGenConfig, Environment};
use cbfrrt::kinematics::{ArmModel, JointConfig};
use cbfrrt::planner::{rrt_plan, PlanProblem, PlanStatus, PlannerConfig, Steer};
use cbfrrt::rng::{indexed_stream, ChaCha8Rng};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{read_json, to_json, write, BenchError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    Easy,
    Hard,
    Untagged,
}

impl Difficulty {
    pub fn as_str(&self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
            Difficulty::Untagged => "untagged",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProblemSpec {
    pub id: usize,
    pub environment: Environment,
    pub q0: JointConfig,
    pub qg: JointConfig,
    pub difficulty: Difficulty,
    /// Median proxy-planner effort, set by the split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProblemGenConfig {
    pub env: EnvGenConfig,
    /// Minimum signed distance at the start and goal.
    pub clearance: f64,
    /// Minimum joint-space distance between start and goal.
    pub min_goal_distance: f64,
    /// Start/goal draws per environment before giving up.
    pub max_attempts: usize,
}

impl Default for ProblemGenConfig {
    fn default() -> Self {
        Self {
            env: EnvGenConfig { num_obstacles: 8, size_range: [0.05, 0.15], ..EnvGenConfig::default() },
            clearance: 0.025,
            min_goal_distance: 1.0,
            max_attempts: 10_000,
        }
    }
}

fn uniform_config(arm: &ArmModel, rng: &mut ChaCha8Rng) -> JointConfig {
    JointConfig::new(arm.joint_lower.iter().zip(&arm.joint_upper).map(|(lo, hi)| lo + (hi - lo) * rng.gen::<f64>()).collect())
}

/// One random world per problem, with start and goal rejection-sampled
/// until both have the required clearance.
pub fn gen_problems(arm: &ArmModel, cfg: &ProblemGenConfig, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<ProblemSpec>> {
    if count == 0 {
        return Err(BenchError::Config("problem count must be at least 1".into()));
    }
    arm.validate()?;
    let mut problems = Vec::with_capacity(count);
    for id in 0..count {
        let environment = random_environment(&cfg.env, rng)?;
        let clear = |q: &JointConfig| -> Result<bool> { Ok(signed_distance(&environment, arm, q)? >= cfg.clearance) };
        let mut found = None;
        for _ in 0..cfg.max_attempts {
            let q0 = uniform_config(arm, rng);
            let qg = uniform_config(arm, rng);
            if q0.distance(&qg) >= cfg.min_goal_distance && clear(&q0)? && clear(&qg)? {
                found = Some((q0, qg));
                break;
            }
        }
        let (q0, qg) = found.ok_or_else(|| BenchError::Problem {
            id,
            what: format!(
                "no start/goal pair with clearance {} after {} attempts in environment {}",
                cfg.clearance,
                cfg.max_attempts,
                serde_json::to_string(&environment).unwrap_or_default()
            ),
        })?;
        problems.push(ProblemSpec { id, environment, q0, qg, difficulty: Difficulty::Untagged, score: None });
    }
    Ok(problems)
}

/// Checks start and goal clearance.
pub fn validate_problem(arm: &ArmModel, problem: &ProblemSpec, clearance: f64) -> Result<()> {
    for (name, q) in [("start", &problem.q0), ("goal", &problem.qg)] {
        let d = signed_distance(&problem.environment, arm, q)?;
        if d < clearance {
            return Err(BenchError::Problem { id: problem.id, what: format!("{name} clearance {d} below {clearance}") });
        }
    }
    Ok(())
}

pub fn write_problems(path: &Path, problems: &[ProblemSpec]) -> Result<()> {
    write(path, to_json(&problems)?)
}

pub fn read_problems(path: &Path) -> Result<Vec<ProblemSpec>> {
    read_json(path)
}

/// Planner seed for item `index` of a named task family.
pub fn task_seed(seed: u64, family: &str, index: u64) -> u64 {
    indexed_stream(seed, family, index).gen()
}

/// Median explored nodes of `proxy_runs` straight-line RRT runs; a run
/// that hits the node limit scores `max_nodes + 1`.
pub fn difficulty_score(arm: &ArmModel, problem: &ProblemSpec, proxy_runs: usize, planner: &PlannerConfig, seed: u64) -> Result<f64> {
    let plan = PlanProblem { arm, env: &problem.environment, start: &problem.q0, goal: &problem.qg };
    let mut scores = (0..proxy_runs)
        .map(|r| {
            let run_seed = task_seed(seed, "difficulty", (problem.id * proxy_runs + r) as u64);
            let res = rrt_plan(&plan, &Steer::StraightLine, planner, run_seed)?;
            Ok(match res.status {
                PlanStatus::Solved => res.explored_nodes as f64,
                PlanStatus::NodeLimit => (planner.max_nodes + 1) as f64,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    scores.sort_by(f64::total_cmp);
    let m = scores.len() / 2;
    Ok(if scores.len() % 2 == 1 { scores[m] } else { 0.5 * (scores[m - 1] + scores[m]) })
}

/// Tags the top half by proxy score as Hard and the rest as Easy. Ties are
/// broken by id, and problems at the set's minimum score are never Hard,
/// so a set of equally trivial problems is all Easy.
pub fn difficulty_split(
    arm: &ArmModel,
    problems: &[ProblemSpec],
    proxy_runs: usize,
    planner: &PlannerConfig,
    seed: u64,
) -> Result<Vec<ProblemSpec>> {
    if proxy_runs == 0 {
        return Err(BenchError::Config("proxy_runs must be at least 1".into()));
    }
    let scores = problems
        .par_iter()
        .map(|p| difficulty_score(arm, p, proxy_runs, planner, seed))
        .collect::<Result<Vec<_>>>()?;
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let mut order: Vec<usize> = (0..problems.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(problems[a].id.cmp(&problems[b].id)));
    let mut tagged = problems.to_vec();
    for (rank, &i) in order.iter().enumerate() {
        let hard = rank < problems.len() / 2 && scores[i] > min;
        tagged[i].difficulty = if hard { Difficulty::Hard } else { Difficulty::Easy };
        tagged[i].score = Some(scores[i]);
    }
    Ok(tagged)
}
