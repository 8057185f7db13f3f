//! End-to-end controller evaluation: the filtered controller is rolled out
//! straight from start to goal, without a planner.

use cbfrrt::cbf::{CbfFunction, LearnedCbf};
use cbfrrt::controller::{safe_rollout, NominalPolicy, RolloutLimits, SafeControllerConfig};
use cbfrrt::environment::{Environment, ObservationModel, ScanSpec};
use cbfrrt::kinematics::{ArmModel, Point};
use cbfrrt::rng::indexed_stream;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{BenchError, Result};
use crate::problems::ProblemSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Setting {
    /// Static obstacles, observed through surface samples.
    StaticFull,
    /// Constant-velocity obstacles, observed through the arm's ray scans.
    DynamicPartial,
}

impl Setting {
    pub fn as_str(&self) -> &'static str {
        match self {
            Setting::StaticFull => "static_full",
            Setting::DynamicPartial => "dynamic_partial",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerEvalConfig {
    pub horizon_s: f64,
    pub r_goal: f64,
    pub policy: NominalPolicy,
    pub controller: SafeControllerConfig,
    /// Obstacle speed range in the dynamic setting, m/s.
    pub speed_range: [f64; 2],
    pub scan: ScanSpec,
    /// Surface-cloud size in the static setting; `None` keeps the
    /// checkpoint's. The encoder max-pools, so any size is accepted.
    pub surface_points: Option<usize>,
    /// Margin of the handcrafted baseline.
    pub hand_margin: f64,
    pub hand_fd_step: f64,
}

impl Default for ControllerEvalConfig {
    fn default() -> Self {
        Self {
            horizon_s: 10.0,
            r_goal: 0.1,
            policy: NominalPolicy::default(),
            controller: SafeControllerConfig::default(),
            speed_range: [0.05, 0.15],
            scan: ScanSpec::default(),
            surface_points: Some(256),
            hand_margin: 0.1,
            hand_fd_step: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerRun {
    pub problem_id: usize,
    pub reached_goal: bool,
    pub collided: bool,
    /// Fraction of trajectory states with nonnegative signed distance.
    pub safe_fraction: f64,
    pub ticks: usize,
}

impl ControllerRun {
    /// Reached the goal without touching anything.
    pub fn succeeded(&self) -> bool {
        self.reached_goal && !self.collided
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControllerMetricsRow {
    pub method: String,
    pub setting: Setting,
    pub goal_reaching_rate: f64,
    pub safety_rate: f64,
    /// Mean control ticks over successful runs only; `None` if none succeeded.
    pub makespan_mean: Option<f64>,
    pub n_problems: usize,
    pub n_succeeded: usize,
}

/// The problem's world as seen in `setting`: in the dynamic setting every
/// obstacle gets a seeded constant velocity.
pub fn setting_environment(problem: &ProblemSpec, setting: Setting, cfg: &ControllerEvalConfig, seed: u64) -> Environment {
    let mut env = problem.environment.clone();
    if setting == Setting::DynamicPartial {
        let mut rng = indexed_stream(seed, "obstacle-motion", problem.id as u64);
        let [lo, hi] = cfg.speed_range;
        for obstacle in &mut env.obstacles {
            let speed = lo + (hi - lo) * rng.gen::<f64>();
            let heading = std::f64::consts::TAU * rng.gen::<f64>();
            obstacle.velocity = Point::new(heading.cos(), heading.sin()) * speed;
        }
    }
    env
}

/// The learned barrier with the observation model of `setting`: ray casts
/// when partially observed, the configured surface-cloud size otherwise. A
/// state network keeps its signed-distance input in both settings.
pub fn learned_for_setting(cbf: &LearnedCbf, setting: Setting, cfg: &ControllerEvalConfig) -> LearnedCbf {
    let mut cbf = cbf.clone();
    match (&mut cbf.model, setting) {
        (ObservationModel::SignedDistance, _) => {}
        (model, Setting::DynamicPartial) => *model = ObservationModel::RayCast(cfg.scan.clone()),
        (ObservationModel::SurfaceCloud { points, .. }, Setting::StaticFull) => {
            if let Some(n) = cfg.surface_points {
                *points = n;
            }
        }
        _ => {}
    }
    cbf
}

pub fn run_controller(
    arm: &ArmModel,
    problem: &ProblemSpec,
    cbf: &dyn CbfFunction,
    setting: Setting,
    cfg: &ControllerEvalConfig,
    seed: u64,
) -> Result<ControllerRun> {
    let env = setting_environment(problem, setting, cfg, seed);
    let limits = RolloutLimits { horizon_s: cfg.horizon_s, r_goal: cfg.r_goal, stall: None, stop_on_collision: false, ..Default::default() };
    let controller = SafeControllerConfig { alpha: cbf.alpha(), ..cfg.controller };
    let rec = safe_rollout(cbf, &cfg.policy, &controller, arm, &problem.q0, &problem.qg, &env, &limits)?;
    let free = rec.min_signed_distance.iter().filter(|d| **d >= 0.0).count();
    Ok(ControllerRun {
        problem_id: problem.id,
        reached_goal: rec.reached_goal,
        collided: rec.collided,
        safe_fraction: free as f64 / rec.min_signed_distance.len() as f64,
        ticks: rec.ticks_used,
    })
}

/// Rolls the controller out on every problem and aggregates goal-reaching
/// rate, mean per-trajectory safety rate and makespan over successes.
pub fn eval_controller(
    arm: &ArmModel,
    problems: &[ProblemSpec],
    method: &str,
    cbf: &dyn CbfFunction,
    setting: Setting,
    cfg: &ControllerEvalConfig,
    seed: u64,
) -> Result<(ControllerMetricsRow, Vec<ControllerRun>)> {
    if problems.is_empty() {
        return Err(BenchError::Config("no problems to evaluate".into()));
    }
    let runs = problems.par_iter().map(|p| run_controller(arm, p, cbf, setting, cfg, seed)).collect::<Result<Vec<_>>>()?;
    Ok((summarize(method, setting, &runs), runs))
}

pub fn summarize(method: &str, setting: Setting, runs: &[ControllerRun]) -> ControllerMetricsRow {
    let n = runs.len() as f64;
    let wins: Vec<&ControllerRun> = runs.iter().filter(|r| r.succeeded()).collect();
    ControllerMetricsRow {
        method: method.to_string(),
        setting,
        goal_reaching_rate: wins.len() as f64 / n,
        safety_rate: runs.iter().map(|r| r.safe_fraction).sum::<f64>() / n,
        makespan_mean: (!wins.is_empty()).then(|| wins.iter().map(|r| r.ticks as f64).sum::<f64>() / wins.len() as f64),
        n_problems: runs.len(),
        n_succeeded: wins.len(),
    }
}
