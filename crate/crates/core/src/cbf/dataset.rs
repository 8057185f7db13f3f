//! Labeled training data: closed-loop nominal rollouts plus uniform poses,
//! each in a freshly generated world.

use std::io::{BufRead, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::controller::{nominal_control, NominalPolicy};
use crate::environment::{
    label_from_distance, random_environment, signed_distance, EnvGenConfig, Environment, SafetyLabel, StateObservation,
};
use crate::kinematics::{integrate, ArmModel, JointConfig};
use crate::rng::ChaCha8Rng;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub rollout_trajs: usize,
    pub uniform_samples: usize,
    /// Uniform samples drawn per generated world.
    pub uniform_per_env: usize,
    pub env: EnvGenConfig,
    pub policy: NominalPolicy,
    /// Control ticks per rollout; the rollout ends earlier at the goal.
    pub rollout_ticks: usize,
    pub sim_hz: u32,
    pub ctrl_hz: u32,
    pub r_goal: f64,
    pub r_thres: f64,
    /// Attempts at drawing a collision-free start/goal pair per world.
    pub endpoint_attempts: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            rollout_trajs: 600,
            uniform_samples: 30_000,
            uniform_per_env: 25,
            env: EnvGenConfig::default(),
            policy: NominalPolicy::default(),
            rollout_ticks: 90,
            sim_hz: 120,
            ctrl_hz: 30,
            r_goal: 0.1,
            r_thres: 0.05,
            endpoint_attempts: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub q: JointConfig,
    pub observation: StateObservation,
    pub label: SafetyLabel,
    /// Index into [`Dataset::environments`].
    pub env_ref: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub arm: ArmModel,
    pub r_thres: f64,
    pub environments: Vec<Environment>,
    pub samples: Vec<LabeledSample>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum Line {
    Header { arm: ArmModel, r_thres: f64, environments: usize, samples: usize },
    Environment { id: usize, environment: Environment },
    Sample(LabeledSample),
}

fn uniform_config(arm: &ArmModel, rng: &mut impl Rng) -> JointConfig {
    JointConfig::new(
        arm.joint_lower
            .iter()
            .zip(&arm.joint_upper)
            .map(|(lo, hi)| lo + (hi - lo) * rng.gen::<f64>())
            .collect(),
    )
}

fn labeled(env: &Environment, arm: &ArmModel, q: JointConfig, env_ref: usize, r_thres: f64) -> Result<LabeledSample> {
    let d = signed_distance(env, arm, &q)?;
    Ok(LabeledSample {
        q,
        observation: StateObservation { min_signed_distance: d },
        label: label_from_distance(d, r_thres),
        env_ref,
    })
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Counts of (Safe, Boundary, Unsafe) samples.
    pub fn label_histogram(&self) -> [usize; 3] {
        let mut h = [0; 3];
        for s in &self.samples {
            h[s.label as usize] += 1;
        }
        h
    }

    /// JSON lines: a header, then every environment, then every sample.
    pub fn write_jsonl(&self, mut w: impl Write) -> Result<()> {
        let header = Line::Header {
            arm: self.arm.clone(),
            r_thres: self.r_thres,
            environments: self.environments.len(),
            samples: self.samples.len(),
        };
        serde_json::to_writer(&mut w, &header)?;
        writeln!(w)?;
        for (id, environment) in self.environments.iter().enumerate() {
            serde_json::to_writer(&mut w, &Line::Environment { id, environment: environment.clone() })?;
            writeln!(w)?;
        }
        for s in &self.samples {
            serde_json::to_writer(&mut w, &Line::Sample(s.clone()))?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Dataset> {
        let mut header = None;
        let mut environments = Vec::new();
        let mut samples = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            match serde_json::from_str(&line)? {
                Line::Header { arm, r_thres, .. } => header = Some((arm, r_thres)),
                Line::Environment { id, environment } => {
                    if id != environments.len() {
                        return Err(Error::InvalidConfig(format!("environment {id} out of order")));
                    }
                    environments.push(environment);
                }
                Line::Sample(s) => samples.push(s),
            }
        }
        let (arm, r_thres) = header.ok_or_else(|| Error::InvalidConfig("dataset has no header line".into()))?;
        if let Some(s) = samples.iter().find(|s| s.env_ref >= environments.len()) {
            return Err(Error::InvalidConfig(format!("sample refers to missing environment {}", s.env_ref)));
        }
        Ok(Dataset { arm, r_thres, environments, samples })
    }
}

/// Generates a labeled dataset.
///
/// Rollout part: for each trajectory a fresh world and a collision-free
/// start/goal pair are drawn, then the nominal policy is run at control
/// rate with zero-order hold over the simulation sub-steps. Every control
/// tick contributes one sample, including states in collision (the
/// nominal policy ignores obstacles). Uniform part: joint configurations
/// drawn uniformly within the limits, with a fresh world every
/// `uniform_per_env` samples.
pub fn collect_dataset(arm: &ArmModel, cfg: &DataConfig, rng: &mut ChaCha8Rng) -> Result<Dataset> {
    arm.validate()?;
    if cfg.rollout_trajs == 0 && cfg.uniform_samples == 0 {
        return Err(Error::InvalidConfig("dataset needs a positive sample count".into()));
    }
    if cfg.ctrl_hz == 0 || !cfg.sim_hz.is_multiple_of(cfg.ctrl_hz) || cfg.uniform_per_env == 0 {
        return Err(Error::InvalidConfig("bad rates or uniform_per_env".into()));
    }
    let mut data = Dataset { arm: arm.clone(), r_thres: cfg.r_thres, environments: Vec::new(), samples: Vec::new() };
    let (lo, hi) = (arm.action_lower(), arm.action_upper());
    let substeps = (cfg.sim_hz / cfg.ctrl_hz) as usize;
    let dt = 1.0 / cfg.sim_hz as f64;

    for _ in 0..cfg.rollout_trajs {
        let mut worlds = 0;
        let (env, q0, goal) = loop {
            if worlds == cfg.env.max_attempts {
                return Err(Error::Generation { what: "world with a collision-free start/goal pair".into(), attempts: worlds });
            }
            worlds += 1;
            let env = random_environment(&cfg.env, rng)?;
            let mut pair = None;
            for _ in 0..cfg.endpoint_attempts {
                let q0 = uniform_config(arm, rng);
                let goal = uniform_config(arm, rng);
                if signed_distance(&env, arm, &q0)? >= 0.0 && signed_distance(&env, arm, &goal)? >= 0.0 {
                    pair = Some((q0, goal));
                    break;
                }
            }
            if let Some((q0, goal)) = pair {
                break (env, q0, goal);
            }
        };
        let env_ref = data.environments.len();
        let mut q = q0;
        for _ in 0..cfg.rollout_ticks {
            data.samples.push(labeled(&env, arm, q.clone(), env_ref, cfg.r_thres)?);
            if q.distance(&goal) <= cfg.r_goal {
                break;
            }
            let u = nominal_control(&cfg.policy, &q, &goal, &lo, &hi);
            for _ in 0..substeps {
                q = integrate(arm, &q, &u, dt)?.0;
            }
        }
        data.environments.push(env);
    }

    let mut remaining = cfg.uniform_samples;
    while remaining > 0 {
        let env = random_environment(&cfg.env, rng)?;
        let env_ref = data.environments.len();
        for _ in 0..remaining.min(cfg.uniform_per_env) {
            let q = uniform_config(arm, rng);
            data.samples.push(labeled(&env, arm, q, env_ref, cfg.r_thres)?);
        }
        remaining -= remaining.min(cfg.uniform_per_env);
        data.environments.push(env);
    }
    Ok(data)
}
