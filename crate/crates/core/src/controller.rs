//! Goal-seeking nominal policy, the barrier-constrained QP filter, and
//! closed-loop rollouts with separate simulation and control rates.

use serde::{Deserialize, Serialize};

use crate::cbf::{inf_control_term, CbfFunction};
use crate::environment::{signed_distance, step_obstacles_in_place, Environment};
use crate::kinematics::{integrate, ArmModel, JointConfig};
use crate::{Error, Result};

/// Proportional feedback toward the goal, clipped to the action box. For
/// `q̇ = u` this is what an LQR law reduces to.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NominalPolicy {
    pub gain: f64,
}

impl Default for NominalPolicy {
    fn default() -> Self {
        Self { gain: 1.0 }
    }
}

pub fn nominal_control(policy: &NominalPolicy, q: &JointConfig, goal: &JointConfig, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    q.angles
        .iter()
        .zip(&goal.angles)
        .zip(lo.iter().zip(hi))
        .map(|((a, g), (&l, &h))| (-policy.gain * (a - g)).clamp(l, h))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum QpMode {
    /// Hard constraint; infeasibility is reported.
    Strict,
    /// Quadratic penalty on the constraint violation; always solvable.
    Relaxed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SafeControllerConfig {
    pub alpha: f64,
    pub relax_penalty: f64,
    pub mode: QpMode,
}

impl Default for SafeControllerConfig {
    fn default() -> Self {
        Self { alpha: 1.0, relax_penalty: 1e3, mode: QpMode::Relaxed }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QpDiagnostics {
    pub constraint_active: bool,
    /// The halfspace does not meet the action box.
    pub infeasible: bool,
    /// `max(0, a·u + b)` at the returned control.
    pub violation: f64,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn clipped_step(u_nom: &[f64], a: &[f64], lambda: f64, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    u_nom
        .iter()
        .zip(a)
        .zip(lo.iter().zip(hi))
        .map(|((u, a), (&l, &h))| (u - lambda * a).clamp(l, h))
        .collect()
}

/// Sorted positive values of `λ` at which some coordinate of
/// `clip(u_nom - λa)` enters or leaves a bound.
fn breakpoints(u_nom: &[f64], a: &[f64], lo: &[f64], hi: &[f64]) -> Vec<f64> {
    let mut out: Vec<f64> = Vec::with_capacity(2 * a.len());
    for i in 0..a.len() {
        if a[i] != 0.0 {
            for bound in [lo[i], hi[i]] {
                let t = (u_nom[i] - bound) / a[i];
                if t > 0.0 && t.is_finite() {
                    out.push(t);
                }
            }
        }
    }
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Sum of `a_i²` over coordinates that are strictly between their bounds
/// just after `lambda`.
fn free_curvature(u_nom: &[f64], a: &[f64], lambda: f64, next: f64, lo: &[f64], hi: &[f64]) -> f64 {
    let probe = if next.is_finite() { 0.5 * (lambda + next) } else { lambda + 1.0 };
    (0..a.len())
        .filter(|&i| {
            let v = u_nom[i] - probe * a[i];
            a[i] != 0.0 && v > lo[i] && v < hi[i]
        })
        .map(|i| a[i] * a[i])
        .sum()
}

/// Minimizes `‖u - u_nom‖²` subject to `a·u + b ≤ 0` and `lo ≤ u ≤ hi`
/// (Strict) or `‖u - u_nom‖² + ρ [a·u + b]₊²` over the box (Relaxed).
///
/// Both problems have minimizers of the form `clip(u_nom - λa)` with
/// `λ ≥ 0`, and `a·clip(u_nom - λa)` is piecewise linear and nonincreasing
/// in `λ`, so the multiplier is found exactly by walking the breakpoints.
/// When the constraint is slack at `u_nom` (inside the box) the nominal
/// control is returned unchanged.
pub fn solve_safety_qp(
    u_nom: &[f64],
    a: &[f64],
    b: f64,
    cfg: &SafeControllerConfig,
    lo: &[f64],
    hi: &[f64],
) -> Result<(Vec<f64>, QpDiagnostics)> {
    let n = u_nom.len();
    for len in [a.len(), lo.len(), hi.len()] {
        if len != n {
            return Err(Error::DimensionMismatch { expected: n, got: len });
        }
    }
    if !(u_nom.iter().chain(a).chain(lo).chain(hi).all(|v| v.is_finite()) && b.is_finite()) {
        return Err(Error::NonFinite("safety QP input"));
    }
    if lo.iter().zip(hi).any(|(l, h)| l > h) {
        return Err(Error::InvalidConfig("empty action box".into()));
    }
    if cfg.mode == QpMode::Relaxed && !(cfg.relax_penalty > 0.0) {
        return Err(Error::InvalidConfig("relax_penalty must be positive".into()));
    }

    let infeasible = inf_control_term(a, lo, hi).0 + b > 0.0;
    let start = clipped_step(u_nom, a, 0.0, lo, hi);
    let phi0 = dot(a, &start) + b;
    if phi0 <= 0.0 {
        let diag = QpDiagnostics { constraint_active: false, infeasible, violation: 0.0 };
        return Ok((start, diag));
    }

    let rho = cfg.relax_penalty;
    // Root of g(λ) on [0, ∞): Strict solves φ(λ) = 0, Relaxed solves
    // λ = ρ φ(λ). Both are decreasing-then-crossing along the walk.
    let residual = |lambda: f64, phi: f64| match cfg.mode {
        QpMode::Strict => phi,
        QpMode::Relaxed => rho * phi - lambda,
    };

    let knots = breakpoints(u_nom, a, lo, hi);
    let mut lambda = 0.0;
    let mut phi = phi0;
    let mut solution = None;
    for k in 0..=knots.len() {
        let next = knots.get(k).copied().unwrap_or(f64::INFINITY);
        let s = free_curvature(u_nom, a, lambda, next, lo, hi);
        // Along this piece φ(λ') = φ - s(λ' - λ).
        let slope = match cfg.mode {
            QpMode::Strict => s,
            QpMode::Relaxed => rho * s + 1.0,
        };
        if slope > 0.0 {
            let root = lambda + residual(lambda, phi) / slope;
            if root <= next {
                solution = Some(root);
                break;
            }
        }
        if !next.is_finite() {
            break;
        }
        lambda = next;
        phi = dot(a, &clipped_step(u_nom, a, lambda, lo, hi)) + b;
        if residual(lambda, phi) <= 0.0 {
            solution = Some(lambda);
            break;
        }
    }

    let u = match solution {
        Some(l) => clipped_step(u_nom, a, l, lo, hi),
        // Strict and infeasible: the box point that violates least, with
        // free coordinates left at the nominal value.
        None => u_nom
            .iter()
            .zip(a)
            .zip(lo.iter().zip(hi))
            .map(|((&u, &c), (&l, &h))| if c > 0.0 { l } else if c < 0.0 { h } else { u.clamp(l, h) })
            .collect(),
    };
    let violation = (dot(a, &u) + b).max(0.0);
    Ok((u, QpDiagnostics { constraint_active: true, infeasible, violation }))
}

/// Early termination when the filtered control stays near zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StallRule {
    pub threshold: f64,
    pub ticks: usize,
}

impl Default for StallRule {
    fn default() -> Self {
        Self { threshold: 1e-3, ticks: 5 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RolloutLimits {
    pub horizon_s: f64,
    pub sim_hz: u32,
    pub ctrl_hz: u32,
    /// Radius of the joint-space goal ball.
    pub r_goal: f64,
    pub stall: Option<StallRule>,
    /// End the rollout at the first colliding state. When off, the rollout
    /// runs on so the whole trajectory can be scored.
    pub stop_on_collision: bool,
}

impl Default for RolloutLimits {
    fn default() -> Self {
        Self { horizon_s: 10.0, sim_hz: 120, ctrl_hz: 30, r_goal: 0.1, stall: None, stop_on_collision: true }
    }
}

impl RolloutLimits {
    pub fn validate(&self) -> Result<()> {
        if self.ctrl_hz == 0 || !self.sim_hz.is_multiple_of(self.ctrl_hz) {
            return Err(Error::InvalidConfig("sim_hz must be a positive multiple of ctrl_hz".into()));
        }
        if !(self.horizon_s >= 0.0 && self.r_goal > 0.0) {
            return Err(Error::InvalidConfig("horizon must be nonnegative and r_goal positive".into()));
        }
        Ok(())
    }

    pub fn max_ticks(&self) -> usize {
        (self.horizon_s * self.ctrl_hz as f64).round() as usize
    }

    pub fn substeps(&self) -> usize {
        (self.sim_hz / self.ctrl_hz) as usize
    }
}

/// A closed-loop trajectory at simulation rate. `configs[k]` and
/// `min_signed_distance[k]` describe the state before `controls[k]` is
/// applied, so `configs` has one more entry than `controls`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutRecord {
    pub configs: Vec<JointConfig>,
    pub controls: Vec<Vec<f64>>,
    pub min_signed_distance: Vec<f64>,
    pub reached_goal: bool,
    pub collided: bool,
    pub stalled: bool,
    /// Control ticks at which the hard constraint had no solution in the box.
    pub qp_infeasible_count: usize,
    pub steps_used: usize,
    pub ticks_used: usize,
}

/// Runs the filtered controller from `q0` toward `goal`. The barrier is
/// re-evaluated at every control tick and the filtered control is held over
/// the simulation sub-steps; obstacles with nonzero velocity move at
/// simulation rate. Stops on reaching the goal ball, on collision (unless
/// disabled), on a stall (if enabled), or at the horizon.
#[allow(clippy::too_many_arguments)]
pub fn safe_rollout(
    cbf: &dyn CbfFunction,
    policy: &NominalPolicy,
    cfg: &SafeControllerConfig,
    arm: &ArmModel,
    q0: &JointConfig,
    goal: &JointConfig,
    env: &Environment,
    limits: &RolloutLimits,
) -> Result<RolloutRecord> {
    limits.validate()?;
    let mut env = env.clone();
    let dynamic = !env.is_static();
    let dt = 1.0 / limits.sim_hz as f64;
    let (lo, hi) = (arm.action_lower(), arm.action_upper());

    let d0 = signed_distance(&env, arm, q0)?;
    if d0 < 0.0 {
        return Err(Error::InvalidProblem("rollout starts in collision".into()));
    }
    let mut rec = RolloutRecord {
        configs: vec![q0.clone()],
        controls: Vec::new(),
        min_signed_distance: vec![d0],
        reached_goal: q0.distance(goal) <= limits.r_goal,
        collided: false,
        stalled: false,
        qp_infeasible_count: 0,
        steps_used: 0,
        ticks_used: 0,
    };
    let mut q = q0.clone();
    let mut quiet_ticks = 0;
    'ticks: while !rec.reached_goal && rec.ticks_used < limits.max_ticks() {
        let u_nom = nominal_control(policy, &q, goal, &lo, &hi);
        let (h, grad) = cbf.evaluate(&env, arm, &q)?;
        let (u, diag) = solve_safety_qp(&u_nom, &grad, cfg.alpha * h, cfg, &lo, &hi)?;
        rec.ticks_used += 1;
        rec.qp_infeasible_count += diag.infeasible as usize;

        for _ in 0..limits.substeps() {
            let (next, _) = integrate(arm, &q, &u, dt)?;
            if dynamic {
                step_obstacles_in_place(&mut env, dt);
            }
            let d = signed_distance(&env, arm, &next)?;
            q = next;
            rec.controls.push(u.clone());
            rec.configs.push(q.clone());
            rec.min_signed_distance.push(d);
            rec.steps_used += 1;
            if d < 0.0 {
                rec.collided = true;
                if limits.stop_on_collision {
                    break 'ticks;
                }
            }
            if q.distance(goal) <= limits.r_goal {
                rec.reached_goal = true;
                break 'ticks;
            }
        }

        if let Some(rule) = limits.stall {
            let norm = u.iter().map(|v| v * v).sum::<f64>().sqrt();
            quiet_ticks = if norm < rule.threshold { quiet_ticks + 1 } else { 0 };
            if quiet_ticks >= rule.ticks {
                rec.stalled = true;
                break;
            }
        }
    }
    Ok(rec)
}

#[cfg(test)]
mod tests;
