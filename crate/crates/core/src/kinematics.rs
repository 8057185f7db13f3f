//! Planar n-link serial manipulator.
//!
//! Joint angles are relative: link `i` points along the cumulative angle
//! `q_0 + ... + q_i` measured from the world +x axis. Links are capsules
//! (segment plus radius). Dynamics are a pure velocity integrator, `q̇ = u`,
//! with `u` restricted to a symmetric per-joint box.

use nalgebra::{DMatrix, Vector2};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub type Point = Vector2<f64>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmModel {
    pub link_lengths: Vec<f64>,
    pub link_radius: f64,
    pub joint_lower: Vec<f64>,
    pub joint_upper: Vec<f64>,
    /// Per-joint speed bound; the action box is `[-b_i, b_i]`.
    pub action_bound: Vec<f64>,
    pub base_position: Point,
}

impl Default for ArmModel {
    fn default() -> Self {
        Self::uniform(&[0.5, 0.4, 0.3], 0.04, 2.8, 1.0)
    }
}

impl ArmModel {
    /// Arm with symmetric limits `±joint_limit` and speed bound `u_max` on every joint.
    pub fn uniform(link_lengths: &[f64], link_radius: f64, joint_limit: f64, u_max: f64) -> Self {
        let n = link_lengths.len();
        Self {
            link_lengths: link_lengths.to_vec(),
            link_radius,
            joint_lower: vec![-joint_limit; n],
            joint_upper: vec![joint_limit; n],
            action_bound: vec![u_max; n],
            base_position: Point::zeros(),
        }
    }

    pub fn dof(&self) -> usize {
        self.link_lengths.len()
    }

    /// Sum of link lengths; Lipschitz constant of every link endpoint with
    /// respect to the 1-norm of a joint step.
    pub fn reach(&self) -> f64 {
        self.link_lengths.iter().sum()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dof();
        if n < 2 {
            return Err(Error::InvalidArm(format!("need at least 2 links, got {n}")));
        }
        for (name, len) in [
            ("joint_lower", self.joint_lower.len()),
            ("joint_upper", self.joint_upper.len()),
            ("action_bound", self.action_bound.len()),
        ] {
            if len != n {
                return Err(Error::InvalidArm(format!("{name} has {len} entries for {n} links")));
            }
        }
        if self.link_lengths.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(Error::InvalidArm("link lengths must be positive".into()));
        }
        if !(self.link_radius > 0.0 && self.link_radius.is_finite()) {
            return Err(Error::InvalidArm("link radius must be positive".into()));
        }
        for i in 0..n {
            if !(self.joint_lower[i] < self.joint_upper[i]) {
                return Err(Error::InvalidArm(format!("joint {i} has empty limits")));
            }
            if !(self.action_bound[i] > 0.0 && self.action_bound[i].is_finite()) {
                return Err(Error::InvalidArm(format!("joint {i} action bound must be positive")));
            }
        }
        if !self.base_position.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("base_position"));
        }
        Ok(())
    }

    pub fn action_lower(&self) -> Vec<f64> {
        self.action_bound.iter().map(|b| -b).collect()
    }

    pub fn action_upper(&self) -> Vec<f64> {
        self.action_bound.clone()
    }

    fn check_dim(&self, q: &JointConfig) -> Result<()> {
        if q.dim() != self.dof() {
            return Err(Error::DimensionMismatch { expected: self.dof(), got: q.dim() });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JointConfig {
    pub angles: Vec<f64>,
}

impl JointConfig {
    pub fn new(angles: Vec<f64>) -> Self {
        Self { angles }
    }

    pub fn zeros(n: usize) -> Self {
        Self { angles: vec![0.0; n] }
    }

    pub fn dim(&self) -> usize {
        self.angles.len()
    }

    pub fn distance(&self, other: &JointConfig) -> f64 {
        self.angles
            .iter()
            .zip(&other.angles)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Linear interpolation `self + t (other - self)`.
    pub fn lerp(&self, other: &JointConfig, t: f64) -> JointConfig {
        JointConfig::new(
            self.angles
                .iter()
                .zip(&other.angles)
                .map(|(a, b)| a + t * (b - a))
                .collect(),
        )
    }

    /// Copy with joint `i` shifted by `delta`.
    pub fn perturbed(&self, i: usize, delta: f64) -> JointConfig {
        let mut q = self.clone();
        q.angles[i] += delta;
        q
    }
}

impl From<Vec<f64>> for JointConfig {
    fn from(angles: Vec<f64>) -> Self {
        Self::new(angles)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkSegment {
    pub endpoint_a: Point,
    pub endpoint_b: Point,
    pub radius: f64,
    pub link_index: usize,
}

impl LinkSegment {
    pub fn midpoint(&self) -> Point {
        (self.endpoint_a + self.endpoint_b) * 0.5
    }

    /// Absolute heading of the link.
    pub fn angle(&self) -> f64 {
        let d = self.endpoint_b - self.endpoint_a;
        d.y.atan2(d.x)
    }
}

/// Pose of a link frame: origin at the proximal joint, x-axis along the link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkFrame {
    pub origin: Point,
    pub angle: f64,
}

impl LinkFrame {
    /// World point expressed in this frame.
    pub fn to_local(&self, p: &Point) -> Point {
        let (s, c) = self.angle.sin_cos();
        let d = p - self.origin;
        Point::new(c * d.x + s * d.y, -s * d.x + c * d.y)
    }

    /// World direction expressed in this frame.
    pub fn rotate_to_local(&self, v: &Point) -> Point {
        let (s, c) = self.angle.sin_cos();
        Point::new(c * v.x + s * v.y, -s * v.x + c * v.y)
    }
}

pub fn link_frames(arm: &ArmModel, q: &JointConfig) -> Result<Vec<LinkFrame>> {
    arm.check_dim(q)?;
    let mut frames = Vec::with_capacity(arm.dof());
    let mut origin = arm.base_position;
    let mut angle = 0.0;
    for (qi, len) in q.angles.iter().zip(&arm.link_lengths) {
        angle += qi;
        frames.push(LinkFrame { origin, angle });
        origin += Point::new(angle.cos(), angle.sin()) * *len;
    }
    Ok(frames)
}

pub fn forward_kinematics(arm: &ArmModel, q: &JointConfig) -> Result<Vec<LinkSegment>> {
    let frames = link_frames(arm, q)?;
    Ok(frames
        .iter()
        .zip(&arm.link_lengths)
        .enumerate()
        .map(|(i, (f, len))| LinkSegment {
            endpoint_a: f.origin,
            endpoint_b: f.origin + Point::new(f.angle.cos(), f.angle.sin()) * *len,
            radius: arm.link_radius,
            link_index: i,
        })
        .collect())
}

pub fn tip_position(arm: &ArmModel, q: &JointConfig) -> Result<Point> {
    let segments = forward_kinematics(arm, q)?;
    Ok(segments.last().map(|s| s.endpoint_b).unwrap_or(arm.base_position))
}

/// 2×n Jacobian of the tip position. Column `i` is the sum over links
/// `k ≥ i` of `l_k (-sin θ_k, cos θ_k)`.
pub fn tip_jacobian(arm: &ArmModel, q: &JointConfig) -> Result<DMatrix<f64>> {
    let frames = link_frames(arm, q)?;
    let n = arm.dof();
    let mut jac = DMatrix::zeros(2, n);
    let mut acc = Point::zeros();
    for k in (0..n).rev() {
        let theta = frames[k].angle;
        acc += Point::new(-theta.sin(), theta.cos()) * arm.link_lengths[k];
        jac[(0, k)] = acc.x;
        jac[(1, k)] = acc.y;
    }
    Ok(jac)
}

pub fn clamp_to_limits(arm: &ArmModel, q: &JointConfig) -> JointConfig {
    JointConfig::new(
        q.angles
            .iter()
            .zip(arm.joint_lower.iter().zip(&arm.joint_upper))
            .map(|(&a, (&lo, &hi))| a.clamp(lo, hi))
            .collect(),
    )
}

pub fn within_limits(arm: &ArmModel, q: &JointConfig) -> bool {
    q.angles
        .iter()
        .zip(arm.joint_lower.iter().zip(&arm.joint_upper))
        .all(|(&a, (&lo, &hi))| a >= lo && a <= hi)
}

/// Clip `u` into the action box. Returns whether any component changed.
pub fn clip_action(arm: &ArmModel, u: &[f64]) -> (Vec<f64>, bool) {
    let mut clipped = false;
    let out = u
        .iter()
        .zip(&arm.action_bound)
        .map(|(&v, &b)| {
            let c = v.clamp(-b, b);
            clipped |= c != v;
            c
        })
        .collect();
    (out, clipped)
}

/// One explicit Euler step of `q̇ = u`. Returns the new configuration and
/// whether `u` had to be clipped into the action box.
pub fn integrate(arm: &ArmModel, q: &JointConfig, u: &[f64], dt: f64) -> Result<(JointConfig, bool)> {
    arm.check_dim(q)?;
    if u.len() != arm.dof() {
        return Err(Error::DimensionMismatch { expected: arm.dof(), got: u.len() });
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("control"));
    }
    let (u, clipped) = clip_action(arm, u);
    let next = JointConfig::new(q.angles.iter().zip(&u).map(|(a, v)| a + v * dt).collect());
    Ok((clamp_to_limits(arm, &next), clipped))
}
