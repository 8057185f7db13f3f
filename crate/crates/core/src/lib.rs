//! Learned control barrier functions for planar serial manipulators, the QP
//! safety filter they induce, and an RRT planner that uses the filtered
//! controller as its steer function.
//!
//! Module map:
//!
//! - [`kinematics`]: planar n-link arm with capsule links, velocity control.
//! - [`environment`]: obstacle worlds, signed distance, safety labels, and the
//!   two observation models (surface point clouds and ray-cast scans).
//! - [`neural`]: MLP and permutation-invariant point-set encoder with
//!   reverse-mode gradients, Adam.
//! - [`cbf`]: barrier-function datasets, the three-term hinge loss, training
//!   and constraint auditing.
//! - [`controller`]: nominal policy, QP safety filter, closed-loop rollouts.
//! - [`planner`]: RRT with pluggable steer functions.

pub mod cbf;
pub mod controller;
pub mod environment;
mod error;
pub mod geometry;
pub mod kinematics;
pub mod neural;
pub mod planner;
pub mod rng;

pub use error::{Error, Result};
