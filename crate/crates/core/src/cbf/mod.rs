//! Control barrier functions over configuration and observation.
//!
//! Sign convention: the safe side is negative. A valid barrier satisfies
//! `h ≤ -γ` on safe states, `h > γ` on unsafe states, and everywhere admits
//! a bounded control with `∂h/∂q · u + α_h h ≤ -ε`. Dynamics are `q̇ = u`,
//! so `L_f h = 0` and `L_g h = ∂h/∂q`.

mod checkpoint;
mod dataset;
mod train;

pub use checkpoint::{Checkpoint, LayerParams, NetworkSpec, TrainingMeta, CHECKPOINT_VERSION};
pub use dataset::{collect_dataset, DataConfig, Dataset, LabeledSample};
pub use train::{
    evaluate_constraints, loss, split_indices, train, ConstraintReport, EpochStats, LossComponents, ObsSlot,
    TrainItem, TrainReport, TrainSchedule, TrainingSet,
};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::{signed_distance, CloudObservation, Environment, Observation, ObservationModel};
use crate::kinematics::{ArmModel, JointConfig};
use crate::neural::{EncoderTape, Mlp, MlpTape, PointSetEncoder};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FdMode {
    /// Perturb `q` only and keep the observation taken at `q`.
    FixedObservation,
    /// Re-observe the (static) environment at every stencil point.
    RefreshedObservation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CbfHyper {
    pub gamma: f64,
    pub eps_margin: f64,
    pub alpha_h: f64,
    pub loss_weights: [f64; 3],
    pub fd_step: f64,
    pub fd_mode: FdMode,
    pub r_thres: f64,
}

impl Default for CbfHyper {
    fn default() -> Self {
        Self {
            gamma: 0.05,
            eps_margin: 0.02,
            alpha_h: 1.0,
            loss_weights: [1.0, 1.0, 0.5],
            fd_step: 1e-3,
            fd_mode: FdMode::RefreshedObservation,
            r_thres: 0.05,
        }
    }
}

impl CbfHyper {
    /// Defaults for the point-cloud variant, which keeps the observation fixed.
    pub fn cloud_default() -> Self {
        Self { fd_mode: FdMode::FixedObservation, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [self.gamma, self.eps_margin, self.alpha_h, self.fd_step, self.r_thres]
            .iter()
            .chain(&self.loss_weights)
            .all(|v| *v > 0.0 && v.is_finite());
        if !positive {
            return Err(Error::InvalidConfig("barrier hyperparameters must be positive".into()));
        }
        Ok(())
    }
}

/// Borrowed observation handed to a network.
#[derive(Debug, Clone, Copy)]
pub enum ObsRef<'a> {
    Distance(f64),
    Cloud(&'a CloudObservation),
}

impl Observation {
    pub fn as_ref(&self) -> ObsRef<'_> {
        match self {
            Observation::State(s) => ObsRef::Distance(s.min_signed_distance),
            Observation::Cloud(c) => ObsRef::Cloud(c),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    State,
    Cloud,
}

/// MLP on `[q, d / obs_scale]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateNet {
    pub mlp: Mlp,
    pub obs_scale: f64,
}

impl StateNet {
    fn input(&self, q: &JointConfig, d: f64) -> Vec<f64> {
        let mut x = q.angles.clone();
        x.push(d / self.obs_scale);
        x
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum CbfNetwork {
    State(StateNet),
    Cloud(PointSetEncoder),
}

pub enum NetTape {
    State(MlpTape),
    Cloud(EncoderTape),
}

/// Gradient buffers, one per parameter block (see [`CbfNetwork::blocks_mut`]).
pub type NetGrads = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    /// Hidden widths of the state MLP; input `n + 1` and output 1 are implied.
    pub state_hidden: Vec<usize>,
    pub obs_scale: f64,
    /// Per-point MLP widths after the input.
    pub point_hidden: Vec<usize>,
    /// Trunk hidden widths; input and scalar output are implied.
    pub trunk_hidden: Vec<usize>,
    pub position_scale: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            state_hidden: vec![64, 64],
            obs_scale: 0.1,
            point_hidden: vec![32, 32],
            trunk_hidden: vec![64, 64],
            position_scale: 0.1,
        }
    }
}

impl CbfNetwork {
    pub fn init(variant: Variant, arm: &ArmModel, cfg: &NetworkConfig, rng: &mut impl Rng) -> Result<Self> {
        let n = arm.dof();
        Ok(match variant {
            Variant::State => {
                let mut widths = vec![n + 1];
                widths.extend(&cfg.state_hidden);
                widths.push(1);
                CbfNetwork::State(StateNet { mlp: Mlp::init(&widths, rng)?, obs_scale: cfg.obs_scale })
            }
            Variant::Cloud => {
                let mut enc = PointSetEncoder::init(n, &cfg.point_hidden, &cfg.trunk_hidden, rng)?;
                enc.position_scale = cfg.position_scale;
                CbfNetwork::Cloud(enc)
            }
        })
    }

    pub fn variant(&self) -> Variant {
        match self {
            CbfNetwork::State(_) => Variant::State,
            CbfNetwork::Cloud(_) => Variant::Cloud,
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    pub fn blocks(&self) -> Vec<&[f64]> {
        match self {
            CbfNetwork::State(s) => vec![s.mlp.params()],
            CbfNetwork::Cloud(e) => vec![e.point_mlp.params(), e.trunk.params()],
        }
    }

    pub fn blocks_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            CbfNetwork::State(s) => vec![s.mlp.params_mut()],
            CbfNetwork::Cloud(e) => vec![e.point_mlp.params_mut(), e.trunk.params_mut()],
        }
    }

    pub fn zero_grads(&self) -> NetGrads {
        self.blocks().iter().map(|b| vec![0.0; b.len()]).collect()
    }

    pub fn eval(&self, q: &JointConfig, obs: ObsRef<'_>, arm: &ArmModel) -> Result<f64> {
        match (self, obs) {
            (CbfNetwork::State(s), ObsRef::Distance(d)) => Ok(s.mlp.eval(&s.input(q, d))?[0]),
            (CbfNetwork::Cloud(e), ObsRef::Cloud(c)) => e.eval(q, c, arm),
            _ => Err(Error::VariantMismatch),
        }
    }

    pub fn forward(&self, q: &JointConfig, obs: ObsRef<'_>, arm: &ArmModel) -> Result<(f64, NetTape)> {
        match (self, obs) {
            (CbfNetwork::State(s), ObsRef::Distance(d)) => {
                let (y, tape) = s.mlp.forward(&s.input(q, d))?;
                Ok((y[0], NetTape::State(tape)))
            }
            (CbfNetwork::Cloud(e), ObsRef::Cloud(c)) => {
                let (y, tape) = e.forward(q, c, arm)?;
                Ok((y, NetTape::Cloud(tape)))
            }
            _ => Err(Error::VariantMismatch),
        }
    }

    /// Accumulates `upstream · ∂h/∂θ` and returns `upstream · ∂h/∂q`
    /// (observation held fixed).
    pub fn backward_into(
        &self,
        tape: &NetTape,
        obs: ObsRef<'_>,
        arm: &ArmModel,
        upstream: f64,
        grads: &mut NetGrads,
    ) -> Result<Vec<f64>> {
        match (self, tape, obs) {
            (CbfNetwork::State(s), NetTape::State(t), ObsRef::Distance(_)) => {
                let gx = s.mlp.backward_into(t, &[upstream], &mut grads[0]);
                Ok(gx[..gx.len() - 1].to_vec())
            }
            (CbfNetwork::Cloud(e), NetTape::Cloud(t), ObsRef::Cloud(c)) => {
                let (first, rest) = grads.split_at_mut(1);
                e.backward_into(t, c, arm, upstream, &mut first[0], &mut rest[0])
            }
            _ => Err(Error::VariantMismatch),
        }
    }
}

/// `h_θ(q, o)`.
pub fn h_value(net: &CbfNetwork, q: &JointConfig, observation: &Observation, arm: &ArmModel) -> Result<f64> {
    net.eval(q, observation.as_ref(), arm)
}

/// Forward-difference `∂h/∂q`: `[∂h/∂q]_i = (h(q + ε e_i, o_i) - h(q, o)) / ε`,
/// where `o_i` is either the observation at `q` or a fresh observation at the
/// perturbed configuration, depending on `hyper.fd_mode`.
pub fn grad_h_q(
    net: &CbfNetwork,
    q: &JointConfig,
    env: &Environment,
    arm: &ArmModel,
    hyper: &CbfHyper,
    model: &ObservationModel,
) -> Result<(f64, Vec<f64>)> {
    let obs = model.observe(env, arm, q)?;
    let h0 = net.eval(q, obs.as_ref(), arm)?;
    let eps = hyper.fd_step;
    let refresh = hyper.fd_mode == FdMode::RefreshedObservation && model.depends_on_configuration();
    let grad = (0..q.dim())
        .map(|i| {
            let qi = q.perturbed(i, eps);
            let hi = if refresh {
                net.eval(&qi, model.observe(env, arm, &qi)?.as_ref(), arm)?
            } else {
                net.eval(&qi, obs.as_ref(), arm)?
            };
            Ok((hi - h0) / eps)
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok((h0, grad))
}

/// Minimum of `c · u` over the box `lo ≤ u ≤ hi`, with its minimizer.
/// Separable: each coordinate takes the bound opposing the sign of its
/// coefficient; a zero coefficient takes the lower bound.
pub fn inf_control_term(coeffs: &[f64], lo: &[f64], hi: &[f64]) -> (f64, Vec<f64>) {
    let mut value = 0.0;
    let argmin = coeffs
        .iter()
        .zip(lo.iter().zip(hi))
        .map(|(&c, (&l, &h))| {
            let u = if c > 0.0 { l } else if c < 0.0 { h } else { l };
            value += c * u;
            u
        })
        .collect();
    (value, argmin)
}

/// `h = margin - d(q)` with forward-difference gradient of the signed distance.
pub fn handcrafted_h(env: &Environment, arm: &ArmModel, q: &JointConfig, margin: f64, fd_step: f64) -> Result<(f64, Vec<f64>)> {
    let d0 = signed_distance(env, arm, q)?;
    let grad = (0..q.dim())
        .map(|i| Ok(-(signed_distance(env, arm, &q.perturbed(i, fd_step))? - d0) / fd_step))
        .collect::<Result<Vec<f64>>>()?;
    Ok((margin - d0, grad))
}

/// Anything that can supply `h` and `∂h/∂q` to the safety filter.
pub trait CbfFunction: Send + Sync {
    fn evaluate(&self, env: &Environment, arm: &ArmModel, q: &JointConfig) -> Result<(f64, Vec<f64>)>;

    /// Class-K gain used in the derivative condition.
    fn alpha(&self) -> f64;
}

/// A trained network together with the observation model it consumes.
#[derive(Debug, Clone)]
pub struct LearnedCbf {
    pub net: CbfNetwork,
    pub hyper: CbfHyper,
    pub model: ObservationModel,
}

impl CbfFunction for LearnedCbf {
    fn evaluate(&self, env: &Environment, arm: &ArmModel, q: &JointConfig) -> Result<(f64, Vec<f64>)> {
        grad_h_q(&self.net, q, env, arm, &self.hyper, &self.model)
    }

    fn alpha(&self) -> f64 {
        self.hyper.alpha_h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HandcraftedCbf {
    pub margin: f64,
    pub fd_step: f64,
    pub alpha: f64,
}

impl CbfFunction for HandcraftedCbf {
    fn evaluate(&self, env: &Environment, arm: &ArmModel, q: &JointConfig) -> Result<(f64, Vec<f64>)> {
        handcrafted_h(env, arm, q, self.margin, self.fd_step)
    }

    fn alpha(&self) -> f64 {
        self.alpha
    }
}
