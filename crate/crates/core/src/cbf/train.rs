//! The three-term hinge loss, mini-batch training and constraint audits.

use std::collections::HashMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{inf_control_term, CbfHyper, CbfNetwork, FdMode, NetGrads, ObsRef, Variant};
use crate::environment::{signed_distance, CloudObservation, Observation, ObservationModel, SafetyLabel};
use crate::kinematics::{ArmModel, JointConfig};
use crate::neural::{adam_step, AdamConfig, AdamState};
use crate::rng::ChaCha8Rng;
use crate::{Error, Result};

use super::dataset::Dataset;

/// Where a training item's observation lives.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObsSlot {
    Distance(f64),
    /// Index into [`TrainingSet::clouds`].
    Cloud(usize),
}

/// A sample with its observation at `q` and at each forward-difference
/// stencil point `q + ε e_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainItem {
    pub q: JointConfig,
    pub label: SafetyLabel,
    pub base: ObsSlot,
    pub stencil: Vec<ObsSlot>,
}

/// Samples with observations resolved ahead of training, so that every
/// loss evaluation is a pure function of the network parameters.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub arm: ArmModel,
    pub items: Vec<TrainItem>,
    pub clouds: Vec<CloudObservation>,
}

impl TrainingSet {
    pub fn new(arm: ArmModel, items: Vec<TrainItem>, clouds: Vec<CloudObservation>) -> Self {
        Self { arm, items, clouds }
    }

    /// Resolves every sample's observations under `model`. Stencil
    /// observations are re-taken at the perturbed configuration in
    /// `RefreshedObservation` mode and copied from the base otherwise.
    pub fn build(data: &Dataset, model: &ObservationModel, hyper: &CbfHyper) -> Result<Self> {
        let arm = &data.arm;
        let refresh = hyper.fd_mode == FdMode::RefreshedObservation && model.depends_on_configuration();
        let mut clouds = Vec::new();
        let mut per_env: HashMap<usize, usize> = HashMap::new();
        let mut items = Vec::with_capacity(data.samples.len());
        for s in &data.samples {
            let env = &data.environments[s.env_ref];
            let mut slot_at = |q: &JointConfig, fresh: bool| -> Result<ObsSlot> {
                Ok(match model {
                    ObservationModel::SignedDistance => ObsSlot::Distance(if fresh {
                        signed_distance(env, arm, q)?
                    } else {
                        s.observation.min_signed_distance
                    }),
                    _ if !model.depends_on_configuration() => {
                        let next = clouds.len();
                        let idx = *per_env.entry(s.env_ref).or_insert(next);
                        if idx == next {
                            clouds.push(cloud_of(model.observe(env, arm, q)?)?);
                        }
                        ObsSlot::Cloud(idx)
                    }
                    _ => {
                        clouds.push(cloud_of(model.observe(env, arm, q)?)?);
                        ObsSlot::Cloud(clouds.len() - 1)
                    }
                })
            };
            let base = slot_at(&s.q, false)?;
            let stencil = (0..s.q.dim())
                .map(|i| if refresh { slot_at(&s.q.perturbed(i, hyper.fd_step), true) } else { Ok(base) })
                .collect::<Result<Vec<_>>>()?;
            items.push(TrainItem { q: s.q.clone(), label: s.label, base, stencil });
        }
        Ok(Self { arm: arm.clone(), items, clouds })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn obs(&self, slot: ObsSlot) -> ObsRef<'_> {
        match slot {
            ObsSlot::Distance(d) => ObsRef::Distance(d),
            ObsSlot::Cloud(i) => ObsRef::Cloud(&self.clouds[i]),
        }
    }

    pub fn variant(&self) -> Option<Variant> {
        self.items.first().map(|it| match it.base {
            ObsSlot::Distance(_) => Variant::State,
            ObsSlot::Cloud(_) => Variant::Cloud,
        })
    }
}

fn cloud_of(obs: Observation) -> Result<CloudObservation> {
    match obs {
        Observation::Cloud(c) => Ok(c),
        Observation::State(_) => Err(Error::VariantMismatch),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossComponents {
    pub safe: f64,
    #[serde(rename = "unsafe")]
    pub unsafe_: f64,
    pub derivative: f64,
}

impl LossComponents {
    pub fn total(&self) -> f64 {
        self.safe + self.unsafe_ + self.derivative
    }
}

/// `ε + inf_u ∇h·u + α_h h` with its minimizing control, from `h` at the
/// base point and at the stencil points.
fn derivative_residual(h: f64, stencil_h: &[f64], hyper: &CbfHyper, lo: &[f64], hi: &[f64]) -> (f64, Vec<f64>) {
    let grad: Vec<f64> = stencil_h.iter().map(|hi| (hi - h) / hyper.fd_step).collect();
    let (inf, argmin) = inf_control_term(&grad, lo, hi);
    (hyper.eps_margin + inf + hyper.alpha_h * h, argmin)
}

/// Mini-batch loss and its parameter gradient.
///
/// `safe = α₁/N_s Σ_safe [γ + h]₊`, `unsafe = α₂/N_u Σ_unsafe [γ - h]₊`,
/// `derivative = α₃/N Σ_all [ε + inf_u ∇h·u + α_h h]₊`. Boundary samples
/// enter only the last term. The derivative term is differentiated through
/// `h` at the base point and at every stencil point, with the minimizing
/// control held fixed. A non-finite network output makes the total NaN.
pub fn loss(net: &CbfNetwork, set: &TrainingSet, batch: &[usize], hyper: &CbfHyper) -> Result<(f64, LossComponents, NetGrads)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let arm = &set.arm;
    let (lo, hi) = (arm.action_lower(), arm.action_upper());
    let [w1, w2, w3] = hyper.loss_weights;
    let n_safe = batch.iter().filter(|&&i| set.items[i].label == SafetyLabel::Safe).count();
    let n_unsafe = batch.iter().filter(|&&i| set.items[i].label == SafetyLabel::Unsafe).count();
    let c1 = if n_safe > 0 { w1 / n_safe as f64 } else { 0.0 };
    let c2 = if n_unsafe > 0 { w2 / n_unsafe as f64 } else { 0.0 };
    let c3 = w3 / batch.len() as f64;

    // Running means of the hinges per term; exact when every sample
    // contributes the same value.
    let mut means = [0.0; 3];
    let mut counts = [0usize; 3];
    let mut push = |term: usize, x: f64| {
        counts[term] += 1;
        means[term] += (x - means[term]) / counts[term] as f64;
    };
    let mut finite = true;
    let mut grads = net.zero_grads();
    for &i in batch {
        let item = &set.items[i];
        let base_obs = set.obs(item.base);
        let (h, tape) = net.forward(&item.q, base_obs, arm)?;
        let mut stencil = Vec::with_capacity(item.stencil.len());
        for (k, slot) in item.stencil.iter().enumerate() {
            stencil.push(net.forward(&item.q.perturbed(k, hyper.fd_step), set.obs(*slot), arm)?);
        }
        let stencil_h: Vec<f64> = stencil.iter().map(|(v, _)| *v).collect();
        if !h.is_finite() || stencil_h.iter().any(|v| !v.is_finite()) {
            // Hinges would silently read NaN as satisfied.
            finite = false;
            continue;
        }

        let mut upstream = 0.0;
        match item.label {
            SafetyLabel::Safe => {
                push(0, (hyper.gamma + h).max(0.0));
                if hyper.gamma + h > 0.0 {
                    upstream += c1;
                }
            }
            SafetyLabel::Unsafe => {
                push(1, (hyper.gamma - h).max(0.0));
                if hyper.gamma - h > 0.0 {
                    upstream -= c2;
                }
            }
            SafetyLabel::Boundary => {}
        }
        let (r, u) = derivative_residual(h, &stencil_h, hyper, &lo, &hi);
        push(2, r.max(0.0));
        if r > 0.0 {
            let inv = 1.0 / hyper.fd_step;
            upstream += c3 * (hyper.alpha_h - inv * u.iter().sum::<f64>());
            for (k, (_, st_tape)) in stencil.iter().enumerate() {
                let up = c3 * u[k] * inv;
                if up != 0.0 {
                    net.backward_into(st_tape, set.obs(item.stencil[k]), arm, up, &mut grads)?;
                }
            }
        }
        if upstream != 0.0 {
            net.backward_into(&tape, base_obs, arm, upstream, &mut grads)?;
        }
    }
    let comps = LossComponents { safe: w1 * means[0], unsafe_: w2 * means[1], derivative: w3 * means[2] };
    let total = if finite { comps.total() } else { f64::NAN };
    Ok((total, comps, grads))
}

/// Fractions of samples meeting each margined barrier condition. A class
/// with no samples has rate 1 (nothing violates it); the counts make the
/// vacuous case visible.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub safe_rate: f64,
    pub unsafe_rate: f64,
    pub deriv_rate: f64,
    pub n_safe: usize,
    pub n_unsafe: usize,
    pub n_total: usize,
    pub safe_ok: usize,
    pub unsafe_ok: usize,
    pub deriv_ok: usize,
}

impl ConstraintReport {
    pub fn min_rate(&self) -> f64 {
        self.safe_rate.min(self.unsafe_rate).min(self.deriv_rate)
    }
}

fn rate(ok: usize, n: usize) -> f64 {
    if n == 0 {
        1.0
    } else {
        ok as f64 / n as f64
    }
}

/// Audits `h ≤ -γ` on Safe, `h > γ` on Unsafe and the derivative condition
/// on every item listed in `indices`.
pub fn evaluate_constraints(net: &CbfNetwork, set: &TrainingSet, indices: &[usize], hyper: &CbfHyper) -> Result<ConstraintReport> {
    let arm = &set.arm;
    let (lo, hi) = (arm.action_lower(), arm.action_upper());
    let mut rep = ConstraintReport { n_total: indices.len(), ..Default::default() };
    for &i in indices {
        let item = &set.items[i];
        let h = net.eval(&item.q, set.obs(item.base), arm)?;
        match item.label {
            SafetyLabel::Safe => {
                rep.n_safe += 1;
                rep.safe_ok += (h <= -hyper.gamma) as usize;
            }
            SafetyLabel::Unsafe => {
                rep.n_unsafe += 1;
                rep.unsafe_ok += (h > hyper.gamma) as usize;
            }
            SafetyLabel::Boundary => {}
        }
        let stencil_h = item
            .stencil
            .iter()
            .enumerate()
            .map(|(k, slot)| net.eval(&item.q.perturbed(k, hyper.fd_step), set.obs(*slot), arm))
            .collect::<Result<Vec<_>>>()?;
        rep.deriv_ok += (derivative_residual(h, &stencil_h, hyper, &lo, &hi).0 <= 0.0) as usize;
    }
    rep.safe_rate = rate(rep.safe_ok, rep.n_safe);
    rep.unsafe_rate = rate(rep.unsafe_ok, rep.n_unsafe);
    rep.deriv_rate = rate(rep.deriv_ok, rep.n_total);
    Ok(rep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine-annealed learning rate at the last epoch; `None` keeps `lr`.
    pub lr_final: Option<f64>,
    pub validation_fraction: f64,
    /// Record wall-clock seconds in the report. Off gives reproducible
    /// report files.
    pub timing: bool,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self { epochs: 10, batch_size: 128, lr: 2e-3, lr_final: Some(1e-4), validation_fraction: 0.1, timing: true }
    }
}

impl TrainSchedule {
    fn lr_at(&self, epoch: usize) -> f64 {
        match self.lr_final {
            Some(end) if self.epochs > 1 => {
                let t = epoch as f64 / (self.epochs - 1) as f64;
                end + 0.5 * (self.lr - end) * (1.0 + (std::f64::consts::PI * t).cos())
            }
            _ => self.lr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Batch-size-weighted means over the epoch.
    pub loss: LossComponents,
    pub validation: ConstraintReport,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub train_size: usize,
    pub validation_size: usize,
    pub epochs: Vec<EpochStats>,
    pub wall_clock_s: f64,
}

impl TrainReport {
    pub fn final_validation(&self) -> Option<&ConstraintReport> {
        self.epochs.last().map(|e| &e.validation)
    }
}

/// Deterministic train/validation split: a seeded shuffle, with the last
/// `validation_fraction` of the permutation held out.
pub fn split_indices(n: usize, validation_fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let n_val = ((n as f64) * validation_fraction).round() as usize;
    let val = idx.split_off(n - n_val.min(n));
    (idx, val)
}

/// Mini-batch Adam on [`loss`]. Reductions are sequential, so a fixed rng
/// state gives bit-identical parameters.
pub fn train(
    set: &TrainingSet,
    net_init: CbfNetwork,
    hyper: &CbfHyper,
    schedule: &TrainSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(CbfNetwork, TrainReport)> {
    hyper.validate()?;
    if schedule.batch_size == 0 || !(0.0..1.0).contains(&schedule.validation_fraction) {
        return Err(Error::InvalidConfig("batch_size must be positive and validation_fraction in [0, 1)".into()));
    }
    let started = Instant::now();
    let mut net = net_init;
    let (mut train_idx, val_idx) = split_indices(set.len(), schedule.validation_fraction, rng);
    let mut report = TrainReport { train_size: train_idx.len(), validation_size: val_idx.len(), ..Default::default() };
    if schedule.epochs > 0 && train_idx.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut states: Vec<AdamState> = net.blocks().iter().map(|b| AdamState::new(b.len())).collect();

    for epoch in 0..schedule.epochs {
        let adam = AdamConfig { lr: schedule.lr_at(epoch), ..AdamConfig::default() };
        train_idx.shuffle(rng);
        let mut sum = LossComponents::default();
        for batch in train_idx.chunks(schedule.batch_size) {
            let (total, comps, grads) = loss(&net, set, batch, hyper)?;
            if !total.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                report.wall_clock_s = if schedule.timing { started.elapsed().as_secs_f64() } else { 0.0 };
                return Err(Error::Diverged { epoch, report: Box::new(report) });
            }
            let w = batch.len() as f64 / train_idx.len() as f64;
            sum.safe += w * comps.safe;
            sum.unsafe_ += w * comps.unsafe_;
            sum.derivative += w * comps.derivative;
            for ((params, g), state) in net.blocks_mut().into_iter().zip(&grads).zip(&mut states) {
                adam_step(params, g, state, &adam)?;
            }
        }
        let validation = evaluate_constraints(&net, set, &val_idx, hyper)?;
        report.epochs.push(EpochStats { epoch, lr: adam.lr, loss: sum, validation });
    }
    report.wall_clock_s = if schedule.timing { started.elapsed().as_secs_f64() } else { 0.0 };
    Ok((net, report))
}
