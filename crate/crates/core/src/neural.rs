//! Small dense networks with hand-written reverse mode.
//!
//! Parameters of an [`Mlp`] live in one flat vector. For each layer, in
//! order, the weight matrix is stored row-major (`out × in`, row `j` holds
//! the weights feeding output unit `j`), followed by the bias vector.
//! Hidden layers use `tanh`; the output layer is linear.

use nalgebra::DMatrix;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::environment::CloudObservation;
use crate::kinematics::{link_frames, ArmModel, JointConfig, Point};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    widths: Vec<usize>,
    params: Vec<f64>,
}

/// Forward values kept for the backward pass: the input followed by each
/// layer's (post-activation) output.
#[derive(Debug, Clone)]
pub struct MlpTape {
    activations: Vec<Vec<f64>>,
}

impl MlpTape {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("tape holds at least the input")
    }
}

/// `tanh` through a single `exp`, about twice as fast as the libm call and
/// within a few ulps of it in absolute terms.
#[inline]
fn tanh(x: f64) -> f64 {
    let e = (2.0 * x).exp();
    1.0 - 2.0 / (e + 1.0)
}

pub fn param_count(widths: &[usize]) -> usize {
    widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl Mlp {
    /// Network with every parameter zero.
    pub fn zeros(widths: &[usize]) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidConfig(format!("bad layer widths {widths:?}")));
        }
        Ok(Self { widths: widths.to_vec(), params: vec![0.0; param_count(widths)] })
    }

    pub fn from_params(widths: &[usize], params: Vec<f64>) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        if params.len() != net.params.len() {
            return Err(Error::DimensionMismatch { expected: net.params.len(), got: params.len() });
        }
        net.params = params;
        Ok(net)
    }

    /// Every entry of layer `l` drawn from `U(-s, s)`, `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn init(widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let mut net = Self::zeros(widths)?;
        let mut offset = 0;
        for w in widths.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for p in &mut net.params[offset..offset + fan_in * fan_out + fan_out] {
                *p = s * (2.0 * rng.gen::<f64>() - 1.0);
            }
            offset += fan_in * fan_out + fan_out;
        }
        Ok(net)
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// `(weights, bias)` of each layer.
    pub fn layers(&self) -> Vec<(&[f64], &[f64])> {
        let mut out = Vec::with_capacity(self.widths.len() - 1);
        let mut offset = 0;
        for w in self.widths.windows(2) {
            let nw = w[0] * w[1];
            out.push((&self.params[offset..offset + nw], &self.params[offset + nw..offset + nw + w[1]]));
            offset += nw + w[1];
        }
        out
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_width() {
            return Err(Error::DimensionMismatch { expected: self.input_width(), got: x.len() });
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("network input"));
        }
        Ok(())
    }

    fn forward_impl(&self, x: &[f64], mut keep: impl FnMut(Vec<f64>)) -> Vec<f64> {
        let last = self.widths.len() - 2;
        let mut offset = 0;
        let mut current = x.to_vec();
        for (l, w) in self.widths.windows(2).enumerate() {
            let (n_in, n_out) = (w[0], w[1]);
            let weights = &self.params[offset..offset + n_in * n_out];
            let bias = &self.params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            let mut next = bias.to_vec();
            for (j, out) in next.iter_mut().enumerate() {
                let row = &weights[j * n_in..(j + 1) * n_in];
                *out += row.iter().zip(&current).map(|(a, b)| a * b).sum::<f64>();
                if l != last {
                    *out = tanh(*out);
                }
            }
            offset += n_in * n_out + n_out;
            keep(std::mem::replace(&mut current, next));
        }
        current
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpTape)> {
        self.check_input(x)?;
        let mut activations = Vec::with_capacity(self.widths.len());
        let y = self.forward_impl(x, |a| activations.push(a));
        activations.push(y.clone());
        Ok((y, MlpTape { activations }))
    }

    /// Forward pass without recording a tape.
    pub fn eval(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x)?;
        Ok(self.forward_impl(x, |_| {}))
    }

    /// Accumulates `upstream · ∂y/∂θ` into `grads` (same layout as the
    /// parameters) and returns `upstream · ∂y/∂x`.
    pub fn backward_into(&self, tape: &MlpTape, upstream: &[f64], grads: &mut [f64]) -> Vec<f64> {
        debug_assert_eq!(grads.len(), self.params.len());
        debug_assert_eq!(upstream.len(), self.output_width());
        let n_layers = self.widths.len() - 1;
        let mut offsets = Vec::with_capacity(n_layers);
        let mut offset = 0;
        for w in self.widths.windows(2) {
            offsets.push(offset);
            offset += w[0] * w[1] + w[1];
        }
        let mut delta = upstream.to_vec();
        for l in (0..n_layers).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let input = &tape.activations[l];
            let weights = &self.params[off..off + n_in * n_out];
            let mut prev = vec![0.0; n_in];
            for j in 0..n_out {
                let dj = delta[j];
                if dj == 0.0 {
                    continue;
                }
                let gw = &mut grads[off + j * n_in..off + (j + 1) * n_in];
                for (g, a) in gw.iter_mut().zip(input) {
                    *g += dj * a;
                }
                grads[off + n_in * n_out + j] += dj;
                for (p, w) in prev.iter_mut().zip(&weights[j * n_in..(j + 1) * n_in]) {
                    *p += dj * w;
                }
            }
            if l > 0 {
                // Input of layer l is the tanh output of layer l - 1.
                for (p, a) in prev.iter_mut().zip(input) {
                    *p *= 1.0 - a * a;
                }
            }
            delta = prev;
        }
        delta
    }

    /// Parameter and input gradients of `upstream · y`.
    pub fn backward(&self, tape: &MlpTape, upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut grads = vec![0.0; self.params.len()];
        let input_grad = self.backward_into(tape, upstream, &mut grads);
        (grads, input_grad)
    }
}

/// Permutation-invariant scalar function of a configuration and a point
/// cloud. Every point is expressed in every link frame, tagged with the
/// link's one-hot index, and passed through a shared per-point MLP; a
/// coordinate-wise max over all `N · n` records gives a feature vector
/// which, concatenated with `q`, feeds the trunk MLP.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PointSetEncoder {
    pub point_mlp: Mlp,
    pub trunk: Mlp,
    pub num_links: usize,
    /// Link-frame point coordinates are divided by this length before
    /// entering the per-point MLP.
    #[serde(default = "unit_scale")]
    pub position_scale: f64,
}

fn unit_scale() -> f64 {
    1.0
}

#[derive(Debug, Clone)]
pub struct EncoderTape {
    q: Vec<f64>,
    /// Per feature: index `link * N + point` of the record that won the max.
    argmax: Vec<usize>,
    trunk_tape: MlpTape,
}

pub struct EncoderGrads {
    pub point_mlp: Vec<f64>,
    pub trunk: Vec<f64>,
    pub q: Vec<f64>,
}

impl PointSetEncoder {
    pub const POINT_FEATURES: usize = 4;

    pub fn point_input_width(num_links: usize) -> usize {
        Self::POINT_FEATURES + num_links
    }

    /// `point_hidden` excludes the input width (added automatically);
    /// `trunk_hidden` excludes the input and the scalar output.
    pub fn init(num_links: usize, point_hidden: &[usize], trunk_hidden: &[usize], rng: &mut impl Rng) -> Result<Self> {
        let (pw, tw) = Self::widths(num_links, point_hidden, trunk_hidden)?;
        Ok(Self { point_mlp: Mlp::init(&pw, rng)?, trunk: Mlp::init(&tw, rng)?, num_links, position_scale: 1.0 })
    }

    pub fn zeros(num_links: usize, point_hidden: &[usize], trunk_hidden: &[usize]) -> Result<Self> {
        let (pw, tw) = Self::widths(num_links, point_hidden, trunk_hidden)?;
        Ok(Self { point_mlp: Mlp::zeros(&pw)?, trunk: Mlp::zeros(&tw)?, num_links, position_scale: 1.0 })
    }

    fn widths(num_links: usize, point_hidden: &[usize], trunk_hidden: &[usize]) -> Result<(Vec<usize>, Vec<usize>)> {
        if point_hidden.is_empty() {
            return Err(Error::InvalidConfig("per-point MLP needs an output layer".into()));
        }
        let mut pw = vec![Self::point_input_width(num_links)];
        pw.extend_from_slice(point_hidden);
        let mut tw = vec![*point_hidden.last().unwrap() + num_links];
        tw.extend_from_slice(trunk_hidden);
        tw.push(1);
        Ok((pw, tw))
    }

    pub fn feature_width(&self) -> usize {
        self.point_mlp.output_width()
    }

    fn validate(&self) -> Result<()> {
        if self.point_mlp.input_width() != Self::point_input_width(self.num_links)
            || self.trunk.input_width() != self.feature_width() + self.num_links
            || self.trunk.output_width() != 1
            || !(self.position_scale > 0.0)
        {
            return Err(Error::InvalidConfig("inconsistent encoder widths".into()));
        }
        Ok(())
    }

    /// Per-point record inputs as rows, link-major: row `l * N + i` is
    /// point `i` in the frame of link `l`.
    fn records(&self, q: &JointConfig, cloud: &CloudObservation, arm: &ArmModel) -> Result<DMatrix<f64>> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if q.dim() != self.num_links {
            return Err(Error::DimensionMismatch { expected: self.num_links, got: q.dim() });
        }
        if cloud.points.iter().any(|p| !(p.position.iter().chain(p.normal.iter()).all(|v| v.is_finite()))) {
            return Err(Error::NonFinite("cloud point"));
        }
        let frames = link_frames(arm, q)?;
        let npts = cloud.len();
        let mut out = DMatrix::zeros(frames.len() * npts, Self::point_input_width(self.num_links));
        for (l, frame) in frames.iter().enumerate() {
            for (i, pt) in cloud.points.iter().enumerate() {
                let r = l * npts + i;
                let p = frame.to_local(&pt.position) / self.position_scale;
                let n = frame.rotate_to_local(&pt.normal);
                out[(r, 0)] = p.x;
                out[(r, 1)] = p.y;
                out[(r, 2)] = n.x;
                out[(r, 3)] = n.y;
                out[(r, 4 + l)] = 1.0;
            }
        }
        Ok(out)
    }

    /// Runs the per-point MLP on every row and max-pools each feature.
    /// Ties go to the first record.
    fn pool(&self, records: DMatrix<f64>) -> (Vec<f64>, Vec<usize>) {
        let rows = records.nrows();
        let layers = self.point_mlp.layers();
        let last = layers.len() - 1;
        // Row-major activations; each layer is a sum of scaled rows of `Wᵀ`,
        // which vectorizes where per-unit dot products would not.
        let mut width = records.ncols();
        let mut act: Vec<f64> = records.transpose().as_slice().to_vec();
        for (l, (w, b)) in layers.into_iter().enumerate() {
            let n_out = b.len();
            let mut wt = vec![0.0; w.len()];
            for j in 0..n_out {
                for k in 0..width {
                    wt[k * n_out + j] = w[j * width + k];
                }
            }
            let mut next = Vec::with_capacity(rows * n_out);
            for r in 0..rows {
                let start = next.len();
                next.extend_from_slice(b);
                let out = &mut next[start..];
                for (k, &xk) in act[r * width..(r + 1) * width].iter().enumerate() {
                    if xk != 0.0 {
                        for (o, wk) in out.iter_mut().zip(&wt[k * n_out..(k + 1) * n_out]) {
                            *o += xk * wk;
                        }
                    }
                }
                if l != last {
                    out.iter_mut().for_each(|v| *v = tanh(*v));
                }
            }
            act = next;
            width = n_out;
        }
        let mut pooled = vec![f64::NEG_INFINITY; width];
        let mut argmax = vec![0; width];
        for r in 0..rows {
            for (k, &v) in act[r * width..(r + 1) * width].iter().enumerate() {
                if v > pooled[k] {
                    pooled[k] = v;
                    argmax[k] = r;
                }
            }
        }
        (pooled, argmax)
    }

    pub fn forward(&self, q: &JointConfig, cloud: &CloudObservation, arm: &ArmModel) -> Result<(f64, EncoderTape)> {
        self.validate()?;
        let (mut trunk_in, argmax) = self.pool(self.records(q, cloud, arm)?);
        trunk_in.extend_from_slice(&q.angles);
        let (y, trunk_tape) = self.trunk.forward(&trunk_in)?;
        Ok((y[0], EncoderTape { q: q.angles.clone(), argmax, trunk_tape }))
    }

    pub fn eval(&self, q: &JointConfig, cloud: &CloudObservation, arm: &ArmModel) -> Result<f64> {
        self.validate()?;
        let (mut trunk_in, _) = self.pool(self.records(q, cloud, arm)?);
        trunk_in.extend_from_slice(&q.angles);
        Ok(self.trunk.eval(&trunk_in)?[0])
    }

    /// Accumulates `upstream · ∂h/∂θ` into the two gradient buffers and
    /// returns `upstream · ∂h/∂q`, including the path through the link
    /// frames. Only records that won at least one max coordinate receive
    /// gradient.
    pub fn backward_into(
        &self,
        tape: &EncoderTape,
        cloud: &CloudObservation,
        arm: &ArmModel,
        upstream: f64,
        point_grads: &mut [f64],
        trunk_grads: &mut [f64],
    ) -> Result<Vec<f64>> {
        let n = self.num_links;
        let fw = self.feature_width();
        let trunk_in_grad = self.trunk.backward_into(&tape.trunk_tape, &[upstream], trunk_grads);
        let mut dq = trunk_in_grad[fw..].to_vec();

        let q = JointConfig::new(tape.q.clone());
        let frames = link_frames(arm, &q)?;
        let npts = cloud.len();
        let mut winners: Vec<usize> = tape.argmax.clone();
        winners.sort_unstable();
        winners.dedup();
        // ∂L/∂θ_l for absolute link headings.
        let mut dtheta = vec![0.0; n];
        for &r in &winners {
            let mut feat_up = vec![0.0; fw];
            for k in 0..fw {
                if tape.argmax[k] == r {
                    feat_up[k] = trunk_in_grad[k];
                }
            }
            let (l, i) = (r / npts, r % npts);
            let frame = &frames[l];
            let pt = &cloud.points[i];
            let lp = frame.to_local(&pt.position);
            let ln = frame.rotate_to_local(&pt.normal);
            let mut x = vec![0.0; Self::point_input_width(n)];
            x[..4].copy_from_slice(&[lp.x / self.position_scale, lp.y / self.position_scale, ln.x, ln.y]);
            x[4 + l] = 1.0;
            let (_, rec_tape) = self.point_mlp.forward(&x)?;
            let gx = self.point_mlp.backward_into(&rec_tape, &feat_up, point_grads);
            // Gradient with respect to the unscaled local position.
            let gp = Point::new(gx[0], gx[1]) / self.position_scale;
            let gn = Point::new(gx[2], gx[3]);
            // d(local)/dθ rotates the local vector by -90°.
            dtheta[l] += gp.dot(&Point::new(lp.y, -lp.x)) + gn.dot(&Point::new(ln.y, -ln.x));
            // d(local p)/d(origin) = -R(-θ), so ∂L/∂origin = -R(θ) gp.
            let (s, c) = frame.angle.sin_cos();
            let dorigin = -Point::new(c * gp.x - s * gp.y, s * gp.x + c * gp.y);
            for k in 0..l {
                let tk = frames[k].angle;
                dtheta[k] += arm.link_lengths[k] * dorigin.dot(&Point::new(-tk.sin(), tk.cos()));
            }
        }
        // θ_k = Σ_{j ≤ k} q_j.
        let mut acc = 0.0;
        for j in (0..n).rev() {
            acc += dtheta[j];
            dq[j] += acc;
        }
        Ok(dq)
    }

    pub fn backward(&self, tape: &EncoderTape, cloud: &CloudObservation, arm: &ArmModel, upstream: f64) -> Result<EncoderGrads> {
        let mut point_mlp = vec![0.0; self.point_mlp.params().len()];
        let mut trunk = vec![0.0; self.trunk.params().len()];
        let q = self.backward_into(tape, cloud, arm, upstream, &mut point_mlp, &mut trunk)?;
        Ok(EncoderGrads { point_mlp, trunk, q })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// One bias-corrected Adam update in place.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(Error::DimensionMismatch { expected: params.len(), got: grads.len() });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::InvalidConfig(format!("non-finite gradient at parameter {i}: {}", grads[i])));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..params.len() {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grads[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::environment::{CloudPoint, CloudSource};
    use crate::rng::stream;
    use nalgebra::{DMatrix, DVector};

    /// Relative error with a small floor so near-zero gradients compare absolutely.
    pub(crate) fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
    }

    /// Straightforward forward pass through explicit matrices.
    fn reference_forward(net: &Mlp, x: &[f64]) -> Vec<f64> {
        let w = net.widths();
        let mut a = DVector::from_column_slice(x);
        let layers = net.layers();
        for (l, (weights, bias)) in layers.iter().enumerate() {
            let m = DMatrix::from_row_slice(w[l + 1], w[l], weights);
            let z = m * a + DVector::from_column_slice(bias);
            a = if l + 1 < layers.len() { z.map(f64::tanh) } else { z };
        }
        a.iter().copied().collect()
    }

    fn random_input(rng: &mut impl Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| 2.0 * rng.gen::<f64>() - 1.0).collect()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = Mlp::zeros(&[4, 8, 8, 1]).unwrap();
        assert_eq!(net.eval(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0]);
        assert_eq!(net.params().len(), 4 * 8 + 8 + 8 * 8 + 8 + 8 + 1);
    }

    #[test]
    fn single_linear_layer() {
        let w = vec![1.0, 2.0, -1.0, 0.5, 0.0, 3.0];
        let b = vec![0.25, -1.0];
        let mut params = w.clone();
        params.extend(&b);
        let net = Mlp::from_params(&[3, 2], params).unwrap();
        let x = [0.3, -0.7, 2.0];
        let (y, tape) = net.forward(&x).unwrap();
        assert_eq!(y[0], 1.0 * 0.3 + 2.0 * -0.7 + -1.0 * 2.0 + 0.25);
        assert_eq!(y[1], 0.5 * 0.3 + 0.0 * -0.7 + 3.0 * 2.0 - 1.0);
        // Input gradient of e_j · y is row j of W.
        for j in 0..2 {
            let mut up = [0.0; 2];
            up[j] = 1.0;
            let (_, gx) = net.backward(&tape, &up);
            assert_eq!(gx, w[j * 3..(j + 1) * 3].to_vec());
        }
    }

    #[test]
    fn forward_matches_reference_implementation() {
        let mut rng = stream(1, "mlp");
        for _ in 0..20 {
            let net = Mlp::init(&[5, 16, 12, 3], &mut rng).unwrap();
            let x = random_input(&mut rng, 5);
            let y = net.eval(&x).unwrap();
            for (a, b) in y.iter().zip(reference_forward(&net, &x)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let net = Mlp::zeros(&[2, 3, 1]).unwrap();
        assert!(matches!(net.eval(&[f64::NAN, 0.0]), Err(Error::NonFinite(_))));
        assert!(matches!(net.eval(&[0.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = stream(2, "mlp");
        let net = Mlp::init(&[3, 8, 1], &mut rng).unwrap();
        let (_, tape) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (g, gx) = net.backward(&tape, &[0.0]);
        assert!(g.iter().chain(&gx).all(|v| *v == 0.0));
    }

    /// Max relative error between reverse mode and central differences
    /// (step 1e-5) over parameters and inputs.
    pub(crate) fn mlp_gradient_error(net: &Mlp, x: &[f64]) -> f64 {
        let (_, tape) = net.forward(x).unwrap();
        let (g, gx) = net.backward(&tape, &[1.0]);
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..net.params().len() {
            let mut plus = net.clone();
            plus.params_mut()[i] += h;
            let mut minus = net.clone();
            minus.params_mut()[i] -= h;
            let fd = (plus.eval(x).unwrap()[0] - minus.eval(x).unwrap()[0]) / (2.0 * h);
            worst = worst.max(rel_err(fd, g[i]));
        }
        for i in 0..x.len() {
            let mut xp = x.to_vec();
            xp[i] += h;
            let mut xm = x.to_vec();
            xm[i] -= h;
            let fd = (net.eval(&xp).unwrap()[0] - net.eval(&xm).unwrap()[0]) / (2.0 * h);
            worst = worst.max(rel_err(fd, gx[i]));
        }
        worst
    }

    #[test]
    fn mlp_gradients_match_finite_differences() {
        let mut rng = stream(3, "mlp");
        for k in 0..20 {
            let widths = [4, 6 + k % 5, 7, 1];
            let net = Mlp::init(&widths, &mut rng).unwrap();
            let x = random_input(&mut rng, 4);
            let err = mlp_gradient_error(&net, &x);
            assert!(err < 1e-4, "net {k}: {err}");
        }
    }

    fn random_cloud(rng: &mut impl Rng, n: usize) -> CloudObservation {
        let points = (0..n)
            .map(|_| {
                let a = rng.gen::<f64>() * std::f64::consts::TAU;
                CloudPoint {
                    position: Point::new(2.0 * rng.gen::<f64>() - 1.0, 2.0 * rng.gen::<f64>() - 1.0),
                    normal: Point::new(a.cos(), a.sin()),
                    sentinel: false,
                }
            })
            .collect();
        CloudObservation { points, source: CloudSource::SurfaceSampled }
    }

    fn small_encoder(rng: &mut impl Rng) -> PointSetEncoder {
        let mut enc = PointSetEncoder::init(3, &[8, 6], &[8], rng).unwrap();
        enc.position_scale = 0.5;
        enc
    }

    #[test]
    fn encoder_is_permutation_invariant_exhaustively() {
        let mut rng = stream(4, "enc");
        let arm = ArmModel::default();
        let enc = small_encoder(&mut rng);
        let q = JointConfig::new(vec![0.3, -0.5, 1.1]);
        let cloud = random_cloud(&mut rng, 7);
        let base = enc.eval(&q, &cloud, &arm).unwrap();
        let mut idx: Vec<usize> = (0..7).collect();
        // Heap's algorithm over all 5040 orderings.
        let mut c = vec![0usize; 7];
        let mut i = 0;
        let mut count = 1;
        while i < 7 {
            if c[i] < i {
                if i % 2 == 0 { idx.swap(0, i) } else { idx.swap(c[i], i) }
                let permuted = CloudObservation { points: idx.iter().map(|&j| cloud.points[j]).collect(), source: cloud.source };
                assert_eq!(enc.eval(&q, &permuted, &arm).unwrap().to_bits(), base.to_bits());
                count += 1;
                c[i] += 1;
                i = 0;
            } else {
                c[i] = 0;
                i += 1;
            }
        }
        assert_eq!(count, 5040);
    }

    #[test]
    fn encoder_sampled_permutations_and_duplicates() {
        use rand::seq::SliceRandom;
        let mut rng = stream(5, "enc");
        let arm = ArmModel::default();
        let enc = small_encoder(&mut rng);
        let q = JointConfig::new(vec![-0.3, 0.8, 0.2]);
        let cloud = random_cloud(&mut rng, 64);
        let base = enc.eval(&q, &cloud, &arm).unwrap();
        for _ in 0..50 {
            let mut pts = cloud.points.clone();
            pts.shuffle(&mut rng);
            let shuffled = CloudObservation { points: pts, source: cloud.source };
            assert_eq!(enc.eval(&q, &shuffled, &arm).unwrap().to_bits(), base.to_bits());
        }
        let mut doubled = cloud.clone();
        doubled.points.extend(cloud.points.iter().copied());
        assert_eq!(enc.eval(&q, &doubled, &arm).unwrap(), base);
        let empty = CloudObservation { points: vec![], source: cloud.source };
        assert!(matches!(enc.eval(&q, &empty, &arm), Err(Error::EmptyCloud)));
    }

    #[test]
    fn encoder_is_invariant_to_joint_world_translation() {
        let mut rng = stream(6, "enc");
        let arm = ArmModel::default();
        let enc = small_encoder(&mut rng);
        let q = JointConfig::new(vec![0.4, 0.1, -0.9]);
        let cloud = random_cloud(&mut rng, 20);
        let shift = Point::new(0.7, -1.3);
        let mut moved_arm = arm.clone();
        moved_arm.base_position += shift;
        let mut moved = cloud.clone();
        for p in &mut moved.points {
            p.position += shift;
        }
        let a = enc.eval(&q, &cloud, &arm).unwrap();
        let b = enc.eval(&q, &moved, &moved_arm).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn encoder_gradients_match_finite_differences() {
        let mut rng = stream(7, "enc");
        let arm = ArmModel::default();
        let h = 1e-5;
        for _ in 0..5 {
            let enc = small_encoder(&mut rng);
            let q = JointConfig::new(random_input(&mut rng, 3));
            let cloud = random_cloud(&mut rng, 12);
            let (_, tape) = enc.forward(&q, &cloud, &arm).unwrap();
            let grads = enc.backward(&tape, &cloud, &arm, 1.0).unwrap();
            for i in 0..enc.point_mlp.params().len() {
                let mut p = enc.clone();
                p.point_mlp.params_mut()[i] += h;
                let mut m = enc.clone();
                m.point_mlp.params_mut()[i] -= h;
                let fd = (p.eval(&q, &cloud, &arm).unwrap() - m.eval(&q, &cloud, &arm).unwrap()) / (2.0 * h);
                assert!(rel_err(fd, grads.point_mlp[i]) < 1e-4, "point param {i}: {fd} vs {}", grads.point_mlp[i]);
            }
            for i in 0..enc.trunk.params().len() {
                let mut p = enc.clone();
                p.trunk.params_mut()[i] += h;
                let mut m = enc.clone();
                m.trunk.params_mut()[i] -= h;
                let fd = (p.eval(&q, &cloud, &arm).unwrap() - m.eval(&q, &cloud, &arm).unwrap()) / (2.0 * h);
                assert!(rel_err(fd, grads.trunk[i]) < 1e-4);
            }
            for j in 0..3 {
                let fd = (enc.eval(&q.perturbed(j, h), &cloud, &arm).unwrap()
                    - enc.eval(&q.perturbed(j, -h), &cloud, &arm).unwrap())
                    / (2.0 * h);
                assert!(rel_err(fd, grads.q[j]) < 1e-4, "q{j}: {fd} vs {}", grads.q[j]);
            }
        }
    }

    #[test]
    fn adam_zero_gradient_and_descent() {
        let cfg = AdamConfig { lr: 0.1, ..Default::default() };
        let mut w = vec![1.0, -2.0];
        let mut st = AdamState::new(2);
        adam_step(&mut w, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert_eq!(w, vec![1.0, -2.0]);

        let mut st = AdamState { m: vec![0.5, 0.5], v: vec![0.2, 0.2], step: 3 };
        let mut w2 = w.clone();
        adam_step(&mut w2, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert!((st.m[0] - 0.45).abs() < 1e-15 && (st.v[0] - 0.2 * 0.999).abs() < 1e-15);

        // f(w) = w²
        let mut w = vec![1.0];
        let mut st = AdamState::new(1);
        adam_step(&mut w, &[2.0], &mut st, &cfg).unwrap();
        assert!(w[0] < 1.0);

        assert!(adam_step(&mut w, &[f64::NAN], &mut st, &cfg).is_err());
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // f(w) = Σ c_i (w_i - t_i)²
        let target = [0.3, -1.2, 2.0];
        let scale = [1.0, 10.0, 0.1];
        let mut w = vec![0.0; 3];
        let mut st = AdamState::new(3);
        let cfg = AdamConfig { lr: 0.01, ..Default::default() };
        for _ in 0..20_000 {
            let g: Vec<f64> = (0..3).map(|i| 2.0 * scale[i] * (w[i] - target[i])).collect();
            adam_step(&mut w, &g, &mut st, &cfg).unwrap();
        }
        for i in 0..3 {
            assert!((w[i] - target[i]).abs() < 1e-3, "{w:?}");
        }
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let widths = [10, 100, 100, 1];
        let a = Mlp::init(&widths, &mut stream(8, "init")).unwrap();
        let b = Mlp::init(&widths, &mut stream(8, "init")).unwrap();
        assert_eq!(a, b);
        let mut all = Vec::new();
        for (l, (w, bias)) in a.layers().iter().enumerate() {
            let s = (6.0 / (widths[l] + widths[l + 1]) as f64).sqrt();
            assert!(w.iter().chain(bias.iter()).all(|v| v.abs() <= s));
            all.extend(w.iter().map(|v| v / s));
        }
        // Normalized entries are U(-1, 1): σ = 1/√3.
        let n = all.len() as f64;
        let mean = all.iter().sum::<f64>() / n;
        assert!(n >= 1e4);
        assert!(mean.abs() < 3.0 / (3f64.sqrt() * n.sqrt()));
    }
}
