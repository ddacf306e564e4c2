//! Flow-matching local planner.
//!
//! A small MLP vector field `v(x_t, t | c)` over flattened action
//! trajectories, trained with the conditional flow-matching objective and an
//! optional masked-ESDF reward on the reconstructed trajectory.
//!
//! Time runs from data at `t = 0` to noise at `t = 1`:
//! `x_t = (1 - t)·x1 + t·x0`, target field `u = x0 - x1`, and the one-shot
//! reconstruction `x̃ = x_t - t·v` recovers `x1` when `v = u`.
//!
//! The network works in normalized units: actions are divided component-wise
//! by the model's `action_scale` before entering the flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::esdf::{edt, BinaryMap2D, EsdfMap, Grid2, Target};
use crate::geom::{actions_to_poses, Action, ActionTrajectory, Pose2, PoseTrajectory};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("grid geometry mismatch within batch")]
    GeometryMismatch,
    #[error("sample {0} has no distance field but the ESDF weight is non-zero")]
    MissingField(usize),
    #[error("empty dataset or batch")]
    Empty,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("training diverged at epoch {epoch}")]
    Diverged {
        epoch: usize,
        checkpoint: Box<VectorFieldModel>,
        log: Vec<EpochLog>,
    },
    #[error("model file: {0}")]
    Format(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanningCondition {
    /// Local goal in the ego frame.
    pub goal: Pose2,
    /// `(linear m/s, angular rad/s)`.
    pub velocity: [f64; 2],
    pub occ_features: Vec<f64>,
}

impl PlanningCondition {
    pub fn is_finite(&self) -> bool {
        self.goal.is_finite() && self.velocity.iter().chain(&self.occ_features).all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    fn deriv_from_output(self, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Identity => 1.0,
        }
    }
}

/// Fully connected network with a linear output layer. Weights of layer `l`
/// are stored row-major `(out × in)`, followed by the biases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub params: Vec<f64>,
}

impl Mlp {
    pub fn param_count_for(sizes: &[usize]) -> usize {
        sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    pub fn zeros(sizes: Vec<usize>, activation: Activation) -> Self {
        let n = Self::param_count_for(&sizes);
        Self {
            sizes,
            activation,
            params: vec![0.0; n],
        }
    }

    /// Gaussian init with variance `1 / fan_in`; biases zero.
    pub fn random(sizes: Vec<usize>, activation: Activation, rng: &mut impl Rng) -> Self {
        let mut m = Self::zeros(sizes, activation);
        let mut off = 0;
        for l in 0..m.sizes.len() - 1 {
            let (fan_in, fan_out) = (m.sizes[l], m.sizes[l + 1]);
            let std = (1.0 / fan_in as f64).sqrt();
            for p in &mut m.params[off..off + fan_in * fan_out] {
                let z: f64 = StandardNormal.sample(rng);
                *p = z * std;
            }
            off += fan_in * fan_out + fan_out;
        }
        m
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("at least one layer")
    }

    fn layers(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let mut off = 0;
        self.sizes.windows(2).map(move |w| {
            let o = off;
            off += w[0] * w[1] + w[1];
            (o, w[0], w[1])
        })
    }

    /// Forward pass keeping every layer's output; `acts[0]` is the input.
    fn forward_cache(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let n_layers = self.sizes.len() - 1;
        let mut acts = Vec::with_capacity(n_layers + 1);
        acts.push(input.to_vec());
        for (l, (off, nin, nout)) in self.layers().enumerate() {
            let a = &acts[l];
            let w = &self.params[off..off + nin * nout];
            let b = &self.params[off + nin * nout..off + nin * nout + nout];
            let last = l + 1 == n_layers;
            let out: Vec<f64> = (0..nout)
                .map(|r| {
                    let row = &w[r * nin..(r + 1) * nin];
                    let z = b[r] + row.iter().zip(a).map(|(x, y)| x * y).sum::<f64>();
                    if last {
                        z
                    } else {
                        self.activation.apply(z)
                    }
                })
                .collect();
            acts.push(out);
        }
        acts
    }

    pub fn forward(&self, input: &[f64]) -> Vec<f64> {
        self.forward_cache(input).pop().expect("output layer")
    }

    /// Accumulate `∂L/∂θ` into `grad` given `∂L/∂output`.
    fn backward(&self, acts: &[Vec<f64>], grad_out: &[f64], grad: &mut [f64]) {
        let layers: Vec<_> = self.layers().collect();
        let mut delta = grad_out.to_vec();
        for l in (0..layers.len()).rev() {
            let (off, nin, nout) = layers[l];
            let a = &acts[l];
            for r in 0..nout {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                let g = &mut grad[off + r * nin..off + (r + 1) * nin];
                for (gi, ai) in g.iter_mut().zip(a) {
                    *gi += d * ai;
                }
                grad[off + nin * nout + r] += d;
            }
            if l == 0 {
                break;
            }
            let w = &self.params[off..off + nin * nout];
            let mut prev = vec![0.0; nin];
            for r in 0..nout {
                let d = delta[r];
                if d == 0.0 {
                    continue;
                }
                for (p, wi) in prev.iter_mut().zip(&w[r * nin..(r + 1) * nin]) {
                    *p += d * wi;
                }
            }
            for (p, ai) in prev.iter_mut().zip(a) {
                *p *= self.activation.deriv_from_output(*ai);
            }
            delta = prev;
        }
    }
}

pub const GOAL_DIM: usize = 3;
pub const VELOCITY_DIM: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorFieldModel {
    pub n_actions: usize,
    pub cond_dim: usize,
    pub action_scale: [f64; 3],
    pub mlp: Mlp,
}

/// Anything that can act as the flow's vector field.
pub trait VectorField {
    fn n_actions(&self) -> usize;
    /// Field value in normalized units.
    fn eval(&self, x_t: &[f64], t: f64, c: &PlanningCondition) -> Vec<f64>;
    /// Per-component scale from normalized flow space to actions.
    fn action_scale(&self) -> [f64; 3] {
        [1.0; 3]
    }
}

impl VectorFieldModel {
    pub fn input_dim(n_actions: usize, cond_dim: usize) -> usize {
        3 * n_actions + 1 + GOAL_DIM + VELOCITY_DIM + cond_dim
    }

    pub fn new(n_actions: usize, cond_dim: usize, hidden: &[usize], activation: Activation, seed: u64) -> Self {
        let mut sizes = vec![Self::input_dim(n_actions, cond_dim)];
        sizes.extend_from_slice(hidden);
        sizes.push(3 * n_actions);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            n_actions,
            cond_dim,
            action_scale: [1.0; 3],
            mlp: Mlp::random(sizes, activation, &mut rng),
        }
    }

    pub fn param_count(&self) -> usize {
        self.mlp.param_count()
    }

    fn input(&self, x_t: &[f64], t: f64, c: &PlanningCondition) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.mlp.input_dim());
        v.extend_from_slice(x_t);
        v.push(t);
        v.extend_from_slice(&[c.goal.x, c.goal.y, c.goal.theta]);
        v.extend_from_slice(&c.velocity);
        v.extend_from_slice(&c.occ_features);
        v
    }

    fn check(&self, x_t: &[f64], c: &PlanningCondition) -> Result<(), PlannerError> {
        if x_t.len() != 3 * self.n_actions {
            return Err(PlannerError::ShapeMismatch(format!(
                "x_t has {} values, model expects {}",
                x_t.len(),
                3 * self.n_actions
            )));
        }
        if c.occ_features.len() != self.cond_dim {
            return Err(PlannerError::ShapeMismatch(format!(
                "occ_features has {} values, model expects {}",
                c.occ_features.len(),
                self.cond_dim
            )));
        }
        Ok(())
    }

    /// Checked forward pass.
    pub fn vf_eval(&self, x_t: &[f64], t: f64, c: &PlanningCondition) -> Result<Vec<f64>, PlannerError> {
        self.check(x_t, c)?;
        Ok(self.mlp.forward(&self.input(x_t, t, c)))
    }

    /// Actions to normalized flow space.
    pub fn normalize(&self, a: &ActionTrajectory) -> Vec<f64> {
        let mut v = a.flatten();
        for (i, x) in v.iter_mut().enumerate() {
            *x /= self.action_scale[i % 3];
        }
        v
    }

    pub fn denormalize(&self, x: &[f64]) -> ActionTrajectory {
        denormalize(x, self.action_scale)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&ModelFile::from(self)).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, PlannerError> {
        let f: ModelFile = serde_json::from_str(text).map_err(|e| PlannerError::Format(e.to_string()))?;
        f.try_into()
    }
}

impl VectorField for VectorFieldModel {
    fn n_actions(&self) -> usize {
        self.n_actions
    }

    fn eval(&self, x_t: &[f64], t: f64, c: &PlanningCondition) -> Vec<f64> {
        self.mlp.forward(&self.input(x_t, t, c))
    }

    fn action_scale(&self) -> [f64; 3] {
        self.action_scale
    }
}

fn denormalize(x: &[f64], scale: [f64; 3]) -> ActionTrajectory {
    let v: Vec<f64> = x.iter().enumerate().map(|(i, v)| v * scale[i % 3]).collect();
    ActionTrajectory::from_flat(&v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelHeader {
    pub n_actions: usize,
    pub cond_dim: usize,
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub action_scale: [f64; 3],
    pub param_count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub header: ModelHeader,
    pub weights: Vec<f64>,
}

impl From<&VectorFieldModel> for ModelFile {
    fn from(m: &VectorFieldModel) -> Self {
        Self {
            header: ModelHeader {
                n_actions: m.n_actions,
                cond_dim: m.cond_dim,
                layer_sizes: m.mlp.sizes.clone(),
                activation: m.mlp.activation,
                action_scale: m.action_scale,
                param_count: m.param_count(),
            },
            weights: m.mlp.params.clone(),
        }
    }
}

impl TryFrom<ModelFile> for VectorFieldModel {
    type Error = PlannerError;

    fn try_from(f: ModelFile) -> Result<Self, PlannerError> {
        let h = f.header;
        if h.layer_sizes.len() < 2 {
            return Err(PlannerError::Format("need at least input and output layer".into()));
        }
        if h.layer_sizes[0] != VectorFieldModel::input_dim(h.n_actions, h.cond_dim)
            || *h.layer_sizes.last().expect("non-empty") != 3 * h.n_actions
        {
            return Err(PlannerError::Format(
                "layer sizes disagree with n_actions/cond_dim".into(),
            ));
        }
        let expect = Mlp::param_count_for(&h.layer_sizes);
        if f.weights.len() != expect || h.param_count != expect {
            return Err(PlannerError::Format(format!(
                "expected {expect} weights, found {}",
                f.weights.len()
            )));
        }
        if f.weights.iter().any(|w| !w.is_finite()) {
            return Err(PlannerError::Format("non-finite weight".into()));
        }
        Ok(Self {
            n_actions: h.n_actions,
            cond_dim: h.cond_dim,
            action_scale: h.action_scale,
            mlp: Mlp {
                sizes: h.layer_sizes,
                activation: h.activation,
                params: f.weights,
            },
        })
    }
}

/// `x̃ = x_t - t·v`.
pub fn reconstruct(x_t: &[f64], t: f64, v: &[f64]) -> Vec<f64> {
    x_t.iter().zip(v).map(|(x, v)| x - t * v).collect()
}

/// One training example in the robot's ego frame.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSample {
    pub actions: ActionTrajectory,
    pub cond: PlanningCondition,
    pub start: Pose2,
    /// Masked distance field sampled by the penalty.
    pub field: Option<EsdfMap>,
}

/// Frozen randomness for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseDraw {
    pub t: f64,
    pub x0: Vec<f64>,
}

impl NoiseDraw {
    pub fn draw(dim: usize, rng: &mut impl Rng) -> Self {
        let t = rng.random::<f64>();
        let x0 = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        Self { t, x0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// `cfm - λ·penalty`.
    pub loss: f64,
    /// Batch mean of the per-component mean squared error.
    pub cfm: f64,
    /// Batch mean of the summed field values along reconstructed poses.
    pub penalty: f64,
    pub grad: Vec<f64>,
}

/// Sum of field values over poses `1..=n` and its gradient with respect to
/// the actions, back-propagated through the pose recurrence.
pub fn field_sum_and_grad(field: &EsdfMap, actions: &ActionTrajectory, start: Pose2) -> (f64, Vec<f64>) {
    let n = actions.len();
    // Unwrapped headings so the adjoint sees a smooth recurrence.
    let mut th = Vec::with_capacity(n + 1);
    let mut px = Vec::with_capacity(n + 1);
    let mut py = Vec::with_capacity(n + 1);
    th.push(start.theta);
    px.push(start.x);
    py.push(start.y);
    for (k, a) in actions.steps.iter().enumerate() {
        let (s, c) = th[k].sin_cos();
        px.push(px[k] + c * a.dx - s * a.dy);
        py.push(py[k] + s * a.dx + c * a.dy);
        th.push(th[k] + a.dtheta);
    }
    let mut total = 0.0;
    let mut g = vec![[0.0; 2]; n + 1];
    for k in 1..=n {
        let s = field.sample(px[k], py[k]);
        total += s.value;
        g[k] = s.grad;
    }
    let mut out = vec![0.0; 3 * n];
    let mut pbar = [0.0; 2];
    let mut thbar = 0.0;
    for k in (1..=n).rev() {
        pbar[0] += g[k][0];
        pbar[1] += g[k][1];
        let a = &actions.steps[k - 1];
        let (s, c) = th[k - 1].sin_cos();
        // p_k = p_{k-1} + R(θ_{k-1})·d_k
        out[3 * (k - 1)] = c * pbar[0] + s * pbar[1];
        out[3 * (k - 1) + 1] = -s * pbar[0] + c * pbar[1];
        out[3 * (k - 1) + 2] = thbar;
        let dr = [-s * a.dx - c * a.dy, c * a.dx - s * a.dy];
        thbar += pbar[0] * dr[0] + pbar[1] * dr[1];
    }
    (total, out)
}

fn loss_impl(
    model: &VectorFieldModel,
    batch: &[TrainSample],
    draws: &[NoiseDraw],
    lambda: f64,
) -> Result<LossOutput, PlannerError> {
    if batch.is_empty() {
        return Err(PlannerError::Empty);
    }
    if draws.len() != batch.len() {
        return Err(PlannerError::ShapeMismatch("one noise draw per sample".into()));
    }
    if lambda != 0.0 {
        let mut geo = None;
        for (i, s) in batch.iter().enumerate() {
            let f = s.field.as_ref().ok_or(PlannerError::MissingField(i))?;
            if *geo.get_or_insert(f.geometry) != f.geometry {
                return Err(PlannerError::GeometryMismatch);
            }
        }
    }
    let dim = 3 * model.n_actions;
    let b = batch.len() as f64;
    let per = dim as f64;
    let mut grad = vec![0.0; model.param_count()];
    let (mut cfm, mut pen) = (0.0, 0.0);
    for (s, d) in batch.iter().zip(draws) {
        let x1 = model.normalize(&s.actions);
        model.check(&x1, &s.cond)?;
        if d.x0.len() != dim {
            return Err(PlannerError::ShapeMismatch("noise dimension".into()));
        }
        let x_t: Vec<f64> = x1.iter().zip(&d.x0).map(|(a, z)| (1.0 - d.t) * a + d.t * z).collect();
        let acts = model.mlp.forward_cache(&model.input(&x_t, d.t, &s.cond));
        let v = acts.last().expect("output");
        let mut gout = vec![0.0; dim];
        for i in 0..dim {
            let u = d.x0[i] - x1[i];
            let r = v[i] - u;
            cfm += r * r / per;
            gout[i] = 2.0 * r / (b * per);
        }
        if lambda != 0.0 {
            let field = s.field.as_ref().expect("checked above");
            let xr = reconstruct(&x_t, d.t, v);
            let actions = denormalize(&xr, model.action_scale);
            let (sum, ga) = field_sum_and_grad(field, &actions, s.start);
            pen += sum;
            // ∂(-λ·sum/B)/∂v = -λ/B · ga ⊙ scale · (-t)
            for i in 0..dim {
                gout[i] += lambda * d.t / b * ga[i] * model.action_scale[i % 3];
            }
        }
        model.mlp.backward(&acts, &gout, &mut grad);
    }
    let cfm = cfm / b;
    let penalty = pen / b;
    Ok(LossOutput {
        loss: cfm - lambda * penalty,
        cfm,
        penalty,
        grad,
    })
}

pub fn cfm_loss_with(
    model: &VectorFieldModel,
    batch: &[TrainSample],
    draws: &[NoiseDraw],
) -> Result<LossOutput, PlannerError> {
    loss_impl(model, batch, draws, 0.0)
}

pub fn planning_loss_with(
    model: &VectorFieldModel,
    batch: &[TrainSample],
    draws: &[NoiseDraw],
    lambda: f64,
) -> Result<LossOutput, PlannerError> {
    loss_impl(model, batch, draws, lambda)
}

fn draws_for(model: &VectorFieldModel, n: usize, rng: &mut impl Rng) -> Vec<NoiseDraw> {
    (0..n).map(|_| NoiseDraw::draw(3 * model.n_actions, rng)).collect()
}

pub fn cfm_loss(
    model: &VectorFieldModel,
    batch: &[TrainSample],
    rng: &mut impl Rng,
) -> Result<LossOutput, PlannerError> {
    let draws = draws_for(model, batch.len(), rng);
    cfm_loss_with(model, batch, &draws)
}

pub fn planning_loss(
    model: &VectorFieldModel,
    batch: &[TrainSample],
    lambda: f64,
    rng: &mut impl Rng,
) -> Result<LossOutput, PlannerError> {
    let draws = draws_for(model, batch.len(), rng);
    planning_loss_with(model, batch, &draws, lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub esdf_lambda: f64,
    pub mask_alpha: f64,
    pub seed: u64,
    pub euler_steps: usize,
    pub hidden: Vec<usize>,
    /// Multiply the learning rate by `lr_decay` every `decay_every` epochs
    /// (0 disables).
    pub lr_decay: f64,
    pub decay_every: usize,
    /// Global gradient-norm clip (0 disables).
    pub clip_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            momentum: 0.9,
            batch_size: 64,
            epochs: 30,
            esdf_lambda: 0.1,
            mask_alpha: 0.5,
            seed: 0,
            euler_steps: 20,
            hidden: vec![128, 128, 128],
            lr_decay: 0.5,
            decay_every: 0,
            clip_norm: 10.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PlannerError> {
        let bad = |m: &str| Err(PlannerError::InvalidConfig(m.into()));
        if !(self.lr > 0.0) {
            return bad("lr must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if self.batch_size == 0 || self.euler_steps == 0 {
            return bad("batch_size and euler_steps must be positive");
        }
        if !(self.esdf_lambda >= 0.0) {
            return bad("esdf_lambda must be non-negative");
        }
        if !(0.0..=1.0).contains(&self.mask_alpha) {
            return bad("mask_alpha must be in [0, 1]");
        }
        if self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub cfm: f64,
    pub penalty: f64,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: VectorFieldModel,
    pub log: Vec<EpochLog>,
}

/// Component-wise RMS of the expert actions, floored at `1e-3`.
pub fn action_scale_of(dataset: &[TrainSample]) -> [f64; 3] {
    let mut acc = [0.0; 3];
    let mut n = 0.0;
    for s in dataset {
        for a in &s.actions.steps {
            acc[0] += a.dx * a.dx;
            acc[1] += a.dy * a.dy;
            acc[2] += a.dtheta * a.dtheta;
            n += 1.0;
        }
    }
    acc.map(|v| if n > 0.0 { (v / n).sqrt().max(1e-3) } else { 1.0 })
}

pub fn train(dataset: &[TrainSample], config: &TrainConfig) -> Result<TrainOutcome, PlannerError> {
    config.validate()?;
    let first = dataset.first().ok_or(PlannerError::Empty)?;
    let n_actions = first.actions.len();
    let cond_dim = first.cond.occ_features.len();
    for s in dataset {
        if s.actions.len() != n_actions || s.cond.occ_features.len() != cond_dim {
            return Err(PlannerError::ShapeMismatch("inconsistent sample shapes".into()));
        }
    }
    let mut model = VectorFieldModel::new(n_actions, cond_dim, &config.hidden, Activation::Tanh, config.seed);
    model.action_scale = action_scale_of(dataset);
    train_from(model, dataset, config)
}

/// Continue training an existing model.
pub fn train_from(
    mut model: VectorFieldModel,
    dataset: &[TrainSample],
    config: &TrainConfig,
) -> Result<TrainOutcome, PlannerError> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(PlannerError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut velocity = vec![0.0; model.param_count()];
    let mut log = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut checkpoint = model.clone();
    let mut lr = config.lr;
    for epoch in 0..config.epochs {
        if config.decay_every > 0 && epoch > 0 && epoch % config.decay_every == 0 {
            lr *= config.lr_decay;
        }
        // Fisher–Yates with the training rng.
        for i in (1..order.len()).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let (mut cfm, mut pen, mut loss, mut batches) = (0.0, 0.0, 0.0, 0.0);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<TrainSample> = chunk.iter().map(|i| dataset[*i].clone()).collect();
            let out = planning_loss(&model, &batch, config.esdf_lambda, &mut rng)?;
            if !out.loss.is_finite() || out.grad.iter().any(|g| !g.is_finite()) {
                return Err(PlannerError::Diverged {
                    epoch,
                    checkpoint: Box::new(checkpoint),
                    log,
                });
            }
            let mut scale = 1.0;
            if config.clip_norm > 0.0 {
                let norm = out.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
                if norm > config.clip_norm {
                    scale = config.clip_norm / norm;
                }
            }
            for ((p, v), g) in model.mlp.params.iter_mut().zip(&mut velocity).zip(&out.grad) {
                *v = config.momentum * *v - lr * scale * g;
                *p += *v;
            }
            cfm += out.cfm;
            pen += out.penalty;
            loss += out.loss;
            batches += 1.0;
        }
        if model.mlp.params.iter().any(|p| !p.is_finite()) {
            return Err(PlannerError::Diverged {
                epoch,
                checkpoint: Box::new(checkpoint),
                log,
            });
        }
        checkpoint = model.clone();
        log.push(EpochLog {
            epoch,
            cfm: cfm / batches,
            penalty: pen / batches,
            loss: loss / batches,
            lr,
        });
    }
    Ok(TrainOutcome { model, log })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanSample {
    pub actions: ActionTrajectory,
    pub poses: PoseTrajectory,
    pub collided: bool,
    pub mean_step: f64,
}

impl PlanSample {
    fn new(actions: ActionTrajectory, start: Pose2) -> Self {
        let poses = actions_to_poses(&actions, start);
        let mean_step = if actions.is_empty() {
            0.0
        } else {
            actions.steps.iter().map(Action::step_length).sum::<f64>() / actions.len() as f64
        };
        Self {
            actions,
            poses,
            collided: false,
            mean_step,
        }
    }
}

/// Euler integration from noise at `t = 1` down to `t = 0`. Poses start at
/// the identity (ego frame); the collision flag is left unset.
pub fn sample(field: &dyn VectorField, c: &PlanningCondition, steps: usize, rng: &mut impl Rng) -> PlanSample {
    let dim = 3 * field.n_actions();
    let x: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    sample_from(field, c, steps, x)
}

/// Deterministic counterpart of [`sample`] from a given initial noise.
pub fn sample_from(field: &dyn VectorField, c: &PlanningCondition, steps: usize, mut x: Vec<f64>) -> PlanSample {
    let steps = steps.max(1);
    let dt = 1.0 / steps as f64;
    for i in 0..steps {
        let t = 1.0 - i as f64 * dt;
        let v = field.eval(&x, t, c);
        for (xi, vi) in x.iter_mut().zip(&v) {
            *xi -= dt * vi;
        }
    }
    PlanSample::new(denormalize(&x, field.action_scale()), Pose2::identity())
}

/// Unsigned free-space distance used for collision queries.
#[derive(Debug, Clone)]
pub struct CollisionChecker {
    occ: BinaryMap2D,
    dist: Grid2<f64>,
}

impl CollisionChecker {
    pub fn new(grid: &BinaryMap2D) -> Self {
        Self {
            occ: grid.clone(),
            dist: edt(grid, Target::Occupied),
        }
    }

    pub fn clearance(&self, x: f64, y: f64) -> f64 {
        self.dist.sample(x, y).value
    }

    pub fn point_collides(&self, x: f64, y: f64, radius: f64) -> bool {
        let s = self.dist.sample(x, y);
        if s.out_of_bounds {
            return true;
        }
        if let Some((i, j)) = self.occ.geometry.cell_of(x, y) {
            if self.occ.get(i, j) {
                return true;
            }
        }
        s.value < radius
    }

    pub fn collides(&self, poses: &PoseTrajectory, radius: f64) -> bool {
        poses.poses.iter().any(|p| self.point_collides(p.x, p.y, radius))
    }
}

/// True iff any pose is out of the grid, on an occupied cell, or closer than
/// `radius` to one.
pub fn collision_check(poses: &PoseTrajectory, grid: &BinaryMap2D, radius: f64) -> bool {
    CollisionChecker::new(grid).collides(poses, radius)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::esdf::GridGeometry;

    fn cond(occ: usize) -> PlanningCondition {
        PlanningCondition {
            goal: Pose2::new(1.0, 0.2, 0.1),
            velocity: [0.3, 0.0],
            occ_features: vec![0.5; occ],
        }
    }

    fn tiny(n: usize, occ: usize, seed: u64) -> VectorFieldModel {
        VectorFieldModel::new(n, occ, &[6], Activation::Tanh, seed)
    }

    fn ramp_field() -> EsdfMap {
        let g = GridGeometry::new(30, 30, 0.2, [-3.0, -3.0]).unwrap();
        let mut f = EsdfMap::filled(g, 0.0);
        for j in 0..30 {
            for i in 0..30 {
                let [x, y] = g.cell_center(i, j);
                f.set(i, j, 0.5 * x - 0.3 * y + 0.1 * x * y);
            }
        }
        f
    }

    #[test]
    fn zero_model_is_zero() {
        let mut m = tiny(2, 1, 0);
        m.mlp.params.iter_mut().for_each(|p| *p = 0.0);
        assert_eq!(m.vf_eval(&[1.0; 6], 0.3, &cond(1)).unwrap(), vec![0.0; 6]);
        assert!(m.vf_eval(&[1.0; 5], 0.3, &cond(1)).is_err());
    }

    #[test]
    fn identity_linear_layer() {
        let n = 2;
        let d_in = VectorFieldModel::input_dim(n, 0);
        let mut m = VectorFieldModel {
            n_actions: n,
            cond_dim: 0,
            action_scale: [1.0; 3],
            mlp: Mlp::zeros(vec![d_in, 3 * n], Activation::Identity),
        };
        for r in 0..3 * n {
            m.mlp.params[r * d_in + r] = 1.0;
        }
        let x = [0.1, -0.2, 0.3, 0.4, 0.5, -0.6];
        assert_eq!(m.vf_eval(&x, 0.7, &cond(0)).unwrap(), x.to_vec());
    }

    #[test]
    fn golden_forward() {
        let m = VectorFieldModel::new(1, 2, &[4], Activation::Tanh, 0);
        let c = PlanningCondition {
            goal: Pose2::new(0.5, -0.5, 0.2),
            velocity: [0.1, 0.0],
            occ_features: vec![1.0, 0.0],
        };
        let v = m.vf_eval(&[0.1, 0.2, 0.3], 0.5, &c).unwrap();
        let golden = [GOLDEN[0], GOLDEN[1], GOLDEN[2]];
        for (a, b) in v.iter().zip(golden) {
            assert!((a - b).abs() < 1e-12, "{v:?}");
        }
    }

    const GOLDEN: [f64; 3] = [0.05943172523616759, -0.39575488113109125, -0.190829729279297];

    #[test]
    fn reconstruct_cases() {
        assert_eq!(reconstruct(&[0.5], 0.5, &[-1.0]), vec![1.0]);
        assert_eq!(reconstruct(&[0.3, 0.4], 0.0, &[9.0, 9.0]), vec![0.3, 0.4]);
        let (x0, x1, t) = (0.7f64, -1.3f64, 0.37f64);
        let xt = (1.0 - t) * x1 + t * x0;
        assert!((reconstruct(&[xt], t, &[x0 - x1])[0] - x1).abs() < 1e-15);
    }

    fn one_dim_sample(x1: f64) -> TrainSample {
        TrainSample {
            actions: ActionTrajectory::new(vec![Action::new(x1, 0.0, 0.0)]),
            cond: cond(0),
            start: Pose2::identity(),
            field: None,
        }
    }

    #[test]
    fn cfm_fixture() {
        let mut m = tiny(1, 0, 0);
        m.mlp.params.iter_mut().for_each(|p| *p = 0.0);
        let draws = vec![NoiseDraw {
            t: 0.5,
            x0: vec![0.0; 3],
        }];
        let out = cfm_loss_with(&m, &[one_dim_sample(1.0)], &draws).unwrap();
        // u = -1 on the one nonzero component, averaged over three.
        assert_eq!(out.cfm * 3.0, 1.0);
        let zero = cfm_loss_with(&m, &[one_dim_sample(0.0)], &draws).unwrap();
        assert_eq!(zero.cfm, 0.0);
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    fn fd_check(lambda: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = tiny(3, 2, seed);
        let field = ramp_field();
        let batch: Vec<TrainSample> = (0..2)
            .map(|k| TrainSample {
                actions: ActionTrajectory::new(
                    (0..3)
                        .map(|i| Action::new(0.3 + 0.1 * i as f64, 0.05 * k as f64, 0.2))
                        .collect(),
                ),
                cond: cond(2),
                start: Pose2::new(-0.5, 0.2, 0.3),
                field: Some(field.clone()),
            })
            .collect();
        let draws: Vec<NoiseDraw> = (0..2).map(|_| NoiseDraw::draw(9, &mut rng)).collect();
        let out = planning_loss_with(&m, &batch, &draws, lambda).unwrap();
        for i in (0..m.param_count()).step_by(7) {
            let h = 1e-5 * m.mlp.params[i].abs().max(1.0);
            let mut p = m.clone();
            p.mlp.params[i] += h;
            let up = planning_loss_with(&p, &batch, &draws, lambda).unwrap().loss;
            p.mlp.params[i] -= 2.0 * h;
            let dn = planning_loss_with(&p, &batch, &draws, lambda).unwrap().loss;
            let fd = (up - dn) / (2.0 * h);
            assert!(rel_err(out.grad[i], fd) < 1e-4, "param {i}: {} vs {fd}", out.grad[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        fd_check(0.0, 1);
        fd_check(0.7, 2);
    }

    #[test]
    fn field_gradient_through_recurrence() {
        let field = ramp_field();
        let acts = ActionTrajectory::new(vec![Action::new(0.4, 0.1, 0.3), Action::new(0.2, -0.1, -0.5)]);
        let start = Pose2::new(0.1, -0.2, 0.4);
        let (s, g) = field_sum_and_grad(&field, &acts, start);
        let direct = crate::esdf::traj_esdf_sum(&field, &actions_to_poses(&acts, start));
        assert!((s - direct).abs() < 1e-12);
        let flat = acts.flatten();
        for i in 0..flat.len() {
            let mut a = flat.clone();
            a[i] += 1e-6;
            let up = field_sum_and_grad(&field, &ActionTrajectory::from_flat(&a), start).0;
            a[i] -= 2e-6;
            let dn = field_sum_and_grad(&field, &ActionTrajectory::from_flat(&a), start).0;
            assert!(rel_err(g[i], (up - dn) / 2e-6) < 1e-5, "{i}");
        }
    }

    #[test]
    fn uniform_field_penalty() {
        let m = tiny(4, 2, 3);
        let g = GridGeometry::new(40, 40, 0.2, [-4.0, -4.0]).unwrap();
        let mk = |c: f64| TrainSample {
            actions: ActionTrajectory::new(vec![Action::new(0.1, 0.0, 0.0); 4]),
            cond: cond(2),
            start: Pose2::identity(),
            field: Some(EsdfMap::filled(g, c)),
        };
        let draws = vec![NoiseDraw {
            t: 0.4,
            x0: vec![0.1; 12],
        }];
        let base = cfm_loss_with(&m, &[mk(0.0)], &draws).unwrap();
        let a = planning_loss_with(&m, &[mk(0.5)], &draws, 0.2).unwrap();
        assert!((a.loss - (base.loss - 0.2 * 4.0 * 0.5)).abs() < 1e-12);
        for (x, y) in a.grad.iter().zip(&base.grad) {
            assert!((x - y).abs() < 1e-12);
        }
        let b = planning_loss_with(&m, &[mk(0.8)], &draws, 0.2).unwrap();
        assert!((a.loss - b.loss - 0.2 * 4.0 * 0.3).abs() < 1e-12);
        let zero = planning_loss_with(&m, &[mk(0.5)], &draws, 0.0).unwrap();
        assert_eq!(zero, base);
    }

    struct PointMass(Vec<f64>);

    impl VectorField for PointMass {
        fn n_actions(&self) -> usize {
            self.0.len() / 3
        }
        fn eval(&self, x: &[f64], t: f64, _c: &PlanningCondition) -> Vec<f64> {
            x.iter().zip(&self.0).map(|(x, m)| (x - m) / t).collect()
        }
    }

    #[test]
    fn sampling_true_field() {
        let target = vec![0.2, 0.0, 0.1, 0.3, -0.1, 0.0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for steps in [1, 5, 20] {
            let s = sample(&PointMass(target.clone()), &cond(0), steps, &mut rng);
            for (a, b) in s.actions.flatten().iter().zip(&target) {
                assert!((a - b).abs() < 1e-9);
            }
            assert_eq!(s.poses, actions_to_poses(&s.actions, Pose2::identity()));
        }
        let m = tiny(2, 1, 4);
        let x = vec![0.3; 6];
        let one = sample_from(&m, &cond(1), 1, x.clone());
        let v = m.vf_eval(&x, 1.0, &cond(1)).unwrap();
        assert_eq!(one.actions.flatten(), reconstruct(&x, 1.0, &v));
        let a = sample(&m, &cond(1), 10, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample(&m, &cond(1), 10, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn collision_cases() {
        let g = GridGeometry::new(20, 20, 0.1, [0.0, 0.0]).unwrap();
        let mut occ = BinaryMap2D::filled(g, false);
        let traj = PoseTrajectory::new(vec![Pose2::new(0.5, 0.5, 0.0)]);
        assert!(!collision_check(&traj, &occ, 0.3));
        occ.set(9, 5, true);
        let on = PoseTrajectory::new(vec![Pose2::new(0.9, 0.5, 0.0)]);
        assert!(collision_check(&on, &occ, 0.0));
        assert!(!collision_check(&traj, &occ, 0.3));
        assert!(collision_check(&traj, &occ, 0.5));
        let out = PoseTrajectory::new(vec![Pose2::new(-1.0, 0.5, 0.0)]);
        assert!(collision_check(&out, &occ, 0.0));
    }

    #[test]
    fn overfit_single_sample() {
        let sample_acts = ActionTrajectory::new(vec![
            Action::new(0.12, 0.01, 0.05),
            Action::new(0.11, 0.02, 0.04),
            Action::new(0.13, -0.01, 0.0),
        ]);
        let data = vec![TrainSample {
            actions: sample_acts.clone(),
            cond: cond(2),
            start: Pose2::identity(),
            field: None,
        }];
        let cfg = TrainConfig {
            lr: 0.01,
            batch_size: 1,
            epochs: 6000,
            esdf_lambda: 0.0,
            hidden: vec![64, 64],
            decay_every: 2000,
            ..Default::default()
        };
        let out = train(&data, &cfg).unwrap();
        let again = train(&data, &cfg).unwrap();
        assert_eq!(out.log, again.log);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let s = sample(&out.model, &cond(2), 20, &mut rng);
        for (a, b) in s.actions.flatten().iter().zip(sample_acts.flatten()) {
            assert!((a - b).abs() < 0.05, "{:?}", s.actions);
        }
    }

    #[test]
    fn model_file_round_trip() {
        let mut m = tiny(2, 3, 8);
        m.action_scale = [0.1, 0.02, 0.05];
        let back = VectorFieldModel::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        let mut f = ModelFile::from(&m);
        f.weights.pop();
        assert!(VectorFieldModel::try_from(f).is_err());
    }
}
