//! Losses, exact gradients through the unrolled RK4 rollout, Adam, and the
//! training driver.
//!
//! The simulation loss of a trajectory with `N` samples is
//! `(1/N) sum_{k=1}^{N-1} |y_k - C x_k|_2`, where `x_k` is the free-run RK4
//! state started from the trajectory's initial state. Its gradient is the
//! adjoint of the discrete computation: the backward pass walks the steps in
//! reverse and, inside each step, the four RK4 stages in reverse. Each stage
//! backward needs the transpose Jacobian of `J dH/dx`, i.e. a Hessian-vector
//! product of the network, which is closed-form for one tanh layer.
//!
//! At a zero residual the norm is not differentiable; its contribution to the
//! gradient is taken as zero there.

use std::io::Write as _;
use std::path::Path;

use ndarray::{ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, Dataset, DerivativeSource, InitialState, Trajectory};
use crate::dynamics::StructureMatrices;
use crate::error::{check_len, Error, Result};
use crate::integrate::{simulate, IntegratorConfig, VectorField};
use crate::netmodel::{BlackBoxNet, HamiltonianNet, Model, ModelKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    Simulation,
    DerivativeMatching,
}

impl LossKind {
    pub fn default_for(kind: ModelKind) -> Self {
        match kind {
            ModelKind::OeHnn => LossKind::Simulation,
            ModelKind::Hnn | ModelKind::Mlp => LossKind::DerivativeMatching,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    /// Overrides the loss implied by the model kind; only the implied loss
    /// is accepted.
    pub loss: Option<LossKind>,
    /// Sub-rollout length for chunked simulation loss; `None` rolls out each
    /// trajectory in one piece.
    pub chunk_len: Option<usize>,
    /// Epochs trained on sub-rollouts of `warmup_chunk_len` before the main
    /// stage. Simulation loss only; 0 disables the warm-up.
    pub warmup_epochs: usize,
    pub warmup_chunk_len: usize,
    pub hidden: usize,
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub workers: usize,
    pub initial_state: InitialState,
    pub derivatives: DerivativeSource,
    /// Loss charged for a trajectory whose rollout diverges.
    pub divergence_penalty: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            max_epochs: 5000,
            patience: 500,
            loss: None,
            chunk_len: None,
            warmup_epochs: 0,
            warmup_chunk_len: 50,
            hidden: 200,
            seed: 0,
            workers: 0,
            initial_state: InitialState::Known,
            derivatives: DerivativeSource::FiniteDifference,
            divergence_penalty: 1e6,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |r: &str| Err(Error::invalid("training config", r.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be positive");
        }
        if self.patience < 1 {
            return bad("patience must be at least 1");
        }
        if matches!(self.chunk_len, Some(c) if c < 2) {
            return bad("chunk_len must be at least 2");
        }
        if self.warmup_epochs > 0 && self.warmup_chunk_len < 2 {
            return bad("warmup_chunk_len must be at least 2");
        }
        if self.hidden == 0 {
            return bad("hidden width must be positive");
        }
        if !(self.divergence_penalty.is_finite()) {
            return bad("divergence_penalty must be finite");
        }
        Ok(())
    }

    pub fn loss_for(&self, kind: ModelKind) -> Result<LossKind> {
        let implied = LossKind::default_for(kind);
        match self.loss {
            Some(l) if l != implied => Err(Error::invalid(
                "training config",
                format!("model kind {kind} is trained with the {implied:?} loss, not {l:?}"),
            )),
            _ => Ok(implied),
        }
    }

    fn worker_count(&self) -> usize {
        if self.workers == 0 {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        } else {
            self.workers
        }
    }
}

/// First and second moment estimates of Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![0.0; len],
            v: vec![0.0; len],
            step: 0,
        }
    }
}

/// One bias-corrected Adam update of `theta` in place.
pub fn adam_step(theta: &mut [f64], grad: &[f64], state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    check_len("gradient", theta.len(), grad.len())?;
    check_len("adam state", theta.len(), state.m.len())?;
    if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient { index });
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for i in 0..theta.len() {
        let g = grad[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = state.m[i] / c1;
        let v_hat = state.v[i] / c2;
        theta[i] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Scratch storage for one rollout's forward pass.
#[derive(Debug, Default)]
struct Tape {
    /// Stage inputs, `4 * d` per step.
    stage_x: Vec<f64>,
    /// Hidden activations, `4 * n_h` per step.
    stage_act: Vec<f64>,
    /// Residuals `y_k - C x_k`, `ny` per sample.
    residual: Vec<f64>,
}

/// Simulation loss of the samples `y[0..len]` rolled out from `x0`, scaled
/// by `scale`. Accumulates the parameter gradient into `grad` when given.
#[allow(clippy::too_many_arguments)]
fn segment_loss(
    net: &HamiltonianNet,
    s: &StructureMatrices,
    y: ArrayView2<f64>,
    u: ArrayView2<f64>,
    x0: &[f64],
    h: f64,
    scale: f64,
    grad: Option<&mut [f64]>,
    tape: &mut Tape,
) -> Result<f64> {
    let d = s.state_dim();
    let ny = s.output_dim();
    let nh = net.hidden();
    let len = y.nrows();
    let steps = len - 1;
    tape.stage_x.resize(steps * 4 * d, 0.0);
    tape.stage_act.resize(steps * 4 * nh, 0.0);
    tape.residual.resize(len * ny, 0.0);

    let mut x = x0.to_vec();
    let mut next = vec![0.0; d];
    let mut g = vec![0.0; d];
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut k3 = vec![0.0; d];
    let mut k4 = vec![0.0; d];
    let mut yhat = vec![0.0; ny];
    let mut uk = vec![0.0; u.ncols()];
    let mut loss = 0.0;

    // The stage arithmetic mirrors `integrate::Stepper` exactly, so a model
    // reproduces its own generated data bit for bit.
    for k in 0..steps {
        uk.iter_mut().zip(u.row(k)).for_each(|(a, b)| *a = *b);
        let xs = &mut tape.stage_x[k * 4 * d..(k + 1) * 4 * d];
        let acts = &mut tape.stage_act[k * 4 * nh..(k + 1) * 4 * nh];
        let (a1, rest) = acts.split_at_mut(nh);
        let (a2, rest) = rest.split_at_mut(nh);
        let (a3, a4) = rest.split_at_mut(nh);

        xs[..d].copy_from_slice(&x);
        net.grad_x_cached(&x, a1, &mut g);
        s.field_into(&g, &uk, &mut k1);
        for i in 0..d {
            xs[d + i] = x[i] + 0.5 * h * k1[i];
        }
        net.grad_x_cached(&xs[d..2 * d], a2, &mut g);
        s.field_into(&g, &uk, &mut k2);
        for i in 0..d {
            xs[2 * d + i] = x[i] + 0.5 * h * k2[i];
        }
        net.grad_x_cached(&xs[2 * d..3 * d], a3, &mut g);
        s.field_into(&g, &uk, &mut k3);
        for i in 0..d {
            xs[3 * d + i] = x[i] + h * k3[i];
        }
        net.grad_x_cached(&xs[3 * d..4 * d], a4, &mut g);
        s.field_into(&g, &uk, &mut k4);
        for i in 0..d {
            next[i] = x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::Diverged { step: k });
        }
        std::mem::swap(&mut x, &mut next);

        s.apply_c(&x, &mut yhat);
        let r = &mut tape.residual[(k + 1) * ny..(k + 2) * ny];
        for i in 0..ny {
            r[i] = y[[k + 1, i]] - yhat[i];
        }
        loss += scale * norm(r);
    }

    let Some(grad) = grad else {
        return Ok(loss);
    };

    let mut lambda = vec![0.0; d];
    let mut lk = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
    let mut dx = vec![0.0; d];
    let mut mu = vec![0.0; d];
    let mut local = vec![0.0; d];
    for k in (1..=steps).rev() {
        let r = &tape.residual[k * ny..(k + 1) * ny];
        let rn = norm(r);
        if rn > 0.0 {
            let unit: Vec<f64> = r.iter().map(|v| -scale * v / rn).collect();
            s.apply_ct(&unit, &mut local);
            for i in 0..d {
                lambda[i] += local[i];
            }
        }

        // Back through the step that produced x_k from x_{k-1}.
        let step = k - 1;
        let xs = &tape.stage_x[step * 4 * d..(step + 1) * 4 * d];
        let acts = &tape.stage_act[step * 4 * nh..(step + 1) * 4 * nh];
        let weights = [h / 6.0, h / 3.0, h / 3.0, h / 6.0];
        for (stage, w) in weights.iter().enumerate() {
            for i in 0..d {
                lk[stage][i] = w * lambda[i];
            }
        }
        // Stage inputs: X2 = x + h/2 k1, X3 = x + h/2 k2, X4 = x + h k3.
        let feed = [0.0, 0.5 * h, 0.5 * h, h];
        for stage in (0..4).rev() {
            let xin = &xs[stage * d..(stage + 1) * d];
            let act = &acts[stage * nh..(stage + 1) * nh];
            net.field_vjp(xin, act, &lk[stage], &mut mu, grad, &mut dx);
            for i in 0..d {
                lambda[i] += dx[i];
            }
            if stage > 0 {
                for i in 0..d {
                    lk[stage - 1][i] += feed[stage] * dx[i];
                }
            }
        }
    }
    Ok(loss)
}

/// A piece of a trajectory rolled out from its own anchor state.
#[derive(Debug, Clone)]
struct Segment {
    start: usize,
    len: usize,
    x0: Vec<f64>,
}

fn segments(traj: &Trajectory, init: InitialState, chunk_len: Option<usize>) -> Result<Vec<Segment>> {
    let n = traj.len();
    if n < 2 {
        return Err(Error::invalid("trajectory", format!("{} has fewer than 2 samples", traj.name)));
    }
    let chunk = chunk_len.unwrap_or(n).min(n);
    let mut out = Vec::new();
    let mut start = 0;
    while start + 1 < n {
        let len = chunk.min(n - start);
        let x0 = if start == 0 {
            traj.initial_state(init)?
        } else {
            traj.y.row(start).to_vec()
        };
        out.push(Segment { start, len, x0 });
        start += len - 1;
    }
    Ok(out)
}

fn trajectory_loss(
    net: &HamiltonianNet,
    traj: &Trajectory,
    init: InitialState,
    chunk_len: Option<usize>,
    mut grad: Option<&mut [f64]>,
) -> Result<f64> {
    let s = net.structure();
    check_len("trajectory state dimension", s.output_dim(), traj.state_dim())?;
    check_len("trajectory input dimension", s.input_dim(), traj.input_dim())?;
    let scale = 1.0 / traj.len() as f64;
    let mut tape = Tape::default();
    let mut loss = 0.0;
    for seg in segments(traj, init, chunk_len)? {
        let range = seg.start..seg.start + seg.len;
        loss += segment_loss(
            net,
            s,
            traj.y.slice_axis(Axis(0), range.clone().into()),
            traj.u.slice_axis(Axis(0), range.into()),
            &seg.x0,
            traj.ts,
            scale,
            grad.as_deref_mut(),
            &mut tape,
        )
        .map_err(|e| match e {
            Error::Diverged { step } => Error::Diverged { step: seg.start + step },
            other => other,
        })?;
    }
    Ok(loss)
}

/// Simulation loss of `traj` under a Hamiltonian model. Uses the plain
/// integrator, independently of the gradient path.
pub fn simulation_loss(
    net: &HamiltonianNet,
    s: &StructureMatrices,
    traj: &Trajectory,
    init: InitialState,
) -> Result<f64> {
    check_len("structure state dimension", net.state_dim(), s.state_dim())?;
    let model = ModelRef::Field(net);
    sim_loss_any(&model, s, traj, init)
}

enum ModelRef<'a> {
    Field(&'a dyn VectorField),
}

fn sim_loss_any(model: &ModelRef, s: &StructureMatrices, traj: &Trajectory, init: InitialState) -> Result<f64> {
    let ModelRef::Field(field) = model;
    check_len("trajectory state dimension", s.output_dim(), traj.state_dim())?;
    if traj.len() < 2 {
        return Err(Error::invalid("trajectory", format!("{} has fewer than 2 samples", traj.name)));
    }
    let x0 = traj.initial_state(init)?;
    let sim = simulate(*field, IntegratorConfig::rk4(traj.ts)?, &x0, traj.u.view())?;
    if let Some(step) = sim.diverged_at {
        return Err(Error::Diverged { step });
    }
    let mut yhat = vec![0.0; s.output_dim()];
    let mut loss = 0.0;
    for k in 1..traj.len() {
        s.apply_c(&sim.states.row(k).to_vec(), &mut yhat);
        let r: Vec<f64> = traj.y.row(k).iter().zip(&yhat).map(|(a, b)| a - b).collect();
        loss += norm(&r);
    }
    Ok(loss / traj.len() as f64)
}

/// Simulation loss of any model, used for validation of every kind.
pub fn model_simulation_loss(model: &Model, traj: &Trajectory, init: InitialState, s: &StructureMatrices) -> Result<f64> {
    sim_loss_any(&ModelRef::Field(model), s, traj, init)
}

/// Simulation loss and its exact gradient with respect to every parameter.
pub fn simulation_loss_grad(
    net: &HamiltonianNet,
    s: &StructureMatrices,
    traj: &Trajectory,
    init: InitialState,
) -> Result<(f64, Vec<f64>)> {
    simulation_loss_grad_chunked(net, s, traj, init, None)
}

/// As [`simulation_loss_grad`], rolling out sub-trajectories of `chunk_len`
/// samples; every chunk after the first starts at its measured sample.
pub fn simulation_loss_grad_chunked(
    net: &HamiltonianNet,
    s: &StructureMatrices,
    traj: &Trajectory,
    init: InitialState,
    chunk_len: Option<usize>,
) -> Result<(f64, Vec<f64>)> {
    check_len("structure state dimension", net.state_dim(), s.state_dim())?;
    if s != net.structure() {
        return Err(Error::invalid("structure", "must match the network's structure matrices"));
    }
    let mut grad = vec![0.0; net.params().len()];
    let loss = trajectory_loss(net, traj, init, chunk_len, Some(&mut grad))?;
    Ok((loss, grad))
}

/// Regression samples for the derivative-matching losses.
#[derive(Debug, Clone)]
pub struct DerivativeBatch {
    pub x: ndarray::Array2<f64>,
    pub target: ndarray::Array2<f64>,
    pub u: ndarray::Array2<f64>,
}

impl DerivativeBatch {
    pub fn from_trajectory(traj: &Trajectory, source: DerivativeSource) -> Result<Self> {
        let (x, target) = traj.derivative_data(source)?;
        Ok(DerivativeBatch {
            x,
            target,
            u: traj.u.clone(),
        })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.nrows() == 0
    }
}

/// Input-augmented HNN loss: mean over samples of
/// `|dH/dp - q'| + |dH/dq + p' - (G u)_p|`.
pub fn hnn_derivative_loss(net: &HamiltonianNet, batch: &DerivativeBatch, grad: Option<&mut [f64]>) -> Result<f64> {
    let s = net.structure();
    let (n, d, nh) = (s.n(), s.state_dim(), net.hidden());
    check_len("batch state dimension", d, batch.x.ncols())?;
    check_len("batch target dimension", d, batch.target.ncols())?;
    check_len("batch input dimension", s.input_dim(), batch.u.ncols())?;
    let count = batch.len();
    if count == 0 {
        return Ok(0.0);
    }
    let scale = 1.0 / count as f64;
    let mut g = vec![0.0; d];
    let mut act = vec![0.0; nh];
    let mut gu = vec![0.0; d];
    let mut mu = vec![0.0; d];
    let mut dx = vec![0.0; d];
    let mut r1 = vec![0.0; n];
    let mut r2 = vec![0.0; n];
    let mut grad = grad;
    let mut loss = 0.0;
    for k in 0..count {
        let x = batch.x.row(k).to_vec();
        let t = batch.target.row(k);
        let u = batch.u.row(k).to_vec();
        net.grad_x_cached(&x, &mut act, &mut g);
        gu.fill(0.0);
        s.add_g(&u, &mut gu);
        for i in 0..n {
            r1[i] = g[n + i] - t[i];
            r2[i] = g[i] + t[n + i] - gu[n + i];
        }
        let (n1, n2) = (norm(&r1), norm(&r2));
        loss += scale * (n1 + n2);
        if let Some(grad) = grad.as_deref_mut() {
            for i in 0..n {
                mu[i] = if n2 > 0.0 { scale * r2[i] / n2 } else { 0.0 };
                mu[n + i] = if n1 > 0.0 { scale * r1[i] / n1 } else { 0.0 };
            }
            net.grad_x_vjp(&x, &act, &mu, grad, &mut dx);
        }
    }
    Ok(loss)
}

/// Black-box regression loss: mean over samples of `|f(x, u) - x'|`.
pub fn mlp_derivative_loss(net: &BlackBoxNet, batch: &DerivativeBatch, grad: Option<&mut [f64]>) -> Result<f64> {
    let d = net.state_dim();
    check_len("batch state dimension", d, batch.x.ncols())?;
    check_len("batch target dimension", d, batch.target.ncols())?;
    check_len("batch input dimension", net.input_dim(), batch.u.ncols())?;
    let count = batch.len();
    if count == 0 {
        return Ok(0.0);
    }
    let scale = 1.0 / count as f64;
    let mut act = vec![0.0; net.hidden()];
    let mut f = vec![0.0; d];
    let mut r = vec![0.0; d];
    let mut grad = grad;
    let mut loss = 0.0;
    for k in 0..count {
        let x = batch.x.row(k).to_vec();
        let u = batch.u.row(k).to_vec();
        net.forward_cached(&x, &u, &mut act, &mut f);
        for i in 0..d {
            r[i] = f[i] - batch.target[[k, i]];
        }
        let rn = norm(&r);
        loss += scale * rn;
        if let (Some(grad), true) = (grad.as_deref_mut(), rn > 0.0) {
            let delta: Vec<f64> = r.iter().map(|v| scale * v / rn).collect();
            net.backward(&x, &u, &act, &delta, grad);
        }
    }
    Ok(loss)
}

/// Derivative-matching loss of an `hnn` or `mlp` model.
pub fn derivative_loss(model: &Model, batch: &DerivativeBatch) -> Result<f64> {
    match model {
        Model::Hnn(h) | Model::OeHnn(h) => hnn_derivative_loss(h, batch, None),
        Model::Mlp(b) => mlp_derivative_loss(b, batch, None),
    }
}

pub fn derivative_loss_grad(model: &Model, batch: &DerivativeBatch) -> Result<(f64, Vec<f64>)> {
    let mut grad = vec![0.0; model.params().len()];
    let loss = match model {
        Model::Hnn(h) | Model::OeHnn(h) => hnn_derivative_loss(h, batch, Some(&mut grad))?,
        Model::Mlp(b) => mlp_derivative_loss(b, batch, Some(&mut grad))?,
    };
    Ok((loss, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Training trajectories whose rollout diverged this epoch.
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl History {
    pub fn last_epoch(&self) -> Option<usize> {
        self.epochs.last().map(|r| r.epoch)
    }

    /// Writes `epoch,train_loss,val_loss` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = String::from("epoch,train_loss,val_loss\n");
        for r in &self.epochs {
            text += &format!("{},{},{}\n", r.epoch, fmt_f64(r.train_loss), fmt_f64(r.val_loss));
        }
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }
}

/// Training objective over one trajectory.
enum Objective<'a> {
    Simulation(&'a Trajectory),
    Derivative(DerivativeBatch),
}

struct Outcome {
    loss: f64,
    grad: Option<Vec<f64>>,
}

fn evaluate_objective(model: &Model, obj: &Objective, chunk_len: Option<usize>, cfg: &TrainConfig) -> Result<Outcome> {
    let mut grad = vec![0.0; model.params().len()];
    let result = match (obj, model) {
        (Objective::Simulation(traj), Model::OeHnn(h) | Model::Hnn(h)) => {
            trajectory_loss(h, traj, cfg.initial_state, chunk_len, Some(&mut grad))
        }
        (Objective::Simulation(_), Model::Mlp(_)) => Err(Error::invalid(
            "training config",
            "the simulation loss needs a Hamiltonian model",
        )),
        (Objective::Derivative(batch), Model::OeHnn(h) | Model::Hnn(h)) => hnn_derivative_loss(h, batch, Some(&mut grad)),
        (Objective::Derivative(batch), Model::Mlp(b)) => mlp_derivative_loss(b, batch, Some(&mut grad)),
    };
    match result {
        Ok(loss) if loss.is_finite() && grad.iter().all(|g| g.is_finite()) => Ok(Outcome { loss, grad: Some(grad) }),
        Ok(_) | Err(Error::Diverged { .. }) => Ok(Outcome {
            loss: cfg.divergence_penalty,
            grad: None,
        }),
        Err(e) => Err(e),
    }
}

fn validation_loss(model: &Model, traj: &Trajectory, s: &StructureMatrices, cfg: &TrainConfig) -> Result<f64> {
    match model_simulation_loss(model, traj, cfg.initial_state, s) {
        Ok(l) if l.is_finite() => Ok(l),
        Ok(_) | Err(Error::Diverged { .. }) => Ok(cfg.divergence_penalty),
        Err(e) => Err(e),
    }
}

/// Trains a freshly initialized model of `kind`.
pub fn fit(kind: ModelKind, dataset: &Dataset, cfg: &TrainConfig) -> Result<(Model, History)> {
    let system = &dataset.system;
    let model = Model::init(kind, system.n_masses(), &system.input_map, cfg.hidden, cfg.seed);
    fit_from(model, dataset, cfg)
}

/// Trains starting from `model`. One full-batch Adam step per epoch; the
/// returned model has the lowest validation simulation loss seen. A warm-up
/// stage, when configured, runs first with its own optimizer state and hands
/// its best model to the main stage.
pub fn fit_from(mut model: Model, dataset: &Dataset, cfg: &TrainConfig) -> Result<(Model, History)> {
    cfg.validate()?;
    let kind = model.kind();
    let loss_kind = cfg.loss_for(kind)?;
    if dataset.train.is_empty() || dataset.validation.is_empty() {
        return Err(Error::invalid("dataset", "training needs non-empty train and validation splits"));
    }
    let s = dataset.system.structure();
    check_len("model state dimension", s.state_dim(), model.state_dim())?;
    check_len("model input dimension", s.input_dim(), model.input_dim())?;

    let objectives: Vec<Objective> = match loss_kind {
        LossKind::Simulation => dataset.train.iter().map(Objective::Simulation).collect(),
        LossKind::DerivativeMatching => dataset
            .train
            .iter()
            .map(|t| DerivativeBatch::from_trajectory(t, cfg.derivatives).map(Objective::Derivative))
            .collect::<Result<_>>()?,
    };

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.worker_count())
        .build()
        .map_err(|e| Error::invalid("worker pool", e.to_string()))?;

    let mut history = History {
        best_val_loss: f64::INFINITY,
        ..History::default()
    };
    let ctx = StageContext {
        objectives: &objectives,
        dataset,
        s: &s,
        cfg,
        pool: &pool,
    };
    if loss_kind == LossKind::Simulation && cfg.warmup_epochs > 0 {
        let warm = Stage {
            chunk_len: Some(cfg.warmup_chunk_len),
            epochs: cfg.warmup_epochs,
            patience: cfg.warmup_epochs,
        };
        model = ctx.run(model, warm, &mut history)?;
    }
    let main = Stage {
        chunk_len: cfg.chunk_len,
        epochs: cfg.max_epochs,
        patience: cfg.patience,
    };
    let best = ctx.run(model, main, &mut history)?;
    Ok((best, history))
}

struct Stage {
    chunk_len: Option<usize>,
    epochs: usize,
    patience: usize,
}

struct StageContext<'a> {
    objectives: &'a [Objective<'a>],
    dataset: &'a Dataset,
    s: &'a StructureMatrices,
    cfg: &'a TrainConfig,
    pool: &'a rayon::ThreadPool,
}

impl StageContext<'_> {
    /// Runs one stage with a fresh optimizer, appending to `history`.
    fn run(&self, mut model: Model, stage: Stage, history: &mut History) -> Result<Model> {
        let cfg = self.cfg;
        let first = history.epochs.len();
        let mut adam = AdamState::new(model.params().len());
        let mut best = model.clone();
        let mut best_local = 0;
        for local in 0..stage.epochs {
            let epoch = first + local;
            let outcomes = self.pool.install(|| {
                self.objectives
                    .par_iter()
                    .map(|o| evaluate_objective(&model, o, stage.chunk_len, cfg))
                    .collect::<Result<Vec<_>>>()
            })?;
            let mut train_loss = 0.0;
            let mut grad = vec![0.0; model.params().len()];
            let mut diverged = 0;
            for o in &outcomes {
                train_loss += o.loss;
                match &o.grad {
                    Some(g) => grad.iter_mut().zip(g).for_each(|(a, b)| *a += b),
                    None => diverged += 1,
                }
            }
            if epoch == 0 && diverged == outcomes.len() {
                return Err(Error::AllDiverged);
            }
            let val_losses = self.pool.install(|| {
                self.dataset
                    .validation
                    .par_iter()
                    .map(|t| validation_loss(&model, t, self.s, cfg))
                    .collect::<Result<Vec<_>>>()
            })?;
            let val_loss: f64 = val_losses.iter().sum();
            history.epochs.push(EpochRecord {
                epoch,
                train_loss,
                val_loss,
                diverged,
            });
            // A stage starts from the best model so far; the tie keeps its own copy.
            if val_loss < history.best_val_loss || (local == 0 && val_loss <= history.best_val_loss) {
                history.best_val_loss = val_loss;
                history.best_epoch = epoch;
                best = model.clone();
                best_local = local;
            }
            if local - best_local >= stage.patience || local + 1 == stage.epochs {
                break;
            }
            adam_step(model.params_mut(), &grad, &mut adam, cfg)?;
        }
        Ok(best)
    }
}

/// Outcome of comparing the analytic gradient with central differences.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub label: String,
    pub checked: usize,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Deliberate corruption of the analytic gradient, used to show that the
/// checker can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum GradFault {
    #[default]
    None,
    SignFlip,
}

fn gradcheck_fixture(steps: usize, hidden: usize, seed: u64, uniform: bool) -> Result<(HamiltonianNet, Trajectory)> {
    use crate::data::{generate, Protocol, SplitSizes};
    use crate::dynamics::SystemSpec;
    use rand::SeedableRng;

    let protocol = Protocol {
        realizations: 1,
        samples: steps + 1,
        split: SplitSizes {
            train: 1,
            validation: 0,
            test: 0,
        },
        ..Protocol::duffing()
    };
    let traj = generate(&SystemSpec::duffing(), &protocol, seed)?.train.remove(0);
    let net = if uniform {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        HamiltonianNet::uniform(1, &[0], hidden, 1.0, &mut rng)
    } else {
        HamiltonianNet::glorot(1, &[0], hidden, seed)
    };
    Ok((net, traj))
}

fn analytic(net: &HamiltonianNet, traj: &Trajectory, fault: GradFault) -> Result<Vec<f64>> {
    let (_, mut g) = simulation_loss_grad(net, net.structure(), traj, InitialState::Known)?;
    if fault == GradFault::SignFlip {
        g.iter_mut().for_each(|v| *v = -*v);
    }
    Ok(g)
}

/// Coordinate-wise check over every parameter with `|g| > 1e-8`, on a
/// rollout of `steps` RK4 steps through noisy Duffing data. Uses the
/// fourth-order five-point stencil; a plain central difference is
/// roundoff-limited on the smallest checked coordinates.
pub fn check_rollout_gradient(steps: usize, hidden: usize, seed: u64, fault: GradFault) -> Result<GradCheck> {
    const STEP: f64 = 1e-3;
    let (net, traj) = gradcheck_fixture(steps, hidden, seed, true)?;
    let g = analytic(&net, &traj, fault)?;
    let loss_at = |i: usize, delta: f64| {
        let mut n = net.clone();
        n.params_mut()[i] += delta;
        simulation_loss(&n, n.structure(), &traj, InitialState::Known)
    };
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for i in 0..g.len() {
        if g[i].abs() <= 1e-8 {
            continue;
        }
        let fd = (loss_at(i, -2.0 * STEP)? - 8.0 * loss_at(i, -STEP)? + 8.0 * loss_at(i, STEP)? - loss_at(i, 2.0 * STEP)?)
            / (12.0 * STEP);
        checked += 1;
        worst = worst.max((g[i] - fd).abs() / g[i].abs().max(fd.abs()));
    }
    Ok(GradCheck {
        label: format!("{steps}-step rollout, {hidden} hidden units"),
        checked,
        max_rel_error: worst,
        tolerance: 1e-5,
    })
}

/// Directional derivative along a random unit direction against a central
/// difference of the scalar loss.
pub fn check_directional_derivative(steps: usize, hidden: usize, seed: u64, fault: GradFault) -> Result<GradCheck> {
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    const STEP: f64 = 1e-6;
    let (net, traj) = gradcheck_fixture(steps, hidden, seed, false)?;
    let g = analytic(&net, &traj, fault)?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let mut dir: Vec<f64> = (0..g.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let len = norm(&dir);
    dir.iter_mut().for_each(|v| *v /= len);
    let shifted = |sign: f64| {
        let mut n = net.clone();
        n.params_mut().iter_mut().zip(&dir).for_each(|(p, d)| *p += sign * STEP * d);
        simulation_loss(&n, n.structure(), &traj, InitialState::Known)
    };
    let fd = (shifted(1.0)? - shifted(-1.0)?) / (2.0 * STEP);
    let an: f64 = g.iter().zip(&dir).map(|(a, b)| a * b).sum();
    Ok(GradCheck {
        label: format!("{steps}-step directional derivative, {hidden} hidden units"),
        checked: 1,
        max_rel_error: (an - fd).abs() / an.abs().max(fd.abs()),
        tolerance: 1e-4,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, generate_from_field, Protocol, SplitSizes, TrajectoryMeta};
    use crate::dynamics::SystemSpec;
    use crate::integrate::rollout;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bare_trajectory(y: Array2<f64>, u: Array2<f64>, ts: f64) -> Trajectory {
        let n = y.nrows();
        Trajectory {
            name: "t".into(),
            ts,
            t: (0..n).map(|k| k as f64 * ts).collect(),
            x_true: Some(y.clone()),
            dx_true: None,
            u,
            y,
            meta: TrajectoryMeta {
                index: 0,
                attempt: 0,
                stream: 0,
                noise_stream: 0,
                phases: vec![],
                x_init: vec![],
            },
        }
    }

    fn noisy_duffing(samples: usize, seed: u64) -> Trajectory {
        let p = Protocol {
            realizations: 1,
            samples,
            split: SplitSizes {
                train: 1,
                validation: 0,
                test: 0,
            },
            ..Protocol::duffing()
        };
        generate(&SystemSpec::duffing(), &p, seed).unwrap().train.remove(0)
    }

    #[test]
    fn loss_examples() {
        let net = HamiltonianNet::zeros(1, &[0], 3);
        let s = net.structure().clone();
        let x0 = [0.3, -0.2];
        let y = Array2::from_shape_fn((10, 2), |(_, c)| x0[c]);
        let traj = bare_trajectory(y, Array2::zeros((10, 1)), 0.01);
        assert_eq!(simulation_loss(&net, &s, &traj, InitialState::Measured).unwrap(), 0.0);

        let c = [0.3, 0.4];
        let y = Array2::from_shape_fn((10, 2), |(k, i)| x0[i] + if k >= 1 { c[i] } else { 0.0 });
        let traj = bare_trajectory(y, Array2::zeros((10, 1)), 0.01);
        let loss = simulation_loss(&net, &s, &traj, InitialState::Measured).unwrap();
        assert!((loss - 0.5 * 9.0 / 10.0).abs() < 1e-15);
        let (lg, _) = simulation_loss_grad(&net, &s, &traj, InitialState::Measured).unwrap();
        assert!((lg - loss).abs() < 1e-15);
    }

    #[test]
    fn self_generated_data_has_zero_loss_and_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = HamiltonianNet::uniform(1, &[0], 6, 0.5, &mut rng);
        let p = Protocol {
            realizations: 1,
            samples: 60,
            record_start: 0.2,
            noise_variance: 0.0,
            split: SplitSizes {
                train: 1,
                validation: 0,
                test: 0,
            },
            ..Protocol::duffing()
        };
        let ds = generate_from_field(&net, &SystemSpec::duffing(), &p, 3).unwrap();
        let traj = &ds.train[0];
        let loss = simulation_loss(&net, net.structure(), traj, InitialState::Known).unwrap();
        assert!(loss < 1e-10);
        let (l, g) = simulation_loss_grad(&net, net.structure(), traj, InitialState::Known).unwrap();
        assert!(l < 1e-10);
        assert!(norm(&g) < 1e-8, "gradient norm {}", norm(&g));
    }

    /// Central finite differences of the loss computed through the plain
    /// integrator path.
    fn fd_gradient(net: &HamiltonianNet, traj: &Trajectory, step: f64) -> Vec<f64> {
        (0..net.params().len())
            .map(|i| {
                let (mut a, mut b) = (net.clone(), net.clone());
                a.params_mut()[i] += step;
                b.params_mut()[i] -= step;
                let la = simulation_loss(&a, a.structure(), traj, InitialState::Measured).unwrap();
                let lb = simulation_loss(&b, b.structure(), traj, InitialState::Measured).unwrap();
                (la - lb) / (2.0 * step)
            })
            .collect()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for steps in [2usize, 10, 50] {
            let traj = noisy_duffing(steps, 40 + steps as u64);
            let net = HamiltonianNet::uniform(1, &[0], 4, 1.0, &mut rng);
            let (_, g) = simulation_loss_grad(&net, net.structure(), &traj, InitialState::Measured).unwrap();
            let fd = fd_gradient(&net, &traj, 1e-5);
            for (i, (a, b)) in g.iter().zip(&fd).enumerate() {
                if a.abs() > 1e-8 {
                    let rel = (a - b).abs() / a.abs().max(b.abs());
                    assert!(rel < 1e-5, "steps {steps} param {i}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn chunked_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let traj = noisy_duffing(40, 9);
        let net = HamiltonianNet::uniform(1, &[0], 4, 1.0, &mut rng);
        let (loss, g) = simulation_loss_grad_chunked(&net, net.structure(), &traj, InitialState::Known, Some(7)).unwrap();
        let chunked = |n: &HamiltonianNet| trajectory_loss(n, &traj, InitialState::Known, Some(7), None).unwrap();
        assert!((chunked(&net) - loss).abs() < 1e-15);
        for i in 0..g.len() {
            let (mut a, mut b) = (net.clone(), net.clone());
            a.params_mut()[i] += 1e-5;
            b.params_mut()[i] -= 1e-5;
            let fd = (chunked(&a) - chunked(&b)) / 2e-5;
            if g[i].abs() > 1e-8 {
                assert!((g[i] - fd).abs() / g[i].abs() < 1e-5, "param {i}");
            }
        }
        // A single chunk spanning the trajectory is the full rollout.
        let full = trajectory_loss(&net, &traj, InitialState::Known, None, None).unwrap();
        let one = trajectory_loss(&net, &traj, InitialState::Known, Some(40), None).unwrap();
        assert_eq!(full, one);
    }

    #[test]
    fn loss_matches_external_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let traj = noisy_duffing(100, 10);
        let net = HamiltonianNet::glorot(1, &[0], 16, 5);
        let _ = &mut rng;
        let x0 = traj.initial_state(InitialState::Known).unwrap();
        let states = rollout(&net, &x0, traj.u.view(), traj.ts).unwrap();
        let external: f64 = (1..traj.len())
            .map(|k| {
                let r: Vec<f64> = (0..2).map(|i| traj.y[[k, i]] - states[[k, i]]).collect();
                norm(&r)
            })
            .sum::<f64>()
            / traj.len() as f64;
        let (l, _) = simulation_loss_grad(&net, net.structure(), &traj, InitialState::Known).unwrap();
        assert!((l - external).abs() < 1e-12);
        let l2 = simulation_loss(&net, net.structure(), &traj, InitialState::Known).unwrap();
        assert!((l2 - external).abs() < 1e-12);
    }

    #[test]
    fn divergence_is_reported() {
        let mut net = HamiltonianNet::zeros(1, &[0], 1);
        // An infinite output weight makes every field evaluation non-finite.
        net.params_mut().copy_from_slice(&[1.0, 0.0, 0.0, f64::INFINITY, 0.0]);
        let traj = noisy_duffing(20, 1);
        let err = simulation_loss_grad(&net, net.structure(), &traj, InitialState::Known).unwrap_err();
        assert!(matches!(err, Error::Diverged { .. }));
    }

    #[test]
    fn derivative_loss_examples() {
        let zero = Model::Hnn(HamiltonianNet::zeros(1, &[0], 3));
        let one = DerivativeBatch {
            x: Array2::zeros((1, 2)),
            target: Array2::from_shape_vec((1, 2), vec![1.0, 0.0]).unwrap(),
            u: Array2::zeros((1, 1)),
        };
        assert_eq!(derivative_loss(&zero, &one).unwrap(), 1.0);

        // Targets x' = G u for the zero net.
        let forced = DerivativeBatch {
            x: Array2::from_shape_fn((5, 2), |(k, i)| (k + i) as f64 * 0.1),
            target: Array2::from_shape_fn((5, 2), |(k, i)| if i == 1 { k as f64 } else { 0.0 }),
            u: Array2::from_shape_fn((5, 1), |(k, _)| k as f64),
        };
        assert_eq!(derivative_loss(&zero, &forced).unwrap(), 0.0);

        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let net = HamiltonianNet::uniform(2, &[1], 5, 1.0, &mut rng);
        let mlp = BlackBoxNet::uniform(2, 1, 5, 1.0, &mut rng);
        let x = Array2::from_shape_fn((8, 4), |_| rng.random_range(-1.0..1.0));
        let u = Array2::from_shape_fn((8, 1), |_| rng.random_range(-1.0..1.0));
        for model in [Model::Hnn(net), Model::Mlp(mlp)] {
            let mut target = Array2::zeros((8, 4));
            let mut f = vec![0.0; 4];
            for k in 0..8 {
                model.eval(&x.row(k).to_vec(), &u.row(k).to_vec(), &mut f);
                target.row_mut(k).iter_mut().zip(&f).for_each(|(a, b)| *a = *b);
            }
            let batch = DerivativeBatch {
                x: x.clone(),
                target,
                u: u.clone(),
            };
            assert!(derivative_loss(&model, &batch).unwrap() < 1e-14);
        }
    }

    #[test]
    fn derivative_gradients_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let batch = DerivativeBatch {
            x: Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0)),
            target: Array2::from_shape_fn((6, 4), |_| rng.random_range(-1.0..1.0)),
            u: Array2::from_shape_fn((6, 1), |_| rng.random_range(-1.0..1.0)),
        };
        let models = [
            Model::Hnn(HamiltonianNet::uniform(2, &[1], 4, 1.0, &mut rng)),
            Model::Mlp(BlackBoxNet::uniform(2, 1, 4, 1.0, &mut rng)),
        ];
        for model in models {
            let (_, g) = derivative_loss_grad(&model, &batch).unwrap();
            for i in 0..g.len() {
                let (mut a, mut b) = (model.clone(), model.clone());
                a.params_mut()[i] += 1e-6;
                b.params_mut()[i] -= 1e-6;
                let fd = (derivative_loss(&a, &batch).unwrap() - derivative_loss(&b, &batch).unwrap()) / 2e-6;
                assert!((fd - g[i]).abs() < 1e-7, "{} param {i}: {fd} vs {}", model.kind(), g[i]);
            }
        }
    }

    #[test]
    fn gradcheck_diagnostic_detects_faults() {
        let ok = check_rollout_gradient(10, 4, 1, GradFault::None).unwrap();
        assert!(ok.passed(), "{ok:?}");
        assert!(ok.checked > 0);
        let bad = check_rollout_gradient(10, 4, 1, GradFault::SignFlip).unwrap();
        assert!(!bad.passed());
        let dir = check_directional_derivative(50, 16, 2, GradFault::None).unwrap();
        assert!(dir.passed(), "{dir:?}");
        assert!(!check_directional_derivative(50, 16, 2, GradFault::SignFlip).unwrap().passed());
    }

    #[test]
    fn adam_examples() {
        let cfg = TrainConfig::default();
        let mut theta = vec![1.0, -2.0, 3.0];
        let mut state = AdamState::new(3);
        adam_step(&mut theta, &[0.0; 3], &mut state, &cfg).unwrap();
        assert_eq!(theta, vec![1.0, -2.0, 3.0]);

        // Independent transcription of the first two updates.
        let g = [0.5, -2.0, 1e-3];
        let mut theta = vec![0.0; 3];
        let mut state = AdamState::new(3);
        adam_step(&mut theta, &g, &mut state, &cfg).unwrap();
        let (b1, b2, lr, eps) = (0.9f64, 0.999f64, 1e-3, 1e-8);
        for i in 0..3 {
            let m = (1.0 - b1) * g[i];
            let v = (1.0 - b2) * g[i] * g[i];
            let expected = -lr * (m / (1.0 - b1)) / ((v / (1.0 - b2)).sqrt() + eps);
            assert!((theta[i] - expected).abs() < 1e-15);
            assert!((theta[i] + lr * g[i].signum()).abs() < 1e-6);
        }
        adam_step(&mut theta, &g, &mut state, &cfg).unwrap();
        assert_eq!(state.step, 2);
        for i in 0..3 {
            let m = (1.0 - b1) * g[i] * (1.0 + b1);
            let v = (1.0 - b2) * g[i] * g[i] * (1.0 + b2);
            assert!((state.m[i] - m).abs() < 1e-15);
            assert!((state.v[i] - v).abs() < 1e-15);
            let step2 = -lr * (m / (1.0 - b1 * b1)) / ((v / (1.0 - b2 * b2)).sqrt() + eps);
            let step1 = -lr * g[i].signum() * (g[i].abs() / (g[i].abs() + eps));
            assert!((theta[i] - step1 - step2).abs() < 1e-12);
        }
        let err = adam_step(&mut theta, &[f64::NAN, 0.0, 0.0], &mut state, &cfg).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient { index: 0 }));
    }

    fn tiny_dataset(seed: u64) -> Dataset {
        let p = Protocol {
            realizations: 4,
            samples: 40,
            record_start: 0.5,
            split: SplitSizes {
                train: 2,
                validation: 1,
                test: 1,
            },
            ..Protocol::duffing()
        };
        generate(&SystemSpec::duffing(), &p, seed).unwrap()
    }

    #[test]
    fn fit_contract_and_determinism() {
        let ds = tiny_dataset(3);
        let cfg = TrainConfig {
            max_epochs: 30,
            patience: 100,
            hidden: 8,
            seed: 4,
            workers: 1,
            ..TrainConfig::default()
        };
        for kind in ModelKind::ALL {
            let (model, hist) = fit(kind, &ds, &cfg).unwrap();
            assert_eq!(model.kind(), kind);
            assert!(hist.epochs.len() <= 30);
            assert!(hist.best_epoch <= hist.last_epoch().unwrap());
            let (model2, hist2) = fit(kind, &ds, &TrainConfig { workers: 3, ..cfg.clone() }).unwrap();
            assert_eq!(hist, hist2);
            assert!(model.params().iter().zip(model2.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
            let best = hist.epochs[hist.best_epoch].val_loss;
            assert!(hist.epochs.iter().all(|r| r.val_loss >= best));
        }
    }

    #[test]
    fn warmup_runs_before_the_main_stage() {
        let ds = tiny_dataset(3);
        let cfg = TrainConfig {
            max_epochs: 6,
            patience: 100,
            warmup_epochs: 4,
            warmup_chunk_len: 10,
            hidden: 8,
            seed: 4,
            workers: 1,
            ..TrainConfig::default()
        };
        let (model, hist) = fit(ModelKind::OeHnn, &ds, &cfg).unwrap();
        assert_eq!(hist.epochs.len(), 10);
        assert!(hist.epochs.iter().enumerate().all(|(i, r)| r.epoch == i));
        // The main stage re-scores the best warm-up model first.
        let warm_best = hist.epochs[..4].iter().map(|r| r.val_loss).fold(f64::INFINITY, f64::min);
        assert_eq!(hist.epochs[4].val_loss, warm_best);
        // Warm-up training losses come from short sub-rollouts.
        let warm_only = fit(ModelKind::OeHnn, &ds, &TrainConfig { max_epochs: 4, chunk_len: Some(10), warmup_epochs: 0, ..cfg.clone() }).unwrap().1;
        assert_eq!(&hist.epochs[..4], &warm_only.epochs[..]);
        let scored = model_simulation_loss(&model, &ds.validation[0], cfg.initial_state, &ds.system.structure()).unwrap();
        assert_eq!(scored, hist.best_val_loss);

        // Derivative-matching models ignore the warm-up.
        let (_, hist) = fit(ModelKind::Mlp, &ds, &cfg).unwrap();
        assert_eq!(hist.epochs.len(), 6);
        assert!(fit(ModelKind::OeHnn, &ds, &TrainConfig { warmup_chunk_len: 1, ..cfg }).is_err());
    }

    #[test]
    fn fit_rejects_bad_configs() {
        let ds = tiny_dataset(3);
        let cfg = TrainConfig {
            loss: Some(LossKind::Simulation),
            ..TrainConfig::default()
        };
        assert!(fit(ModelKind::Mlp, &ds, &cfg).is_err());
        assert!(fit(ModelKind::OeHnn, &ds, &TrainConfig { patience: 0, ..TrainConfig::default() }).is_err());
        assert!(fit(ModelKind::OeHnn, &ds, &TrainConfig { chunk_len: Some(1), ..TrainConfig::default() }).is_err());
        let mut empty = ds.clone();
        empty.validation.clear();
        assert!(fit(ModelKind::OeHnn, &empty, &TrainConfig::default()).is_err());
    }

    #[test]
    fn all_diverged_is_a_hard_error() {
        let ds = tiny_dataset(3);
        let mut net = HamiltonianNet::zeros(1, &[0], 1);
        net.params_mut().copy_from_slice(&[1.0, 0.0, 0.0, f64::INFINITY, 0.0]);
        let err = fit_from(Model::OeHnn(net), &ds, &TrainConfig::default()).unwrap_err();
        assert!(matches!(err, Error::AllDiverged));
    }

    #[test]
    fn loss_and_gradient_decompose_over_trajectories() {
        let ds = tiny_dataset(8);
        let net = HamiltonianNet::glorot(1, &[0], 6, 1);
        let mut total = 0.0;
        let mut grad = vec![0.0; net.params().len()];
        for t in &ds.train {
            let (l, g) = simulation_loss_grad(&net, net.structure(), t, InitialState::Known).unwrap();
            total += l;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
        }
        let mut joint = vec![0.0; net.params().len()];
        let mut joint_loss = 0.0;
        for t in &ds.train {
            joint_loss += trajectory_loss(&net, t, InitialState::Known, None, Some(&mut joint)).unwrap();
        }
        assert!((total - joint_loss).abs() < 1e-15);
        for (a, b) in grad.iter().zip(&joint) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
