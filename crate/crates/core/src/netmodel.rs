//! Learnable models: the scalar Hamiltonian network with its closed-form
//! state gradient, and the black-box derivative-regression network.
//!
//! Both networks keep their parameters in one flat vector so the optimizer
//! can treat them uniformly.
//!
//! `HamiltonianNet` layout (`d = 2n` state dimension, `n_h` hidden units):
//! `W1` (`n_h x d`, row-major), `b1` (`n_h`), `w2` (`n_h`), `b2` (1).
//!
//! `BlackBoxNet` layout (`k = d + m` inputs): `W1` (`n_h x k`), `b1` (`n_h`),
//! `W2` (`d x n_h`), `b2` (`d`).

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::fmt_f64;
use crate::dynamics::StructureMatrices;
use crate::error::{check_len, Error, Result};
use crate::integrate::VectorField;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "oe-hnn")]
    OeHnn,
    #[serde(rename = "hnn")]
    Hnn,
    #[serde(rename = "mlp")]
    Mlp,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::Mlp, ModelKind::Hnn, ModelKind::OeHnn];

    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::OeHnn => "oe-hnn",
            ModelKind::Hnn => "hnn",
            ModelKind::Mlp => "mlp",
        }
    }

    pub fn is_hamiltonian(&self) -> bool {
        !matches!(self, ModelKind::Mlp)
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oe-hnn" => Ok(ModelKind::OeHnn),
            "hnn" => Ok(ModelKind::Hnn),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::invalid("model kind", format!("{other:?} is not one of oe-hnn, hnn, mlp"))),
        }
    }
}

fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

/// `H(x) = w2 . tanh(W1 x + b1) + b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianNet {
    hidden: usize,
    input_map: Vec<usize>,
    structure: StructureMatrices,
    seed: u64,
    theta: Vec<f64>,
}

impl HamiltonianNet {
    pub fn param_count(n: usize, hidden: usize) -> usize {
        hidden * 2 * n + 2 * hidden + 1
    }

    pub fn zeros(n: usize, input_map: &[usize], hidden: usize) -> Self {
        HamiltonianNet {
            hidden,
            input_map: input_map.to_vec(),
            structure: StructureMatrices::canonical(n, input_map),
            seed: 0,
            theta: vec![0.0; Self::param_count(n, hidden)],
        }
    }

    pub fn from_params(n: usize, input_map: &[usize], hidden: usize, theta: Vec<f64>) -> Result<Self> {
        check_len("hamiltonian parameters", Self::param_count(n, hidden), theta.len())?;
        Ok(HamiltonianNet {
            theta,
            ..Self::zeros(n, input_map, hidden)
        })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn glorot(n: usize, input_map: &[usize], hidden: usize, seed: u64) -> Self {
        let mut net = Self::zeros(n, input_map, hidden);
        net.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = 2 * n;
        let b1 = glorot_bound(d, hidden);
        let b2 = glorot_bound(hidden, 1);
        let (w1, rest) = net.theta.split_at_mut(hidden * d);
        w1.iter_mut().for_each(|w| *w = rng.random_range(-b1..b1));
        rest[hidden..2 * hidden]
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-b2..b2));
        net
    }

    /// Every parameter uniform on `[-range, range]`.
    pub fn uniform<R: Rng + ?Sized>(n: usize, input_map: &[usize], hidden: usize, range: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(n, input_map, hidden);
        net.theta.iter_mut().for_each(|w| *w = rng.random_range(-range..range));
        net
    }

    pub fn n(&self) -> usize {
        self.structure.n()
    }

    pub fn state_dim(&self) -> usize {
        self.structure.state_dim()
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn input_map(&self) -> &[usize] {
        &self.input_map
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn structure(&self) -> &StructureMatrices {
        &self.structure
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn w1(&self) -> &[f64] {
        &self.theta[..self.hidden * self.state_dim()]
    }

    fn b1(&self) -> &[f64] {
        let o = self.hidden * self.state_dim();
        &self.theta[o..o + self.hidden]
    }

    fn w2(&self) -> &[f64] {
        let o = self.hidden * (self.state_dim() + 1);
        &self.theta[o..o + self.hidden]
    }

    pub fn b2(&self) -> f64 {
        self.theta[self.theta.len() - 1]
    }

    pub fn set_b2(&mut self, v: f64) {
        let last = self.theta.len() - 1;
        self.theta[last] = v;
    }

    #[inline]
    fn pre_activation(&self, j: usize, x: &[f64]) -> f64 {
        let d = self.state_dim();
        let row = &self.w1()[j * d..(j + 1) * d];
        self.b1()[j] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>()
    }

    pub fn value(&self, x: &[f64]) -> f64 {
        let w2 = self.w2();
        (0..self.hidden)
            .map(|j| w2[j] * self.pre_activation(j, x).tanh())
            .sum::<f64>()
            + self.b2()
    }

    /// `dH/dx = W1^T (w2 * sech^2(W1 x + b1))`.
    pub fn grad_x(&self, x: &[f64], out: &mut [f64]) {
        let d = self.state_dim();
        out[..d].fill(0.0);
        let (w1, w2) = (self.w1(), self.w2());
        for j in 0..self.hidden {
            let a = self.pre_activation(j, x).tanh();
            let coef = w2[j] * (1.0 - a * a);
            let row = &w1[j * d..(j + 1) * d];
            for i in 0..d {
                out[i] += coef * row[i];
            }
        }
    }

    /// Like [`grad_x`](Self::grad_x) but also stores `tanh(W1 x + b1)` in
    /// `act` for a later backward pass.
    pub fn grad_x_cached(&self, x: &[f64], act: &mut [f64], out: &mut [f64]) {
        let d = self.state_dim();
        out[..d].fill(0.0);
        let (w1, w2) = (self.w1(), self.w2());
        for j in 0..self.hidden {
            let a = self.pre_activation(j, x).tanh();
            act[j] = a;
            let coef = w2[j] * (1.0 - a * a);
            let row = &w1[j * d..(j + 1) * d];
            for i in 0..d {
                out[i] += coef * row[i];
            }
        }
    }

    /// Hessian-vector product `d^2H/dx^2 mu`, with `act` from
    /// [`grad_x_cached`](Self::grad_x_cached) at the same `x`.
    pub fn hessian_vec(&self, act: &[f64], mu: &[f64], out: &mut [f64]) {
        let d = self.state_dim();
        out[..d].fill(0.0);
        let (w1, w2) = (self.w1(), self.w2());
        for j in 0..self.hidden {
            let row = &w1[j * d..(j + 1) * d];
            let v: f64 = row.iter().zip(mu).map(|(w, m)| w * m).sum();
            let a = act[j];
            let c = -2.0 * w2[j] * a * (1.0 - a * a) * v;
            for i in 0..d {
                out[i] += c * row[i];
            }
        }
    }

    /// Backward pass of `mu . dH/dx`: accumulates its parameter gradient into
    /// `dtheta` and writes its state gradient (`d^2H/dx^2 mu`) to `dx`.
    pub fn grad_x_vjp(&self, x: &[f64], act: &[f64], mu: &[f64], dtheta: &mut [f64], dx: &mut [f64]) {
        let d = self.state_dim();
        let nh = self.hidden;
        dx[..d].fill(0.0);
        let (w1, w2) = (self.w1(), self.w2());
        let (dw1, rest) = dtheta.split_at_mut(nh * d);
        let (db1, rest) = rest.split_at_mut(nh);
        let dw2 = &mut rest[..nh];
        for j in 0..nh {
            let row = &w1[j * d..(j + 1) * d];
            let v: f64 = row.iter().zip(mu).map(|(w, m)| w * m).sum();
            let a = act[j];
            let s = 1.0 - a * a;
            let c = -2.0 * w2[j] * a * s * v;
            let ws = w2[j] * s;
            let drow = &mut dw1[j * d..(j + 1) * d];
            for i in 0..d {
                drow[i] += ws * mu[i] + c * x[i];
                dx[i] += c * row[i];
            }
            db1[j] += c;
            dw2[j] += s * v;
        }
    }

    /// Backward pass of `lambda . f(x, u)` for `f = J dH/dx + G u`.
    pub fn field_vjp(&self, x: &[f64], act: &[f64], lambda: &[f64], mu: &mut [f64], dtheta: &mut [f64], dx: &mut [f64]) {
        self.structure.apply_jt(lambda, mu);
        self.grad_x_vjp(x, act, mu, dtheta, dx);
    }
}

impl VectorField for HamiltonianNet {
    fn state_dim(&self) -> usize {
        HamiltonianNet::state_dim(self)
    }

    fn input_dim(&self) -> usize {
        self.input_map.len()
    }

    fn eval(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let mut g = [0.0; 16];
        let d = self.state_dim();
        if d <= 16 {
            self.grad_x(x, &mut g[..d]);
            self.structure.field_into(&g[..d], u, dx);
        } else {
            let mut g = vec![0.0; d];
            self.grad_x(x, &mut g);
            self.structure.field_into(&g, u, dx);
        }
    }
}

pub fn h_value(net: &HamiltonianNet, x: &[f64]) -> Result<f64> {
    check_len("state", net.state_dim(), x.len())?;
    Ok(net.value(x))
}

pub fn h_grad_x(net: &HamiltonianNet, x: &[f64]) -> Result<Vec<f64>> {
    check_len("state", net.state_dim(), x.len())?;
    let mut g = vec![0.0; x.len()];
    net.grad_x(x, &mut g);
    Ok(g)
}

/// `J dH/dx + G u` with explicitly supplied structure matrices.
pub fn oe_hnn_field(net: &HamiltonianNet, s: &StructureMatrices, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    check_len("structure state dimension", net.state_dim(), s.state_dim())?;
    check_len("state", s.state_dim(), x.len())?;
    check_len("input", s.input_dim(), u.len())?;
    let mut g = vec![0.0; x.len()];
    net.grad_x(x, &mut g);
    crate::dynamics::canonical_field(&g, u, s)
}

/// Single-hidden-layer tanh network `(x, u) -> x'`.
#[derive(Debug, Clone, PartialEq)]
pub struct BlackBoxNet {
    state_dim: usize,
    input_dim: usize,
    hidden: usize,
    seed: u64,
    theta: Vec<f64>,
}

impl BlackBoxNet {
    pub fn param_count(state_dim: usize, input_dim: usize, hidden: usize) -> usize {
        hidden * (state_dim + input_dim) + hidden + state_dim * hidden + state_dim
    }

    pub fn zeros(n: usize, input_dim: usize, hidden: usize) -> Self {
        let d = 2 * n;
        BlackBoxNet {
            state_dim: d,
            input_dim,
            hidden,
            seed: 0,
            theta: vec![0.0; Self::param_count(d, input_dim, hidden)],
        }
    }

    pub fn from_params(n: usize, input_dim: usize, hidden: usize, theta: Vec<f64>) -> Result<Self> {
        check_len("black-box parameters", Self::param_count(2 * n, input_dim, hidden), theta.len())?;
        Ok(BlackBoxNet {
            theta,
            ..Self::zeros(n, input_dim, hidden)
        })
    }

    pub fn glorot(n: usize, input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut net = Self::zeros(n, input_dim, hidden);
        net.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = net.state_dim;
        let k = d + input_dim;
        let b1 = glorot_bound(k, hidden);
        let b2 = glorot_bound(hidden, d);
        let o2 = hidden * k + hidden;
        net.theta[..hidden * k]
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-b1..b1));
        net.theta[o2..o2 + d * hidden]
            .iter_mut()
            .for_each(|w| *w = rng.random_range(-b2..b2));
        net
    }

    pub fn uniform<R: Rng + ?Sized>(n: usize, input_dim: usize, hidden: usize, range: f64, rng: &mut R) -> Self {
        let mut net = Self::zeros(n, input_dim, hidden);
        net.theta.iter_mut().for_each(|w| *w = rng.random_range(-range..range));
        net
    }

    pub fn n(&self) -> usize {
        self.state_dim / 2
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &[f64] {
        &self.theta
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    fn offsets(&self) -> (usize, usize, usize) {
        let k = self.state_dim + self.input_dim;
        let o_b1 = self.hidden * k;
        let o_w2 = o_b1 + self.hidden;
        let o_b2 = o_w2 + self.state_dim * self.hidden;
        (o_b1, o_w2, o_b2)
    }

    /// Forward pass; stores hidden activations in `act`.
    pub fn forward_cached(&self, x: &[f64], u: &[f64], act: &mut [f64], out: &mut [f64]) {
        let (d, m, nh) = (self.state_dim, self.input_dim, self.hidden);
        let k = d + m;
        let (o_b1, o_w2, o_b2) = self.offsets();
        let th = &self.theta;
        for j in 0..nh {
            let row = &th[j * k..(j + 1) * k];
            let mut z = th[o_b1 + j];
            for i in 0..d {
                z += row[i] * x[i];
            }
            for i in 0..m {
                z += row[d + i] * u[i];
            }
            act[j] = z.tanh();
        }
        for r in 0..d {
            let row = &th[o_w2 + r * nh..o_w2 + (r + 1) * nh];
            out[r] = th[o_b2 + r] + row.iter().zip(&act[..nh]).map(|(w, a)| w * a).sum::<f64>();
        }
    }

    /// Accumulates the parameter gradient of `delta . f(x, u)`.
    pub fn backward(&self, x: &[f64], u: &[f64], act: &[f64], delta: &[f64], dtheta: &mut [f64]) {
        let (d, m, nh) = (self.state_dim, self.input_dim, self.hidden);
        let k = d + m;
        let (o_b1, o_w2, o_b2) = self.offsets();
        let th = &self.theta;
        for r in 0..d {
            dtheta[o_b2 + r] += delta[r];
            for j in 0..nh {
                dtheta[o_w2 + r * nh + j] += delta[r] * act[j];
            }
        }
        for j in 0..nh {
            let da: f64 = (0..d).map(|r| th[o_w2 + r * nh + j] * delta[r]).sum();
            let dz = da * (1.0 - act[j] * act[j]);
            dtheta[o_b1 + j] += dz;
            let drow = &mut dtheta[j * k..(j + 1) * k];
            for i in 0..d {
                drow[i] += dz * x[i];
            }
            for i in 0..m {
                drow[d + i] += dz * u[i];
            }
        }
    }
}

impl VectorField for BlackBoxNet {
    fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn input_dim(&self) -> usize {
        self.input_dim
    }

    fn eval(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        let mut act = vec![0.0; self.hidden];
        self.forward_cached(x, u, &mut act, dx);
    }
}

pub fn blackbox_field(net: &BlackBoxNet, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    check_len("state", net.state_dim, x.len())?;
    check_len("input", net.input_dim, u.len())?;
    let mut out = vec![0.0; x.len()];
    net.eval(x, u, &mut out);
    Ok(out)
}

/// A trained or trainable model of one of the three kinds.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    OeHnn(HamiltonianNet),
    Hnn(HamiltonianNet),
    Mlp(BlackBoxNet),
}

impl Model {
    /// Freshly initialized model of the given kind.
    pub fn init(kind: ModelKind, n: usize, input_map: &[usize], hidden: usize, seed: u64) -> Self {
        match kind {
            ModelKind::OeHnn => Model::OeHnn(HamiltonianNet::glorot(n, input_map, hidden, seed)),
            ModelKind::Hnn => Model::Hnn(HamiltonianNet::glorot(n, input_map, hidden, seed)),
            ModelKind::Mlp => Model::Mlp(BlackBoxNet::glorot(n, input_map.len(), hidden, seed)),
        }
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::OeHnn(_) => ModelKind::OeHnn,
            Model::Hnn(_) => ModelKind::Hnn,
            Model::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn hamiltonian(&self) -> Option<&HamiltonianNet> {
        match self {
            Model::OeHnn(h) | Model::Hnn(h) => Some(h),
            Model::Mlp(_) => None,
        }
    }

    pub fn params(&self) -> &[f64] {
        match self {
            Model::OeHnn(h) | Model::Hnn(h) => h.params(),
            Model::Mlp(b) => b.params(),
        }
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        match self {
            Model::OeHnn(h) | Model::Hnn(h) => h.params_mut(),
            Model::Mlp(b) => b.params_mut(),
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            Model::OeHnn(h) | Model::Hnn(h) => h.hidden(),
            Model::Mlp(b) => b.hidden(),
        }
    }

    pub fn seed(&self) -> u64 {
        match self {
            Model::OeHnn(h) | Model::Hnn(h) => h.seed(),
            Model::Mlp(b) => b.seed(),
        }
    }
}

impl VectorField for Model {
    fn state_dim(&self) -> usize {
        match self {
            Model::OeHnn(h) | Model::Hnn(h) => HamiltonianNet::state_dim(h),
            Model::Mlp(b) => b.state_dim,
        }
    }

    fn input_dim(&self) -> usize {
        match self {
            Model::OeHnn(h) | Model::Hnn(h) => h.input_map.len(),
            Model::Mlp(b) => b.input_dim,
        }
    }

    fn eval(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        match self {
            Model::OeHnn(h) | Model::Hnn(h) => h.eval(x, u, dx),
            Model::Mlp(b) => b.eval(x, u, dx),
        }
    }
}

/// Metadata block of a model file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelMeta {
    pub kind: ModelKind,
    /// Number of position coordinates; the state dimension is `2n`.
    pub n: usize,
    pub m: usize,
    pub n_h: usize,
    pub seed: u64,
    pub input_map: Vec<usize>,
    /// State normalization applied before the network; only `"none"` exists.
    pub normalization: String,
}

impl Model {
    pub fn meta(&self) -> ModelMeta {
        let (n, input_map) = match self {
            Model::OeHnn(h) | Model::Hnn(h) => (h.n(), h.input_map.clone()),
            Model::Mlp(b) => (b.n(), (0..b.input_dim).collect()),
        };
        ModelMeta {
            kind: self.kind(),
            n,
            m: input_map.len(),
            n_h: self.hidden(),
            seed: self.seed(),
            input_map,
            normalization: "none".into(),
        }
    }

    fn named_params(&self) -> Vec<(&'static str, usize, usize, &[f64])> {
        match self {
            Model::OeHnn(h) | Model::Hnn(h) => {
                let (nh, d) = (h.hidden, h.state_dim());
                vec![
                    ("W1", nh, d, h.w1()),
                    ("b1", nh, 1, h.b1()),
                    ("w2", nh, 1, h.w2()),
                    ("b2", 1, 1, &h.theta[h.theta.len() - 1..]),
                ]
            }
            Model::Mlp(b) => {
                let (nh, d, k) = (b.hidden, b.state_dim, b.state_dim + b.input_dim);
                let (o_b1, o_w2, o_b2) = b.offsets();
                vec![
                    ("W1", nh, k, &b.theta[..o_b1]),
                    ("b1", nh, 1, &b.theta[o_b1..o_w2]),
                    ("W2", d, nh, &b.theta[o_w2..o_b2]),
                    ("b2", d, 1, &b.theta[o_b2..]),
                ]
            }
        }
    }

    /// Renders the model file: a `[meta]` table and a `[params]` table of
    /// row-major arrays with 17 significant digits.
    pub fn to_file_string(&self) -> String {
        let meta = self.meta();
        let mut s = String::from("[meta]\n");
        s += &format!("kind = \"{}\"\n", meta.kind);
        s += &format!("n = {}\nm = {}\nn_h = {}\nseed = {}\n", meta.n, meta.m, meta.n_h, meta.seed);
        let map: Vec<String> = meta.input_map.iter().map(|i| i.to_string()).collect();
        s += &format!("input_map = [{}]\n", map.join(", "));
        s += &format!("normalization = \"{}\"\n\n[params]\n", meta.normalization);
        for (name, rows, cols, values) in self.named_params() {
            let fmt_row = |r: usize| {
                values[r * cols..(r + 1) * cols]
                    .iter()
                    .map(|v| fmt_f64(*v))
                    .collect::<Vec<_>>()
                    .join(", ")
            };
            if cols == 1 {
                s += &format!("{name} = [{}]\n", (0..rows).map(&fmt_row).collect::<Vec<_>>().join(", "));
            } else {
                s += &format!("{name} = [\n");
                for r in 0..rows {
                    s += &format!("  [{}],\n", fmt_row(r));
                }
                s += "]\n";
            }
        }
        s
    }
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    if model.seed() > i64::MAX as u64 {
        return Err(Error::invalid("model seed", "must fit in a signed 64-bit integer"));
    }
    fs::write(path, model.to_file_string()).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_model(&text, path)
}

/// Loads a model and checks its kind.
pub fn load_model_expecting(path: &Path, kind: ModelKind) -> Result<Model> {
    let model = load_model(path)?;
    if model.kind() != kind {
        return Err(Error::KindMismatch {
            expected: kind.to_string(),
            found: model.kind().to_string(),
        });
    }
    Ok(model)
}

pub fn parse_model(text: &str, path: &Path) -> Result<Model> {
    let perr = |msg: String| Error::parse(path, None, msg);
    let table: toml::Table = toml::from_str(text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start].lines().count().max(1) as u64);
        Error::parse(path, line, e.message().to_string())
    })?;
    for key in table.keys() {
        if key != "meta" && key != "params" {
            return Err(perr(format!("unexpected section [{key}]")));
        }
    }
    let meta: ModelMeta = table
        .get("meta")
        .ok_or_else(|| perr("missing [meta] section".into()))?
        .clone()
        .try_into()
        .map_err(|e: toml::de::Error| perr(format!("[meta]: {}", e.message())))?;
    if meta.normalization != "none" {
        return Err(perr(format!("unsupported normalization {:?}", meta.normalization)));
    }
    if meta.input_map.len() != meta.m {
        return Err(perr(format!("input_map has {} entries but m = {}", meta.input_map.len(), meta.m)));
    }
    if meta.n == 0 || meta.n_h == 0 {
        return Err(perr("n and n_h must be positive".into()));
    }
    if meta.input_map.iter().any(|i| *i >= meta.n) {
        return Err(perr("input_map refers to a missing mass".into()));
    }
    let params = table
        .get("params")
        .and_then(|p| p.as_table())
        .ok_or_else(|| perr("missing [params] section".into()))?;

    let (d, nh, m) = (2 * meta.n, meta.n_h, meta.m);
    let shapes: Vec<(&str, usize, usize)> = if meta.kind.is_hamiltonian() {
        vec![("W1", nh, d), ("b1", nh, 1), ("w2", nh, 1), ("b2", 1, 1)]
    } else {
        vec![("W1", nh, d + m), ("b1", nh, 1), ("W2", d, nh), ("b2", d, 1)]
    };
    for key in params.keys() {
        if !shapes.iter().any(|(n, _, _)| n == key) {
            return Err(perr(format!("unexpected parameter array {key}")));
        }
    }
    let mut theta = Vec::new();
    for (name, rows, cols) in shapes {
        let arr = params
            .get(name)
            .and_then(|v| v.as_array())
            .ok_or_else(|| perr(format!("missing parameter array {name}")))?;
        if arr.len() != rows {
            return Err(perr(format!("shape error: {name} has {} rows, expected {rows}", arr.len())));
        }
        for (r, row) in arr.iter().enumerate() {
            if cols == 1 {
                theta.push(number(row).ok_or_else(|| perr(format!("{name}[{r}] is not a number")))?);
            } else {
                let row = row
                    .as_array()
                    .ok_or_else(|| perr(format!("{name} row {r} is not an array")))?;
                if row.len() != cols {
                    return Err(perr(format!(
                        "shape error: {name} row {r} has {} columns, expected {cols}",
                        row.len()
                    )));
                }
                for (c, v) in row.iter().enumerate() {
                    theta.push(number(v).ok_or_else(|| perr(format!("{name}[{r}][{c}] is not a number")))?);
                }
            }
        }
    }
    if let Some(i) = theta.iter().position(|v| !v.is_finite()) {
        return Err(perr(format!("parameter {i} is not finite")));
    }
    let model = match meta.kind {
        ModelKind::OeHnn | ModelKind::Hnn => {
            let mut h = HamiltonianNet::from_params(meta.n, &meta.input_map, nh, theta)?;
            h.seed = meta.seed;
            if meta.kind == ModelKind::OeHnn {
                Model::OeHnn(h)
            } else {
                Model::Hnn(h)
            }
        }
        ModelKind::Mlp => {
            let mut b = BlackBoxNet::from_params(meta.n, m, nh, theta)?;
            b.seed = meta.seed;
            Model::Mlp(b)
        }
    };
    Ok(model)
}

fn number(v: &toml::Value) -> Option<f64> {
    v.as_float().or_else(|| v.as_integer().map(|i| i as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrate::rollout;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::Rng;

    fn fd_grad(net: &HamiltonianNet, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let (mut a, mut b) = (x.to_vec(), x.to_vec());
                a[i] += h;
                b[i] -= h;
                (net.value(&a) - net.value(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn single_unit() -> HamiltonianNet {
        // W1 = [1, 0], b1 = 0, w2 = 1, b2 = 0
        HamiltonianNet::from_params(1, &[0], 1, vec![1.0, 0.0, 0.0, 1.0, 0.0]).unwrap()
    }

    #[test]
    fn value_examples() {
        let zero = HamiltonianNet::zeros(1, &[0], 5);
        assert_eq!(h_value(&zero, &[0.3, -2.0]).unwrap(), 0.0);
        let mut constant = zero.clone();
        constant.set_b2(4.5);
        assert_eq!(h_value(&constant, &[0.3, -2.0]).unwrap(), 4.5);
        let h = h_value(&single_unit(), &[0.5, 0.3]).unwrap();
        assert!((h - 0.4621171573).abs() < 1e-10);
        assert!(h_value(&zero, &[0.3]).is_err());
    }

    #[test]
    fn gradient_examples() {
        let zero = HamiltonianNet::zeros(2, &[1], 3);
        assert_eq!(h_grad_x(&zero, &[0.1, 0.2, 0.3, 0.4]).unwrap(), vec![0.0; 4]);
        let net = single_unit();
        let x = [0.5, 0.3];
        let g = h_grad_x(&net, &x).unwrap();
        let fd = fd_grad(&net, &x, 1e-6);
        assert!((g[0] - 0.7864477).abs() < 1e-7);
        assert_eq!(g[1], 0.0);
        assert!((g[0] - fd[0]).abs() < 1e-9);
    }

    #[test]
    fn field_examples() {
        let zero = HamiltonianNet::zeros(1, &[0], 4);
        let s = zero.structure().clone();
        assert_eq!(oe_hnn_field(&zero, &s, &[0.4, 0.1], &[0.0]).unwrap(), vec![0.0, 0.0]);
        assert_eq!(oe_hnn_field(&zero, &s, &[0.4, 0.1], &[1.0]).unwrap(), vec![0.0, 1.0]);
        let wrong = StructureMatrices::canonical(2, &[1]);
        assert!(oe_hnn_field(&zero, &wrong, &[0.4, 0.1], &[1.0]).is_err());
    }

    #[test]
    fn blackbox_examples() {
        let zero = BlackBoxNet::zeros(1, 1, 6);
        assert_eq!(blackbox_field(&zero, &[0.2, 0.1], &[3.0]).unwrap(), vec![0.0, 0.0]);
        let mut bias = zero.clone();
        let len = bias.theta.len();
        bias.theta[len - 2] = 1.5;
        bias.theta[len - 1] = -0.5;
        assert_eq!(blackbox_field(&bias, &[0.2, 0.1], &[3.0]).unwrap(), vec![1.5, -0.5]);
        assert_eq!(blackbox_field(&bias, &[-7.0, 2.0], &[0.0]).unwrap(), vec![1.5, -0.5]);
        assert!(blackbox_field(&zero, &[0.2], &[3.0]).is_err());
    }

    /// Direct transcription of `W2 tanh(W1 [x; u] + b1) + b2` using named
    /// matrices rather than the flat layout helpers.
    fn blackbox_reference(theta: &[f64], d: usize, m: usize, nh: usize, x: &[f64], u: &[f64]) -> Vec<f64> {
        let k = d + m;
        let input: Vec<f64> = x.iter().chain(u).copied().collect();
        let w1 = |j: usize, i: usize| theta[j * k + i];
        let b1 = |j: usize| theta[nh * k + j];
        let w2 = |r: usize, j: usize| theta[nh * k + nh + r * nh + j];
        let b2 = |r: usize| theta[nh * k + nh + d * nh + r];
        let hidden: Vec<f64> = (0..nh)
            .map(|j| ((0..k).map(|i| w1(j, i) * input[i]).sum::<f64>() + b1(j)).tanh())
            .collect();
        (0..d).map(|r| (0..nh).map(|j| w2(r, j) * hidden[j]).sum::<f64>() + b2(r)).collect()
    }

    #[test]
    fn blackbox_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..20 {
            let net = BlackBoxNet::uniform(2, 1, 9, 1.0, &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let u = [rng.random_range(-1.0..1.0)];
            let got = blackbox_field(&net, &x, &u).unwrap();
            let want = blackbox_reference(net.params(), 4, 1, 9, &x, &u);
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blackbox_backward_matches_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(78);
        let net = BlackBoxNet::uniform(1, 1, 5, 1.0, &mut rng);
        let x = [0.3, -0.2];
        let u = [0.7];
        let delta = [0.4, -1.3];
        let mut act = vec![0.0; 5];
        let mut out = vec![0.0; 2];
        net.forward_cached(&x, &u, &mut act, &mut out);
        let mut grad = vec![0.0; net.params().len()];
        net.backward(&x, &u, &act, &delta, &mut grad);
        let obj = |n: &BlackBoxNet| {
            let f = blackbox_field(n, &x, &u).unwrap();
            f[0] * delta[0] + f[1] * delta[1]
        };
        for i in 0..grad.len() {
            let (mut a, mut b) = (net.clone(), net.clone());
            a.theta[i] += 1e-6;
            b.theta[i] -= 1e-6;
            let fd = (obj(&a) - obj(&b)) / 2e-6;
            assert!((fd - grad[i]).abs() < 1e-8, "param {i}: {fd} vs {}", grad[i]);
        }
    }

    #[test]
    fn hessian_and_parameter_vjp_match_fd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for n in [1usize, 2] {
            let net = HamiltonianNet::uniform(n, &[n - 1], 6, 1.0, &mut rng);
            let d = 2 * n;
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut act = vec![0.0; 6];
            let mut g = vec![0.0; d];
            net.grad_x_cached(&x, &mut act, &mut g);

            let mut hv = vec![0.0; d];
            net.hessian_vec(&act, &mu, &mut hv);
            let mut dtheta = vec![0.0; net.params().len()];
            let mut dx = vec![0.0; d];
            net.grad_x_vjp(&x, &act, &mu, &mut dtheta, &mut dx);
            for i in 0..d {
                assert!((hv[i] - dx[i]).abs() < 1e-14);
            }

            let form = |n: &HamiltonianNet, x: &[f64]| {
                let g = h_grad_x(n, x).unwrap();
                g.iter().zip(&mu).map(|(a, b)| a * b).sum::<f64>()
            };
            let h = 1e-6;
            for i in 0..d {
                let (mut a, mut b) = (x.clone(), x.clone());
                a[i] += h;
                b[i] -= h;
                let fd = (form(&net, &a) - form(&net, &b)) / (2.0 * h);
                assert!((fd - hv[i]).abs() < 1e-8, "hvp {i}: {fd} vs {}", hv[i]);
            }
            for i in 0..dtheta.len() {
                let (mut a, mut b) = (net.clone(), net.clone());
                a.theta[i] += h;
                b.theta[i] -= h;
                let fd = (form(&a, &x) - form(&b, &x)) / (2.0 * h);
                assert!((fd - dtheta[i]).abs() < 1e-8, "param {i}: {fd} vs {}", dtheta[i]);
            }
        }
    }

    #[test]
    fn glorot_initialization() {
        let net = HamiltonianNet::glorot(1, &[0], 200, 3);
        let bound = (6.0f64 / 202.0).sqrt();
        assert!(net.w1().iter().all(|w| w.abs() <= bound));
        assert!(net.b1().iter().all(|b| *b == 0.0));
        assert_eq!(net.b2(), 0.0);
        assert_eq!(net, HamiltonianNet::glorot(1, &[0], 200, 3));
        assert_ne!(net, HamiltonianNet::glorot(1, &[0], 200, 4));
    }

    #[test]
    fn model_file_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let dir = tempfile::tempdir().unwrap();
        let models = [
            Model::OeHnn(HamiltonianNet::uniform(1, &[0], 7, 1.0, &mut rng)),
            Model::Hnn(HamiltonianNet::uniform(2, &[1], 5, 1.0, &mut rng)),
            Model::Mlp(BlackBoxNet::uniform(2, 1, 4, 1.0, &mut rng)),
        ];
        for model in models {
            let path = dir.path().join(format!("{}.toml", model.kind()));
            save_model(&model, &path).unwrap();
            let back = load_model(&path).unwrap();
            assert_eq!(back.meta(), model.meta());
            assert!(back
                .params()
                .iter()
                .zip(model.params())
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let err = load_model_expecting(&dir.path().join("mlp.toml"), ModelKind::OeHnn).unwrap_err();
        assert!(matches!(err, Error::KindMismatch { .. }), "{err}");
    }

    #[test]
    fn model_file_shape_errors() {
        let model = Model::OeHnn(HamiltonianNet::glorot(1, &[0], 200, 1));
        let text = model.to_file_string();
        let broken = text.replace("n_h = 200", "n_h = 100");
        let err = parse_model(&broken, Path::new("m.toml")).unwrap_err().to_string();
        assert!(err.contains("shape"), "{err}");
        let garbage = parse_model("[meta]\nkind = \"oe-hnn\"\n", Path::new("m.toml"));
        assert!(garbage.is_err());
        let bad_kind = text.replace("oe-hnn", "resnet");
        assert!(parse_model(&bad_kind, Path::new("m.toml")).is_err());
    }

    #[test]
    fn translation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net = HamiltonianNet::uniform(2, &[1], 8, 1.0, &mut rng);
        let mut shifted = net.clone();
        shifted.set_b2(net.b2() + 3.25);
        let x = [0.1, -0.3, 0.2, 0.05];
        assert!((shifted.value(&x) - net.value(&x) - 3.25).abs() < 1e-12);
        assert_eq!(h_grad_x(&shifted, &x).unwrap(), h_grad_x(&net, &x).unwrap());
    }

    #[test]
    fn unforced_model_flow_conserves_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..5 {
            let net = HamiltonianNet::uniform(1, &[0], 16, 0.5, &mut rng);
            let u = Array2::zeros((501, 1));
            let x0 = [rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5)];
            let traj = rollout(&net, &x0, u.view(), 0.01).unwrap();
            let h0 = net.value(&x0);
            let drift = traj
                .rows()
                .into_iter()
                .map(|r| (net.value(&r.to_vec()) - h0).abs())
                .fold(0.0, f64::max);
            assert!(drift < 1e-6, "drift {drift}");
        }
    }

    proptest! {
        #[test]
        fn gradient_matches_fd(seed in any::<u64>(), two in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = if two { 2 } else { 1 };
            let net = HamiltonianNet::uniform(n, &[n - 1], 12, 1.0, &mut rng);
            let x: Vec<f64> = (0..2 * n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = h_grad_x(&net, &x).unwrap();
            let fd = fd_grad(&net, &x, 1e-6);
            let scale = g.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1e-8);
            for (a, b) in g.iter().zip(&fd) {
                prop_assert!((a - b).abs() / scale < 1e-6);
            }
        }

        #[test]
        fn skew_structure_makes_energy_rate_vanish(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let net = HamiltonianNet::uniform(2, &[1], 10, 1.0, &mut rng);
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let g = h_grad_x(&net, &x).unwrap();
            let f = oe_hnn_field(&net, net.structure(), &x, &[0.0]).unwrap();
            let rate: f64 = g.iter().zip(&f).map(|(a, b)| a * b).sum();
            prop_assert!(rate.abs() < 1e-12);
        }
    }
}
