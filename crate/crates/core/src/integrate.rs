//! Fixed-step integration with zero-order-hold inputs.
//!
//! The step size always equals the sampling period: input row `k` is held
//! constant on `[k h, (k + 1) h)`.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};

/// Continuous-time dynamics `x' = f(x, u)`.
pub trait VectorField: Sync {
    fn state_dim(&self) -> usize;
    fn input_dim(&self) -> usize;
    fn eval(&self, x: &[f64], u: &[f64], dx: &mut [f64]);
}

impl<T: VectorField + ?Sized> VectorField for &T {
    fn state_dim(&self) -> usize {
        (**self).state_dim()
    }
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn eval(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        (**self).eval(x, u, dx)
    }
}

/// Adapts a closure into a [`VectorField`].
pub struct FnField<F> {
    state_dim: usize,
    input_dim: usize,
    f: F,
}

impl<F> FnField<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Sync,
{
    pub fn new(state_dim: usize, input_dim: usize, f: F) -> Self {
        FnField {
            state_dim,
            input_dim,
            f,
        }
    }
}

impl<F> VectorField for FnField<F>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Sync,
{
    fn state_dim(&self) -> usize {
        self.state_dim
    }
    fn input_dim(&self) -> usize {
        self.input_dim
    }
    fn eval(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        (self.f)(x, u, dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    #[default]
    Rk4,
    Euler,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub method: Method,
    pub step: f64,
}

impl IntegratorConfig {
    pub fn rk4(step: f64) -> Result<Self> {
        let cfg = IntegratorConfig {
            method: Method::Rk4,
            step,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0 && self.step.is_finite()) {
            return Err(Error::invalid("integrator step", format!("{} is not positive", self.step)));
        }
        Ok(())
    }
}

/// Scratch buffers for allocation-free stepping.
#[derive(Debug, Clone)]
pub struct Stepper {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    tmp: Vec<f64>,
}

impl Stepper {
    pub fn new(dim: usize) -> Self {
        Stepper {
            k1: vec![0.0; dim],
            k2: vec![0.0; dim],
            k3: vec![0.0; dim],
            k4: vec![0.0; dim],
            tmp: vec![0.0; dim],
        }
    }

    /// Advances `x` by one step into `out`. Returns `false` when any stage
    /// derivative or the result is non-finite.
    pub fn step_into<F: VectorField + ?Sized>(
        &mut self,
        method: Method,
        field: &F,
        x: &[f64],
        u: &[f64],
        h: f64,
        out: &mut [f64],
    ) -> bool {
        match method {
            Method::Euler => {
                field.eval(x, u, &mut self.k1);
                for i in 0..x.len() {
                    out[i] = x[i] + h * self.k1[i];
                }
            }
            Method::Rk4 => {
                field.eval(x, u, &mut self.k1);
                for i in 0..x.len() {
                    self.tmp[i] = x[i] + 0.5 * h * self.k1[i];
                }
                field.eval(&self.tmp, u, &mut self.k2);
                for i in 0..x.len() {
                    self.tmp[i] = x[i] + 0.5 * h * self.k2[i];
                }
                field.eval(&self.tmp, u, &mut self.k3);
                for i in 0..x.len() {
                    self.tmp[i] = x[i] + h * self.k3[i];
                }
                field.eval(&self.tmp, u, &mut self.k4);
                for i in 0..x.len() {
                    out[i] = x[i]
                        + h / 6.0 * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
                }
            }
        }
        out.iter().all(|v| v.is_finite())
    }
}

/// One classical RK4 step with `u` held over the whole step.
pub fn step<F: VectorField + ?Sized>(field: &F, x: &[f64], u: &[f64], h: f64) -> Result<Vec<f64>> {
    IntegratorConfig::rk4(h)?;
    check_len("state", field.state_dim(), x.len())?;
    check_len("input", field.input_dim(), u.len())?;
    let mut out = vec![0.0; x.len()];
    if !Stepper::new(x.len()).step_into(Method::Rk4, field, x, u, h, &mut out) {
        return Err(Error::Diverged { step: 0 });
    }
    Ok(out)
}

/// Result of a free-run simulation that may stop early.
#[derive(Debug, Clone)]
pub struct Simulation {
    /// States produced before divergence (all `N` rows if none occurred).
    pub states: Array2<f64>,
    /// Step index at which a non-finite state appeared.
    pub diverged_at: Option<usize>,
}

/// Free-run simulation that keeps the rows computed before a divergence.
pub fn simulate<F: VectorField + ?Sized>(
    field: &F,
    cfg: IntegratorConfig,
    x0: &[f64],
    u_seq: ArrayView2<f64>,
) -> Result<Simulation> {
    cfg.validate()?;
    let d = field.state_dim();
    check_len("initial state", d, x0.len())?;
    check_len("input columns", field.input_dim(), u_seq.ncols())?;
    let n = u_seq.nrows();
    if n == 0 {
        return Err(Error::invalid("input sequence", "at least one sample is required"));
    }
    let mut states = Array2::zeros((n, d));
    states.row_mut(0).iter_mut().zip(x0).for_each(|(s, v)| *s = *v);
    let mut stepper = Stepper::new(d);
    let mut x = x0.to_vec();
    let mut next = vec![0.0; d];
    let mut u = vec![0.0; u_seq.ncols()];
    for k in 0..n - 1 {
        u.iter_mut().zip(u_seq.row(k)).for_each(|(a, b)| *a = *b);
        if !stepper.step_into(cfg.method, field, &x, &u, cfg.step, &mut next) {
            let kept = states.slice(ndarray::s![..=k, ..]).to_owned();
            return Ok(Simulation {
                states: kept,
                diverged_at: Some(k),
            });
        }
        std::mem::swap(&mut x, &mut next);
        states.row_mut(k + 1).iter_mut().zip(&x).for_each(|(s, v)| *s = *v);
    }
    Ok(Simulation {
        states,
        diverged_at: None,
    })
}

/// RK4 rollout returning the states at `t = 0, h, ..., (N - 1) h`.
pub fn rollout<F: VectorField + ?Sized>(
    field: &F,
    x0: &[f64],
    u_seq: ArrayView2<f64>,
    h: f64,
) -> Result<Array2<f64>> {
    let sim = simulate(field, IntegratorConfig::rk4(h)?, x0, u_seq)?;
    match sim.diverged_at {
        Some(step) => Err(Error::Diverged { step }),
        None => Ok(sim.states),
    }
}
