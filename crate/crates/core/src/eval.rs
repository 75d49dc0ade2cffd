//! Test-set simulation, RMSE, and energy drift.

use std::path::Path;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{fmt_f64, InitialState, Trajectory};
use crate::error::{Error, Result};
use crate::integrate::{simulate, IntegratorConfig, VectorField};
use crate::netmodel::{HamiltonianNet, Model};

/// Signal the simulated states are compared against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reference {
    /// Noiseless simulated states.
    #[default]
    True,
    /// Noisy measurements.
    Measured,
}

impl std::str::FromStr for Reference {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "true" => Ok(Reference::True),
            "measured" => Ok(Reference::Measured),
            other => Err(Error::invalid("reference", format!("unknown reference {other:?}, expected true or measured"))),
        }
    }
}

/// Per-column root mean square of `simulated - reference`.
pub fn rmse(simulated: ArrayView2<f64>, reference: ArrayView2<f64>) -> Result<Vec<f64>> {
    if simulated.dim() != reference.dim() {
        return Err(Error::Dimension {
            context: "rmse operands",
            expected: reference.len(),
            actual: simulated.len(),
        });
    }
    let (rows, cols) = simulated.dim();
    if rows == 0 {
        return Err(Error::invalid("rmse", "needs at least one row"));
    }
    Ok((0..cols)
        .map(|c| {
            let sse: f64 = simulated
                .column(c)
                .iter()
                .zip(reference.column(c))
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (sse / rows as f64).sqrt()
        })
        .collect())
}

/// `q`, `p` for one mass; `q1..qn`, `p1..pn` otherwise.
pub fn state_labels(state_dim: usize) -> Vec<String> {
    let n = state_dim / 2;
    if n == 1 {
        return vec!["q".into(), "p".into()];
    }
    (1..=n)
        .map(|i| format!("q{i}"))
        .chain((1..=n).map(|i| format!("p{i}")))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryMetrics {
    pub name: String,
    pub diverged: bool,
    /// First step that produced a non-finite state.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub diverged_at: Option<usize>,
    /// Empty when the rollout diverged.
    pub rmse: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DriftStats {
    pub max: f64,
    pub mean: f64,
    pub steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub kind: String,
    pub reference: Reference,
    pub initial_state: InitialState,
    pub labels: Vec<String>,
    /// Pooled over every non-diverged test trajectory.
    pub rmse: Vec<f64>,
    pub diverged: usize,
    pub trajectories: Vec<TrajectoryMetrics>,
    /// Unforced drift of `H` from each test initial state; Hamiltonian models only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub energy_drift: Option<DriftStats>,
}

impl Metrics {
    /// RMSE used for ranking: infinite in every coordinate if any test
    /// trajectory diverged.
    pub fn ranking_rmse(&self) -> Vec<f64> {
        if self.diverged > 0 {
            vec![f64::INFINITY; self.rmse.len()]
        } else {
            self.rmse.clone()
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::invalid("metrics report", e.to_string()))
    }

    pub fn write_report(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml()?).map_err(|e| Error::io(path, e))
    }
}

struct Rollout {
    states: Array2<f64>,
    diverged_at: Option<usize>,
}

fn rollout_trajectory<F: VectorField + ?Sized>(field: &F, traj: &Trajectory, init: InitialState) -> Result<Rollout> {
    let x0 = traj.initial_state(init)?;
    let sim = simulate(field, IntegratorConfig::rk4(traj.ts)?, &x0, traj.u.view())?;
    Ok(Rollout {
        states: sim.states,
        diverged_at: sim.diverged_at,
    })
}

/// Simulates every test trajectory with `field` and scores it.
pub fn evaluate_field<F: VectorField + ?Sized>(
    field: &F,
    kind: &str,
    test: &[Trajectory],
    reference: Reference,
    init: InitialState,
) -> Result<Metrics> {
    if test.is_empty() {
        return Err(Error::invalid("evaluation", "test split is empty"));
    }
    let d = field.state_dim();
    for t in test {
        if t.state_dim() != d || t.input_dim() != field.input_dim() {
            return Err(Error::invalid(
                "evaluation",
                format!(
                    "model has {} states and {} inputs but trajectory {} has {} and {}",
                    d,
                    field.input_dim(),
                    t.name,
                    t.state_dim(),
                    t.input_dim()
                ),
            ));
        }
        if reference == Reference::True && t.x_true.is_none() {
            return Err(Error::invalid(
                "evaluation",
                format!("trajectory {} has no stored true states", t.name),
            ));
        }
    }
    let rollouts = test
        .par_iter()
        .map(|t| rollout_trajectory(field, t, init))
        .collect::<Result<Vec<_>>>()?;

    let mut per = Vec::with_capacity(test.len());
    let mut sse = vec![0.0; d];
    let mut rows = 0usize;
    for (t, r) in test.iter().zip(&rollouts) {
        let target = match reference {
            Reference::True => t.x_true.as_ref().expect("checked above").view(),
            Reference::Measured => t.y.view(),
        };
        if let Some(step) = r.diverged_at {
            per.push(TrajectoryMetrics {
                name: t.name.clone(),
                diverged: true,
                diverged_at: Some(step),
                rmse: Vec::new(),
            });
            continue;
        }
        let e = rmse(r.states.view(), target)?;
        for (acc, v) in sse.iter_mut().zip(&e) {
            *acc += v * v * t.len() as f64;
        }
        rows += t.len();
        per.push(TrajectoryMetrics {
            name: t.name.clone(),
            diverged: false,
            diverged_at: None,
            rmse: e,
        });
    }
    let diverged = per.iter().filter(|m| m.diverged).count();
    let pooled = if rows == 0 {
        vec![f64::NAN; d]
    } else {
        sse.iter().map(|v| (v / rows as f64).sqrt()).collect()
    };
    Ok(Metrics {
        kind: kind.to_string(),
        reference,
        initial_state: init,
        labels: state_labels(d),
        rmse: pooled,
        diverged,
        trajectories: per,
        energy_drift: None,
    })
}

/// [`evaluate_field`] for a trained model, adding energy-drift statistics
/// for Hamiltonian kinds.
pub fn evaluate(model: &Model, test: &[Trajectory], reference: Reference, init: InitialState) -> Result<Metrics> {
    let mut m = evaluate_field(model, model.kind().as_str(), test, reference, init)?;
    if let Some(net) = model.hamiltonian() {
        let drifts = test
            .par_iter()
            .map(|t| {
                let x0 = t.initial_state(init)?;
                match energy_drift(net, &x0, t.len() - 1, t.ts) {
                    Ok(v) => Ok(v),
                    Err(Error::Diverged { .. }) => Ok(f64::INFINITY),
                    Err(e) => Err(e),
                }
            })
            .collect::<Result<Vec<_>>>()?;
        m.energy_drift = Some(DriftStats {
            max: drifts.iter().cloned().fold(0.0, f64::max),
            mean: drifts.iter().sum::<f64>() / drifts.len() as f64,
            steps: test[0].len() - 1,
        });
    }
    Ok(m)
}

/// `max_k |H(x_k) - H(x_0)|` along the unforced RK4 rollout of the network.
pub fn energy_drift(net: &HamiltonianNet, x0: &[f64], steps: usize, h: f64) -> Result<f64> {
    let u = Array2::zeros((steps + 1, net.structure().input_dim()));
    let sim = simulate(net, IntegratorConfig::rk4(h)?, x0, u.view())?;
    if let Some(step) = sim.diverged_at {
        return Err(Error::Diverged { step });
    }
    let h0 = net.value(x0);
    Ok(sim
        .states
        .rows()
        .into_iter()
        .map(|r| (net.value(&r.to_vec()) - h0).abs())
        .fold(0.0, f64::max))
}

/// One row per method, one column per state coordinate.
pub fn comparison_csv(metrics: &[Metrics]) -> Result<String> {
    let first = metrics
        .first()
        .ok_or_else(|| Error::invalid("comparison table", "needs at least one model"))?;
    if metrics.iter().any(|m| m.labels != first.labels) {
        return Err(Error::invalid("comparison table", "models disagree on the state dimension"));
    }
    let mut out = format!("method,{},diverged\n", first.labels.join(","));
    for m in metrics {
        let cells: Vec<String> = m.rmse.iter().map(|v| fmt_f64(*v)).collect();
        out += &format!("{},{},{}\n", m.kind, cells.join(","), m.diverged);
    }
    Ok(out)
}

pub fn write_comparison(metrics: &[Metrics], path: &Path) -> Result<()> {
    std::fs::write(path, comparison_csv(metrics)?).map_err(|e| Error::io(path, e))
}
