//! Multisine excitation and measurement noise.

use std::f64::consts::TAU;

use ndarray::{Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `u(t) = amplitude * sum_k sin(2 pi k f0 t + phase_k)`, `k = 1..=K`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultisineSpec {
    pub f0: f64,
    pub phases: Vec<f64>,
    pub amplitude: f64,
}

impl MultisineSpec {
    /// Unit-amplitude multisine.
    pub fn new(f0: f64, phases: Vec<f64>) -> Result<Self> {
        Self::with_amplitude(f0, phases, 1.0)
    }

    pub fn with_amplitude(f0: f64, phases: Vec<f64>, amplitude: f64) -> Result<Self> {
        let spec = MultisineSpec {
            f0,
            phases,
            amplitude,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Multisine with `harmonics` phases drawn by [`sample_phases`].
    pub fn random<R: Rng + ?Sized>(harmonics: usize, f0: f64, amplitude: f64, rng: &mut R) -> Result<Self> {
        if harmonics == 0 {
            return Err(Error::invalid("multisine", "needs at least one harmonic"));
        }
        Self::with_amplitude(f0, sample_phases(harmonics, rng), amplitude)
    }

    /// [`MultisineSpec::random`] with phases from a ChaCha8 generator seeded by `seed`.
    pub fn seeded(harmonics: usize, f0: f64, amplitude: f64, seed: u64) -> Result<Self> {
        Self::random(harmonics, f0, amplitude, &mut rand_chacha::ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn harmonics(&self) -> usize {
        self.phases.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.phases.is_empty() {
            return Err(Error::invalid("multisine", "needs at least one harmonic"));
        }
        if !(self.f0 > 0.0 && self.f0.is_finite()) {
            return Err(Error::invalid("multisine", format!("base frequency {} is not positive", self.f0)));
        }
        if !self.amplitude.is_finite() {
            return Err(Error::invalid("multisine", "amplitude must be finite"));
        }
        if let Some(p) = self.phases.iter().find(|p| !(0.0..TAU).contains(*p)) {
            return Err(Error::invalid("multisine", format!("phase {p} outside [0, 2pi)")));
        }
        Ok(())
    }

    pub fn value(&self, t: f64) -> f64 {
        let w = TAU * self.f0 * t;
        let sum: f64 = self
            .phases
            .iter()
            .enumerate()
            .map(|(k, phase)| ((k + 1) as f64 * w + phase).sin())
            .sum();
        self.amplitude * sum
    }

    /// Samples `u(k ts)` for `k = 0..n`.
    pub fn sample(&self, ts: f64, n: usize) -> Vec<f64> {
        (0..n).map(|k| self.value(k as f64 * ts)).collect()
    }
}

pub fn multisine_value(t: f64, spec: &MultisineSpec) -> f64 {
    spec.value(t)
}

/// Independent uniform phases on `[0, 2 pi)`.
pub fn sample_phases<R: Rng + ?Sized>(harmonics: usize, rng: &mut R) -> Vec<f64> {
    let dist = Uniform::new(0.0, TAU).expect("valid phase range");
    (0..harmonics).map(|_| dist.sample(rng)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSpec {
    /// Per-channel variance of the additive measurement noise.
    pub variance: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.variance >= 0.0 && self.variance.is_finite()) {
            return Err(Error::invalid("noise", format!("variance {} is negative", self.variance)));
        }
        Ok(())
    }
}

/// Returns `clean + v` with `v` i.i.d. zero-mean Gaussian of the given variance.
pub fn add_noise<R: Rng + ?Sized>(clean: ArrayView2<f64>, spec: &NoiseSpec, rng: &mut R) -> Result<Array2<f64>> {
    spec.validate()?;
    let mut noisy = clean.to_owned();
    if spec.variance == 0.0 {
        return Ok(noisy);
    }
    let normal = Normal::new(0.0, spec.variance.sqrt()).expect("finite standard deviation");
    noisy.iter_mut().for_each(|v| *v += normal.sample(rng));
    Ok(noisy)
}
