//! Ground-truth benchmark systems and the canonical Hamiltonian vector field.
//!
//! States are ordered positions first, then momenta: `x = (q, p)`. A system
//! with `n` masses has state dimension `2n`. The benchmark systems are chains
//! of masses connected by springs: spring `i` joins mass `i - 1` (or the
//! ground for `i = 0`) to mass `i`, with elongation `q_i - q_{i-1}`. With the
//! cubic term enabled every spring follows the softening law
//! `F(d) = k d - k d^3`, which reduces to the Duffing oscillator
//! `m q'' + k q - k q^3 = u` for a single mass.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::integrate::VectorField;

/// Definition of a mass-spring chain benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemSpec {
    /// Mass values in kg, one per degree of freedom.
    pub masses: Vec<f64>,
    /// Spring constants in N/m; spring `i` ends at mass `i`.
    pub stiffnesses: Vec<f64>,
    /// Indices of the masses whose momentum receives an input force.
    /// Input channel `j` drives mass `input_map[j]`.
    pub input_map: Vec<usize>,
    /// Enables the cubic softening term of every spring.
    pub cubic: bool,
}

impl SystemSpec {
    pub fn new(masses: Vec<f64>, stiffnesses: Vec<f64>, input_map: Vec<usize>, cubic: bool) -> Result<Self> {
        let spec = SystemSpec {
            masses,
            stiffnesses,
            input_map,
            cubic,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Single Duffing oscillator with `m = k = 1`, forced on its momentum.
    pub fn duffing() -> Self {
        SystemSpec {
            masses: vec![1.0],
            stiffnesses: vec![1.0],
            input_map: vec![0],
            cubic: true,
        }
    }

    /// Two connected oscillators, `m1 = m2 = 0.5`, `k1 = k2 = 1`, forced on
    /// the second mass.
    pub fn coupled() -> Self {
        SystemSpec {
            masses: vec![0.5, 0.5],
            stiffnesses: vec![1.0, 1.0],
            input_map: vec![1],
            cubic: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.masses.is_empty() {
            return Err(Error::invalid("system", "at least one mass is required"));
        }
        if self.stiffnesses.len() != self.masses.len() {
            return Err(Error::invalid(
                "system",
                format!(
                    "{} masses need {} stiffnesses, got {}",
                    self.masses.len(),
                    self.masses.len(),
                    self.stiffnesses.len()
                ),
            ));
        }
        if let Some(m) = self.masses.iter().find(|m| !(**m > 0.0 && m.is_finite())) {
            return Err(Error::invalid("system", format!("mass {m} is not positive")));
        }
        if let Some(k) = self.stiffnesses.iter().find(|k| !(**k > 0.0 && k.is_finite())) {
            return Err(Error::invalid("system", format!("stiffness {k} is not positive")));
        }
        if let Some(i) = self.input_map.iter().find(|i| **i >= self.masses.len()) {
            return Err(Error::invalid(
                "system",
                format!("input mapped to mass {i}, but there are {} masses", self.masses.len()),
            ));
        }
        Ok(())
    }

    pub fn n_masses(&self) -> usize {
        self.masses.len()
    }

    pub fn state_dim(&self) -> usize {
        2 * self.masses.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_map.len()
    }

    pub fn structure(&self) -> StructureMatrices {
        StructureMatrices::canonical(self.n_masses(), &self.input_map)
    }

    /// Largest spring elongation magnitude at positions `q`.
    pub fn max_elongation(&self, q: &[f64]) -> f64 {
        (0..self.n_masses())
            .map(|i| {
                let prev = if i == 0 { 0.0 } else { q[i - 1] };
                (q[i] - prev).abs()
            })
            .fold(0.0, f64::max)
    }

    /// Force exerted by spring `i` at elongation `d`.
    fn spring_force(&self, i: usize, d: f64) -> f64 {
        let k = self.stiffnesses[i];
        if self.cubic {
            k * d - k * d * d * d
        } else {
            k * d
        }
    }

    fn spring_potential(&self, i: usize, d: f64) -> f64 {
        let k = self.stiffnesses[i];
        let d2 = d * d;
        if self.cubic {
            0.5 * k * d2 - 0.25 * k * d2 * d2
        } else {
            0.5 * k * d2
        }
    }

    /// Total energy `sum p_i^2 / 2 m_i + sum V_i(elongation_i)`.
    pub fn hamiltonian(&self, x: &[f64]) -> f64 {
        let n = self.n_masses();
        let (q, p) = x.split_at(n);
        let kinetic: f64 = p.iter().zip(&self.masses).map(|(p, m)| p * p / (2.0 * m)).sum();
        let potential: f64 = (0..n)
            .map(|i| {
                let prev = if i == 0 { 0.0 } else { q[i - 1] };
                self.spring_potential(i, q[i] - prev)
            })
            .sum();
        kinetic + potential
    }

    /// Analytic gradient of [`SystemSpec::hamiltonian`].
    pub fn hamiltonian_grad(&self, x: &[f64], out: &mut [f64]) {
        let n = self.n_masses();
        let (q, p) = x.split_at(n);
        let (gq, gp) = out.split_at_mut(n);
        for i in 0..n {
            gp[i] = p[i] / self.masses[i];
            gq[i] = 0.0;
        }
        for i in 0..n {
            let prev = if i == 0 { 0.0 } else { q[i - 1] };
            let f = self.spring_force(i, q[i] - prev);
            gq[i] += f;
            if i > 0 {
                gq[i - 1] -= f;
            }
        }
    }

    /// `x' = J dH/dx + G u` for the true system.
    pub fn field(&self, x: &[f64], u: &[f64], out: &mut [f64]) {
        let n = self.n_masses();
        let (q, p) = x.split_at(n);
        let (dq, dp) = out.split_at_mut(n);
        for i in 0..n {
            dq[i] = p[i] / self.masses[i];
            dp[i] = 0.0;
        }
        for i in 0..n {
            let prev = if i == 0 { 0.0 } else { q[i - 1] };
            let f = self.spring_force(i, q[i] - prev);
            dp[i] -= f;
            if i > 0 {
                dp[i - 1] += f;
            }
        }
        for (j, &mass) in self.input_map.iter().enumerate() {
            dp[mass] += u[j];
        }
    }

    fn checked_field(&self, masses: usize, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_len("system mass count", masses, self.n_masses())?;
        check_len("state", self.state_dim(), x.len())?;
        check_len("input", self.input_dim(), u.len())?;
        let mut out = vec![0.0; x.len()];
        self.field(x, u, &mut out);
        Ok(out)
    }
}

impl VectorField for SystemSpec {
    fn state_dim(&self) -> usize {
        SystemSpec::state_dim(self)
    }

    fn input_dim(&self) -> usize {
        SystemSpec::input_dim(self)
    }

    fn eval(&self, x: &[f64], u: &[f64], dx: &mut [f64]) {
        self.field(x, u, dx)
    }
}

/// Duffing oscillator field for a one-mass system with a scalar input.
pub fn duffing_field(x: &[f64], u: f64, spec: &SystemSpec) -> Result<Vec<f64>> {
    spec.checked_field(1, x, &[u])
}

/// Duffing oscillator energy `p^2/2m + k q^2/2 - k q^4/4`.
pub fn duffing_hamiltonian(x: &[f64], spec: &SystemSpec) -> Result<f64> {
    check_len("system mass count", 1, spec.n_masses())?;
    check_len("state", 2, x.len())?;
    Ok(spec.hamiltonian(x))
}

/// Field of the two-mass chain with the input on the second mass.
pub fn coupled_field(x: &[f64], u: f64, spec: &SystemSpec) -> Result<Vec<f64>> {
    spec.checked_field(2, x, &[u])
}

/// Fixed structure matrices `J`, `G`, `C`, stored dense and row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMatrices {
    n: usize,
    m: usize,
    ny: usize,
    j: Vec<f64>,
    g: Vec<f64>,
    c: Vec<f64>,
}

impl StructureMatrices {
    /// `J = [[0, I], [-I, 0]]`, `G` selecting the momenta named by
    /// `input_map`, and `C = I`.
    pub fn canonical(n: usize, input_map: &[usize]) -> Self {
        let d = 2 * n;
        let m = input_map.len();
        let mut j = vec![0.0; d * d];
        for i in 0..n {
            j[i * d + n + i] = 1.0;
            j[(n + i) * d + i] = -1.0;
        }
        let mut g = vec![0.0; d * m];
        for (col, &mass) in input_map.iter().enumerate() {
            g[(n + mass) * m + col] = 1.0;
        }
        let mut c = vec![0.0; d * d];
        for i in 0..d {
            c[i * d + i] = 1.0;
        }
        StructureMatrices { n, m, ny: d, j, g, c }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn state_dim(&self) -> usize {
        2 * self.n
    }

    pub fn input_dim(&self) -> usize {
        self.m
    }

    pub fn output_dim(&self) -> usize {
        self.ny
    }

    pub fn j(&self) -> &[f64] {
        &self.j
    }

    pub fn g(&self) -> &[f64] {
        &self.g
    }

    pub fn c(&self) -> &[f64] {
        &self.c
    }

    /// `out = J v`
    pub fn apply_j(&self, v: &[f64], out: &mut [f64]) {
        matvec(&self.j, self.state_dim(), self.state_dim(), v, out);
    }

    /// `out = J^T v`
    pub fn apply_jt(&self, v: &[f64], out: &mut [f64]) {
        matvec_t(&self.j, self.state_dim(), self.state_dim(), v, out);
    }

    /// `out += G u`
    pub fn add_g(&self, u: &[f64], out: &mut [f64]) {
        let d = self.state_dim();
        for r in 0..d {
            let row = &self.g[r * self.m..(r + 1) * self.m];
            out[r] += row.iter().zip(u).map(|(a, b)| a * b).sum::<f64>();
        }
    }

    /// `out = C x`
    pub fn apply_c(&self, x: &[f64], out: &mut [f64]) {
        matvec(&self.c, self.ny, self.state_dim(), x, out);
    }

    /// `out = C^T y`
    pub fn apply_ct(&self, y: &[f64], out: &mut [f64]) {
        matvec_t(&self.c, self.ny, self.state_dim(), y, out);
    }

    /// `J g + G u` without dimension checks.
    #[inline]
    pub fn field_into(&self, grad_h: &[f64], u: &[f64], out: &mut [f64]) {
        self.apply_j(grad_h, out);
        self.add_g(u, out);
    }
}

fn matvec(a: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        out[r] = a[r * cols..(r + 1) * cols].iter().zip(v).map(|(a, b)| a * b).sum();
    }
}

fn matvec_t(a: &[f64], rows: usize, cols: usize, v: &[f64], out: &mut [f64]) {
    out[..cols].iter_mut().for_each(|o| *o = 0.0);
    for r in 0..rows {
        let vr = v[r];
        for c in 0..cols {
            out[c] += a[r * cols + c] * vr;
        }
    }
}

/// Canonical Hamiltonian vector field `J grad_h + G u`.
pub fn canonical_field(grad_h: &[f64], u: &[f64], s: &StructureMatrices) -> Result<Vec<f64>> {
    check_len("gradient", s.state_dim(), grad_h.len())?;
    check_len("input", s.input_dim(), u.len())?;
    let mut out = vec![0.0; grad_h.len()];
    s.field_into(grad_h, u, &mut out);
    Ok(out)
}
