//! Benchmark dataset generation, derivative estimation and CSV persistence.
//!
//! A dataset directory holds one CSV file per trajectory plus
//! `manifest.toml`. Trajectory files have the header
//! `t,u_0..u_{m-1},y_0..y_{d-1}[,x_0..x_{d-1},dx_0..dx_{d-1}]` with every
//! number written as decimal text with 17 significant digits, so reading a
//! written dataset reproduces every value bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, ArrayView2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dynamics::SystemSpec;
use crate::error::{check_len, Error, Result};
use crate::integrate::{Method, Stepper, VectorField};
use crate::signals::{add_noise, MultisineSpec, NoiseSpec};

pub const MANIFEST_FILE: &str = "manifest.toml";
const MANIFEST_FORMAT: &str = "oehnn-dataset";
const MANIFEST_VERSION: u32 = 1;
const NOISE_STREAM_BIT: u64 = 1 << 62;

/// Which state a rollout starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitialState {
    /// The noiseless state at the first recorded sample.
    #[default]
    Known,
    /// The first noisy measurement `y_0`.
    Measured,
}

/// Where derivative-matching baselines get their regression data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DerivativeSource {
    /// Finite differences of the noisy measurements, regressed on `y`.
    #[default]
    FiniteDifference,
    /// Stored noiseless derivatives as targets, regressed on the measured states.
    Oracle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrajectoryMeta {
    pub index: usize,
    /// Number of rejected attempts before this realization was accepted.
    pub attempt: usize,
    pub stream: u64,
    pub noise_stream: u64,
    pub phases: Vec<f64>,
    /// State at `t = 0`, before the unrecorded transient.
    pub x_init: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub name: String,
    pub ts: f64,
    pub t: Vec<f64>,
    pub u: Array2<f64>,
    pub y: Array2<f64>,
    pub x_true: Option<Array2<f64>>,
    pub dx_true: Option<Array2<f64>>,
    pub meta: TrajectoryMeta,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.y.ncols()
    }

    pub fn input_dim(&self) -> usize {
        self.u.ncols()
    }

    pub fn initial_state(&self, policy: InitialState) -> Result<Vec<f64>> {
        match policy {
            InitialState::Measured => Ok(self.y.row(0).to_vec()),
            InitialState::Known => self
                .x_true
                .as_ref()
                .map(|x| x.row(0).to_vec())
                .ok_or_else(|| Error::invalid("initial state", format!("{} stores no noiseless states", self.name))),
        }
    }

    /// Regression inputs and derivative targets for the baselines.
    pub fn derivative_data(&self, source: DerivativeSource) -> Result<(Array2<f64>, Array2<f64>)> {
        match source {
            DerivativeSource::FiniteDifference => Ok((self.y.clone(), fd_derivatives(self.y.view(), self.ts)?)),
            DerivativeSource::Oracle => match (&self.x_true, &self.dx_true) {
                (Some(_), Some(dx)) => Ok((self.y.clone(), dx.clone())),
                _ => Err(Error::invalid(
                    "derivative source",
                    format!("{} stores no noiseless derivatives", self.name),
                )),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.validation + self.test
    }
}

/// Data-collection protocol. The defaults mirror the Duffing benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Protocol {
    pub realizations: usize,
    pub samples: usize,
    pub ts: f64,
    /// Time at which recording starts; the system is simulated from `t = 0`.
    pub record_start: f64,
    pub split: SplitSizes,
    pub harmonics: usize,
    pub f0: f64,
    pub amplitude: f64,
    pub noise_variance: f64,
    /// Initial states are uniform on `[-init_range, init_range]` per coordinate.
    pub init_range: f64,
    /// A realization is rejected once any position exceeds this magnitude.
    pub q_max: f64,
    /// A realization is also rejected once any spring elongation exceeds
    /// this magnitude; 1 is the barrier of a softening spring.
    pub max_elongation: f64,
    pub retry_cap: usize,
}

impl Default for Protocol {
    fn default() -> Self {
        Protocol::duffing()
    }
}

impl Protocol {
    pub fn duffing() -> Self {
        Protocol {
            realizations: 25,
            samples: 500,
            ts: 0.01,
            record_start: 5.0,
            split: SplitSizes {
                train: 15,
                validation: 5,
                test: 5,
            },
            harmonics: 20,
            f0: 0.1,
            amplitude: 0.1,
            noise_variance: 0.1,
            init_range: 0.5,
            q_max: 5.0,
            max_elongation: 1.0,
            retry_cap: 50,
        }
    }

    /// Initial positions within `0.25` keep both spring elongations at most
    /// half the barrier distance.
    pub fn coupled() -> Self {
        Protocol {
            amplitude: 0.05,
            noise_variance: 0.05,
            init_range: 0.25,
            ..Protocol::duffing()
        }
    }

    /// Number of unrecorded samples before the window.
    pub fn record_offset(&self) -> usize {
        (self.record_start / self.ts).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: String| Err(Error::invalid("protocol", reason));
        if self.split.total() != self.realizations {
            return bad(format!(
                "split {}/{}/{} does not add up to {} realizations",
                self.split.train, self.split.validation, self.split.test, self.realizations
            ));
        }
        if self.samples < 2 {
            return bad("at least two samples per trajectory are required".into());
        }
        if !(self.ts > 0.0 && self.ts.is_finite()) {
            return bad(format!("sampling period {} is not positive", self.ts));
        }
        if !(self.record_start >= 0.0) {
            return bad("record_start must be non-negative".into());
        }
        if self.harmonics == 0 || !(self.f0 > 0.0) {
            return bad("multisine needs harmonics >= 1 and f0 > 0".into());
        }
        if !(self.noise_variance >= 0.0) || !(self.init_range >= 0.0) || !(self.q_max > 0.0) || !(self.max_elongation > 0.0) {
            return bad("noise_variance and init_range must be >= 0, q_max and max_elongation > 0".into());
        }
        if self.retry_cap == 0 || self.retry_cap > 256 {
            return bad(format!("retry_cap {} outside 1..=256", self.retry_cap));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub system: SystemSpec,
    pub protocol: Protocol,
    pub master_seed: u64,
    pub train: Vec<Trajectory>,
    pub validation: Vec<Trajectory>,
    pub test: Vec<Trajectory>,
}

impl Dataset {
    pub fn ts(&self) -> f64 {
        self.protocol.ts
    }

    pub fn noise(&self) -> NoiseSpec {
        NoiseSpec {
            variance: self.protocol.noise_variance,
            seed: self.master_seed,
        }
    }

    /// Multisine template (phases are per trajectory).
    pub fn input_template(&self) -> (usize, f64, f64) {
        (self.protocol.harmonics, self.protocol.f0, self.protocol.amplitude)
    }

    pub fn trajectories(&self) -> impl Iterator<Item = (Split, &Trajectory)> {
        self.train
            .iter()
            .map(|t| (Split::Train, t))
            .chain(self.validation.iter().map(|t| (Split::Validation, t)))
            .chain(self.test.iter().map(|t| (Split::Test, t)))
    }

    pub fn split(&self, which: Split) -> &[Trajectory] {
        match which {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }
}

fn realization_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

/// Stream id of attempt `attempt` of realization `index`; injective for
/// `attempt < 256`.
pub fn realization_stream(index: usize, attempt: usize) -> u64 {
    ((index as u64) << 8) | attempt as u64
}

pub fn noise_stream(index: usize, attempt: usize) -> u64 {
    NOISE_STREAM_BIT | realization_stream(index, attempt)
}

/// Generates a benchmark dataset from the true system.
pub fn generate(system: &SystemSpec, protocol: &Protocol, master_seed: u64) -> Result<Dataset> {
    generate_from_field(system, system, protocol, master_seed)
}

/// Generates a dataset whose states follow `field`; `system` describes the
/// dimensions and input map and is stored in the manifest.
pub fn generate_from_field<F: VectorField>(
    field: &F,
    system: &SystemSpec,
    protocol: &Protocol,
    master_seed: u64,
) -> Result<Dataset> {
    system.validate()?;
    protocol.validate()?;
    check_len("field state dimension", system.state_dim(), field.state_dim())?;
    check_len("field input dimension", system.input_dim(), field.input_dim())?;

    let trajectories = (0..protocol.realizations)
        .into_par_iter()
        .map(|index| realize(field, system, protocol, master_seed, index))
        .collect::<Result<Vec<_>>>()?;

    let mut it = trajectories.into_iter();
    let train = it.by_ref().take(protocol.split.train).collect();
    let validation = it.by_ref().take(protocol.split.validation).collect();
    let test = it.collect();
    Ok(Dataset {
        system: system.clone(),
        protocol: protocol.clone(),
        master_seed,
        train,
        validation,
        test,
    })
}

/// Simulates the window of one realization, resampling on escape.
pub fn realize<F: VectorField>(
    field: &F,
    system: &SystemSpec,
    protocol: &Protocol,
    master_seed: u64,
    index: usize,
) -> Result<Trajectory> {
    for attempt in 0..protocol.retry_cap {
        let stream = realization_stream(index, attempt);
        let mut rng = realization_rng(master_seed, stream);
        let input = MultisineSpec::random(protocol.harmonics, protocol.f0, protocol.amplitude, &mut rng)?;
        let x_init: Vec<f64> = (0..system.state_dim())
            .map(|_| {
                if protocol.init_range > 0.0 {
                    rng.random_range(-protocol.init_range..protocol.init_range)
                } else {
                    0.0
                }
            })
            .collect();

        let Some((u, x_true)) = simulate_window(field, system, protocol, &input, &x_init) else {
            continue;
        };

        let d = system.state_dim();
        let mut dx_true = Array2::zeros((protocol.samples, d));
        let mut dx = vec![0.0; d];
        for k in 0..protocol.samples {
            let x = x_true.row(k).to_vec();
            let uk = u.row(k).to_vec();
            field.eval(&x, &uk, &mut dx);
            dx_true.row_mut(k).iter_mut().zip(&dx).for_each(|(a, b)| *a = *b);
        }

        let s = system.structure();
        let mut clean = Array2::zeros((protocol.samples, s.output_dim()));
        let mut yk = vec![0.0; s.output_dim()];
        for k in 0..protocol.samples {
            s.apply_c(&x_true.row(k).to_vec(), &mut yk);
            clean.row_mut(k).iter_mut().zip(&yk).for_each(|(a, b)| *a = *b);
        }
        let noise = NoiseSpec {
            variance: protocol.noise_variance,
            seed: master_seed,
        };
        let nstream = noise_stream(index, attempt);
        let y = add_noise(clean.view(), &noise, &mut realization_rng(master_seed, nstream))?;

        let offset = protocol.record_offset();
        let t = (0..protocol.samples).map(|k| (offset + k) as f64 * protocol.ts).collect();
        return Ok(Trajectory {
            name: format!("traj_{index:03}"),
            ts: protocol.ts,
            t,
            u,
            y,
            x_true: Some(x_true),
            dx_true: Some(dx_true),
            meta: TrajectoryMeta {
                index,
                attempt,
                stream,
                noise_stream: nstream,
                phases: input.phases,
                x_init,
            },
        });
    }
    Err(Error::Escape {
        index,
        attempts: protocol.retry_cap,
    })
}

/// Simulates from `t = 0` and returns the recorded inputs and states, or
/// `None` if any position left `[-q_max, q_max]`, any spring stretched beyond
/// `max_elongation`, or the state became non-finite.
pub fn simulate_window<F: VectorField>(
    field: &F,
    system: &SystemSpec,
    protocol: &Protocol,
    input: &MultisineSpec,
    x_init: &[f64],
) -> Option<(Array2<f64>, Array2<f64>)> {
    let d = system.state_dim();
    let n_pos = system.n_masses();
    let m = system.input_dim();
    let offset = protocol.record_offset();
    let total = offset + protocol.samples;
    let escaped = |x: &[f64]| {
        x.iter().any(|v| !v.is_finite())
            || x[..n_pos].iter().any(|q| q.abs() > protocol.q_max)
            || system.max_elongation(&x[..n_pos]) > protocol.max_elongation
    };

    let mut u = Array2::zeros((protocol.samples, m));
    let mut x_true = Array2::zeros((protocol.samples, d));
    let mut x = x_init.to_vec();
    let mut next = vec![0.0; d];
    let mut stepper = Stepper::new(d);
    if escaped(&x) {
        return None;
    }
    for k in 0..total {
        // Every input channel carries the same multisine.
        let uk = vec![input.value(k as f64 * protocol.ts); m];
        if k >= offset {
            let r = k - offset;
            x_true.row_mut(r).iter_mut().zip(&x).for_each(|(a, b)| *a = *b);
            u.row_mut(r).iter_mut().zip(&uk).for_each(|(a, b)| *a = *b);
        }
        if k + 1 == total {
            break;
        }
        let ok = stepper.step_into(Method::Rk4, field, &x, &uk, protocol.ts, &mut next);
        if !ok || escaped(&next) {
            return None;
        }
        std::mem::swap(&mut x, &mut next);
    }
    Some((u, x_true))
}

/// Second-order finite-difference derivatives of uniformly sampled rows.
pub fn fd_derivatives(y: ArrayView2<f64>, ts: f64) -> Result<Array2<f64>> {
    let n = y.nrows();
    if n < 3 {
        return Err(Error::invalid("finite differences", format!("need at least 3 samples, got {n}")));
    }
    let mut d = Array2::zeros(y.raw_dim());
    let inv = 1.0 / (2.0 * ts);
    for c in 0..y.ncols() {
        let col = y.column(c);
        d[[0, c]] = (-3.0 * col[0] + 4.0 * col[1] - col[2]) * inv;
        for k in 1..n - 1 {
            d[[k, c]] = (col[k + 1] - col[k - 1]) * inv;
        }
        d[[n - 1, c]] = (3.0 * col[n - 1] - 4.0 * col[n - 2] + col[n - 3]) * inv;
    }
    Ok(d)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    master_seed: u64,
    system: SystemSpec,
    protocol: Protocol,
    trajectory: Vec<ManifestEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    file: String,
    split: Split,
    samples: usize,
    has_truth: bool,
    meta: TrajectoryMeta,
}

/// Formats with 17 significant digits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn header(m: usize, d: usize, truth: bool) -> Vec<String> {
    let mut h = vec!["t".to_string()];
    h.extend((0..m).map(|i| format!("u_{i}")));
    h.extend((0..d).map(|i| format!("y_{i}")));
    if truth {
        h.extend((0..d).map(|i| format!("x_{i}")));
        h.extend((0..d).map(|i| format!("dx_{i}")));
    }
    h
}

/// Writes the dataset as per-trajectory CSV files and a manifest.
pub fn write_csv(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if dataset.master_seed > i64::MAX as u64 {
        return Err(Error::invalid("master seed", "must fit in a signed 64-bit integer"));
    }
    let mut entries = Vec::new();
    for (split, traj) in dataset.trajectories() {
        let file = format!("{}.csv", traj.name);
        write_trajectory(traj, &dir.join(&file))?;
        entries.push(ManifestEntry {
            name: traj.name.clone(),
            file,
            split,
            samples: traj.len(),
            has_truth: traj.x_true.is_some() && traj.dx_true.is_some(),
            meta: traj.meta.clone(),
        });
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT.into(),
        version: MANIFEST_VERSION,
        master_seed: dataset.master_seed,
        system: dataset.system.clone(),
        protocol: dataset.protocol.clone(),
        trajectory: entries,
    };
    let text = toml::to_string(&manifest).map_err(|e| Error::invalid("manifest", e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(|e| Error::io(path, e))
}

fn write_trajectory(traj: &Trajectory, path: &Path) -> Result<()> {
    let truth = traj.x_true.is_some() && traj.dx_true.is_some();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(header(traj.input_dim(), traj.state_dim(), truth))
        .map_err(|e| csv_error(path, e))?;
    for k in 0..traj.len() {
        let mut row = vec![fmt_f64(traj.t[k])];
        row.extend(traj.u.row(k).iter().map(|v| fmt_f64(*v)));
        row.extend(traj.y.row(k).iter().map(|v| fmt_f64(*v)));
        if let (Some(x), Some(dx)) = (&traj.x_true, &traj.dx_true) {
            row.extend(x.row(k).iter().map(|v| fmt_f64(*v)));
            row.extend(dx.row(k).iter().map(|v| fmt_f64(*v)));
        }
        w.write_record(&row).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line());
    Error::parse(path, line, e.to_string())
}

/// Reads a dataset written by [`write_csv`].
pub fn read_csv(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = match fs::read_to_string(&manifest_path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            return Err(Error::parse(&manifest_path, None, "missing dataset manifest"));
        }
        Err(e) => return Err(Error::io(&manifest_path, e)),
    };
    let manifest: Manifest = toml::from_str(&text).map_err(|e| {
        let line = e.span().map(|s| text[..s.start].lines().count().max(1) as u64);
        Error::parse(&manifest_path, line, e.message().to_string())
    })?;
    if manifest.format != MANIFEST_FORMAT || manifest.version != MANIFEST_VERSION {
        return Err(Error::parse(
            &manifest_path,
            None,
            format!("unsupported format {} v{}", manifest.format, manifest.version),
        ));
    }
    manifest
        .system
        .validate()
        .map_err(|e| Error::parse(&manifest_path, None, e.to_string()))?;
    manifest
        .protocol
        .validate()
        .map_err(|e| Error::parse(&manifest_path, None, e.to_string()))?;

    let d = manifest.system.state_dim();
    let m = manifest.system.input_dim();
    let mut dataset = Dataset {
        system: manifest.system,
        protocol: manifest.protocol,
        master_seed: manifest.master_seed,
        train: Vec::new(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    for entry in manifest.trajectory {
        let path = dir.join(&entry.file);
        let traj = read_trajectory(&path, &entry, m, d, dataset.protocol.ts)?;
        match entry.split {
            Split::Train => dataset.train.push(traj),
            Split::Validation => dataset.validation.push(traj),
            Split::Test => dataset.test.push(traj),
        }
    }
    Ok(dataset)
}

fn read_trajectory(path: &Path, entry: &ManifestEntry, m: usize, d: usize, ts: f64) -> Result<Trajectory> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| match e.kind() {
            csv::ErrorKind::Io(io) if io.kind() == std::io::ErrorKind::NotFound => {
                Error::parse(path, None, "trajectory file listed in the manifest is missing")
            }
            _ => csv_error(path, e),
        })?;
    let expected = header(m, d, entry.has_truth);
    let found: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(str::to_string)
        .collect();
    if found != expected {
        return Err(Error::parse(
            path,
            Some(1),
            format!("expected header {}, found {}", expected.join(","), found.join(",")),
        ));
    }
    let cols = expected.len();
    let mut values = Vec::with_capacity(entry.samples * cols);
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map(|p| p.line());
        if record.len() != cols {
            return Err(Error::parse(path, line, format!("expected {cols} columns, found {}", record.len())));
        }
        for field in record.iter() {
            let v: f64 = field
                .trim()
                .parse()
                .map_err(|_| Error::parse(path, line, format!("invalid number {field:?}")))?;
            values.push(v);
        }
    }
    let rows = values.len() / cols;
    if rows != entry.samples {
        return Err(Error::parse(
            path,
            None,
            format!("truncated trajectory: expected {} rows, found {rows}", entry.samples),
        ));
    }
    let table = Array2::from_shape_vec((rows, cols), values).expect("row-major table");
    let t = table.column(0).to_vec();
    let u = table.slice(s![.., 1..1 + m]).to_owned();
    let y = table.slice(s![.., 1 + m..1 + m + d]).to_owned();
    let (x_true, dx_true) = if entry.has_truth {
        (
            Some(table.slice(s![.., 1 + m + d..1 + m + 2 * d]).to_owned()),
            Some(table.slice(s![.., 1 + m + 2 * d..1 + m + 3 * d]).to_owned()),
        )
    } else {
        (None, None)
    };
    Ok(Trajectory {
        name: entry.name.clone(),
        ts,
        t,
        u,
        y,
        x_true,
        dx_true,
        meta: entry.meta.clone(),
    })
}

/// Paths of all trajectory files in a written dataset.
pub fn trajectory_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let ds = read_csv(dir)?;
    Ok(ds.trajectories().map(|(_, t)| dir.join(format!("{}.csv", t.name))).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_protocol() -> Protocol {
        Protocol {
            realizations: 5,
            samples: 50,
            record_start: 0.5,
            split: SplitSizes {
                train: 3,
                validation: 1,
                test: 1,
            },
            ..Protocol::duffing()
        }
    }

    fn bits_equal(a: &Array2<f64>, b: &Array2<f64>) -> bool {
        a.shape() == b.shape() && a.iter().zip(b.iter()).all(|(x, y)| x.to_bits() == y.to_bits())
    }

    #[test]
    fn fd_examples() {
        let ts = 0.01;
        let ramp = Array2::from_shape_fn((10, 1), |(k, _)| 3.0 * k as f64 * ts);
        let d = fd_derivatives(ramp.view(), ts).unwrap();
        for k in 1..9 {
            assert!((d[[k, 0]] - 3.0).abs() < 1e-12);
        }
        let quad = Array2::from_shape_fn((10, 1), |(k, _)| (k as f64 * ts).powi(2));
        let d = fd_derivatives(quad.view(), ts).unwrap();
        for k in 0..10 {
            assert!((d[[k, 0]] - 2.0 * k as f64 * ts).abs() < 1e-12, "row {k}");
        }
        let sine = Array2::from_shape_fn((700, 1), |(k, _)| (k as f64 * ts).sin());
        let d = fd_derivatives(sine.view(), ts).unwrap();
        let err = (1..699)
            .map(|k| (d[[k, 0]] - (k as f64 * ts).cos()).abs())
            .fold(0.0, f64::max);
        assert!(err < 2e-5, "max error {err}");
        assert!(fd_derivatives(Array2::zeros((2, 1)).view(), ts).is_err());
    }

    #[test]
    fn default_protocol_shape() {
        let ds = generate(&SystemSpec::duffing(), &Protocol::duffing(), 1).unwrap();
        assert_eq!((ds.train.len(), ds.validation.len(), ds.test.len()), (15, 5, 5));
        for (_, t) in ds.trajectories() {
            assert_eq!(t.len(), 500);
            assert!((t.t[0] - 5.0).abs() < 1e-12);
            assert!((t.t[499] - 9.99).abs() < 1e-12);
            assert!(t.meta.phases.len() == 20);
        }
    }

    #[test]
    fn truth_storage_is_consistent() {
        let system = SystemSpec::coupled();
        let ds = generate(&system, &Protocol { ..small_protocol() }, 4).unwrap();
        let mut f = vec![0.0; 4];
        for (_, t) in ds.trajectories() {
            let x = t.x_true.as_ref().unwrap();
            let dx = t.dx_true.as_ref().unwrap();
            for k in 0..t.len() {
                system.field(&x.row(k).to_vec(), &t.u.row(k).to_vec(), &mut f);
                for i in 0..4 {
                    assert!((f[i] - dx[[k, i]]).abs() < 1e-12);
                }
                assert!(x.row(k).iter().take(2).all(|q| q.abs() <= 5.0));
            }
        }
    }

    #[test]
    fn noiseless_measurements_equal_states() {
        let p = Protocol {
            noise_variance: 0.0,
            ..small_protocol()
        };
        let ds = generate(&SystemSpec::duffing(), &p, 9).unwrap();
        for (_, t) in ds.trajectories() {
            assert!(bits_equal(&t.y, t.x_true.as_ref().unwrap()));
        }
    }

    #[test]
    fn generation_is_deterministic_and_streams_distinct() {
        let a = generate(&SystemSpec::duffing(), &small_protocol(), 21).unwrap();
        let b = generate(&SystemSpec::duffing(), &small_protocol(), 21).unwrap();
        assert_eq!(a, b);
        let c = generate(&SystemSpec::duffing(), &small_protocol(), 22).unwrap();
        assert_ne!(a, c);

        let n0 = a.train[0].y[[0, 0]] - a.train[0].x_true.as_ref().unwrap()[[0, 0]];
        let n1 = a.train[1].y[[0, 0]] - a.train[1].x_true.as_ref().unwrap()[[0, 0]];
        assert_ne!(n0, n1);

        let mut streams = std::collections::HashSet::new();
        for i in 0..300 {
            for k in 0..256 {
                assert!(streams.insert(realization_stream(i, k)));
                assert!(streams.insert(noise_stream(i, k)));
            }
        }
    }

    #[test]
    fn escape_is_rejected_and_capped() {
        // Unit amplitude drives the softening oscillator out of its well.
        let p = Protocol {
            amplitude: 1.0,
            retry_cap: 3,
            ..small_protocol()
        };
        let p = Protocol {
            record_start: 5.0,
            ..p
        };
        match generate(&SystemSpec::duffing(), &p, 0) {
            Err(Error::Escape { attempts, .. }) => assert_eq!(attempts, 3),
            other => panic!("expected escape error, got {other:?}"),
        }
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let ds = generate(&SystemSpec::coupled(), &small_protocol(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_csv(&ds, dir.path()).unwrap();
        let back = read_csv(dir.path()).unwrap();
        assert_eq!(back.system, ds.system);
        assert_eq!(back.protocol, ds.protocol);
        for ((_, a), (_, b)) in ds.trajectories().zip(back.trajectories()) {
            assert_eq!(a.name, b.name);
            assert!(a.t.iter().zip(&b.t).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(bits_equal(&a.u, &b.u));
            assert!(bits_equal(&a.y, &b.y));
            assert!(bits_equal(a.x_true.as_ref().unwrap(), b.x_true.as_ref().unwrap()));
            assert!(bits_equal(a.dx_true.as_ref().unwrap(), b.dx_true.as_ref().unwrap()));
            assert_eq!(a.meta, b.meta);
        }
        assert_eq!(back, ds);
        assert_eq!(trajectory_files(dir.path()).unwrap().len(), 5);
    }

    #[test]
    fn read_errors_name_the_file() {
        let ds = generate(&SystemSpec::duffing(), &small_protocol(), 5).unwrap();
        let dir = tempfile::tempdir().unwrap();
        write_csv(&ds, dir.path()).unwrap();

        let victim = dir.path().join("traj_001.csv");
        let text = fs::read_to_string(&victim).unwrap();
        let truncated: String = text.lines().take(10).map(|l| format!("{l}\n")).collect();
        fs::write(&victim, truncated).unwrap();
        let err = read_csv(dir.path()).unwrap_err().to_string();
        assert!(err.contains("traj_001.csv"), "{err}");
        assert!(err.contains("truncated"), "{err}");

        let mut lines: Vec<String> = text.lines().map(str::to_string).collect();
        lines[5].push_str(",1.0");
        fs::write(&victim, lines.join("\n")).unwrap();
        let err = read_csv(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Parse { line: Some(6), .. }), "{err}");

        fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
        let err = read_csv(dir.path()).unwrap_err().to_string();
        assert!(err.contains("manifest"), "{err}");
    }

    #[test]
    fn initial_state_policies() {
        let ds = generate(&SystemSpec::duffing(), &small_protocol(), 5).unwrap();
        let t = &ds.train[0];
        assert_eq!(t.initial_state(InitialState::Measured).unwrap(), t.y.row(0).to_vec());
        assert_eq!(
            t.initial_state(InitialState::Known).unwrap(),
            t.x_true.as_ref().unwrap().row(0).to_vec()
        );
        let mut bare = t.clone();
        bare.x_true = None;
        assert!(bare.initial_state(InitialState::Known).is_err());
        assert!(bare.derivative_data(DerivativeSource::Oracle).is_err());
        let (x, dx) = t.derivative_data(DerivativeSource::FiniteDifference).unwrap();
        assert_eq!(x, t.y);
        assert_eq!(dx.shape(), t.y.shape());
    }
}
