use std::fs;
use std::path::Path;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use ndarray::Array2;
use oehnn::data::{self, fmt_f64, DerivativeSource};
use oehnn::eval::{self, Metrics};
use oehnn::integrate::{simulate as rollout, IntegratorConfig, VectorField};
use oehnn::netmodel::{self, Model};
use oehnn::signals::MultisineSpec;
use oehnn::train::{self, GradFault};

use crate::config::{ExperimentConfig, SystemName};
use crate::{Common, EvaluateArgs, GenerateArgs, GradcheckArgs, SimulateArgs, TrainArgs, UsageError};

fn load_config(common: &Common, system: Option<SystemName>) -> Result<ExperimentConfig> {
    let mut cfg = match &common.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::for_system(system.unwrap_or(SystemName::Duffing)),
    };
    if let Some(s) = system {
        if s != cfg.system {
            cfg.system = s;
            cfg.plant = s.spec();
            cfg.protocol = s.protocol();
        }
    }
    if let Some(w) = common.workers {
        cfg.train.workers = w;
    }
    Ok(cfg)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn read_dataset(dir: &Path) -> Result<data::Dataset> {
    if !dir.is_dir() {
        return Err(UsageError(format!("dataset directory {} does not exist", dir.display())).into());
    }
    Ok(data::read_csv(dir)?)
}

fn workers(cfg: &ExperimentConfig) -> usize {
    cfg.train.workers
}

pub fn generate(args: GenerateArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&args.common, args.system)?;
    if let Some(seed) = args.seed {
        cfg.seed = seed;
    }
    if let Some(n) = args.samples {
        cfg.protocol.samples = n;
    }
    if let Some(v) = args.noise_variance {
        cfg.protocol.noise_variance = v;
    }
    if let Some(a) = args.amplitude {
        cfg.protocol.amplitude = a;
    }
    if let Some(out) = args.out {
        cfg.paths.data_dir = out;
    }
    cfg.validate()?;

    let dataset = oehnn::with_workers(workers(&cfg), || data::generate(&cfg.plant, &cfg.protocol, cfg.seed))??;
    let dir = &cfg.paths.data_dir;
    create_dir(dir)?;
    data::write_csv(&dataset, dir)?;
    cfg.echo(dir, "generate-data")?;
    println!(
        "{} trajectories of {} samples: train {}, validation {}, test {} -> {}",
        dataset.trajectories().count(),
        cfg.protocol.samples,
        dataset.train.len(),
        dataset.validation.len(),
        dataset.test.len(),
        dir.display()
    );
    Ok(ExitCode::SUCCESS)
}

pub fn train(args: TrainArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&args.common, None)?;
    let data_dir = args.data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone());
    let dataset = read_dataset(&data_dir)?;
    if args.common.config.is_none() {
        // Without a config file the training defaults follow the dataset's system.
        cfg = load_config(&args.common, Some(system_of(&dataset)))?;
    }
    if let Some(kind) = args.model {
        cfg.model = kind;
    }
    let t = &mut cfg.train;
    if let Some(v) = args.seed {
        t.seed = v;
    }
    if let Some(v) = args.epochs {
        t.max_epochs = v;
    }
    if let Some(v) = args.patience {
        t.patience = v;
    }
    if let Some(v) = args.hidden {
        t.hidden = v;
    }
    if let Some(v) = args.learning_rate {
        t.learning_rate = v;
    }
    if let Some(v) = args.chunk {
        t.chunk_len = Some(v);
    }
    if args.oracle_derivatives {
        t.derivatives = DerivativeSource::Oracle;
    }
    if let Some(v) = args.initial_state {
        t.initial_state = v;
    }
    cfg.paths.data_dir = data_dir;
    if let Some(o) = args.out {
        cfg.paths.out_dir = o;
    }
    cfg.validate()?;
    cfg.system_from(&dataset);
    if !cfg.model.is_hamiltonian() || cfg.model == netmodel::ModelKind::Hnn {
        let source = match cfg.train.derivatives {
            DerivativeSource::FiniteDifference => "finite differences of the measurements",
            DerivativeSource::Oracle => "stored noiseless derivatives",
        };
        eprintln!("{}: derivative targets from {source}", cfg.model);
    }
    let (model, history) = match train::fit(cfg.model, &dataset, &cfg.train) {
        Err(oehnn::Error::AllDiverged) => bail!(
            "every training rollout diverged in the first epoch; \
             try a smaller learning rate or a chunked rollout (--chunk)"
        ),
        other => other?,
    };

    let dir = &cfg.paths.out_dir;
    create_dir(dir)?;
    let model_path = dir.join("model.toml");
    netmodel::save_model(&model, &model_path)?;
    history.write_csv(&dir.join("history.csv"))?;
    cfg.echo(dir, "train")?;
    println!(
        "{} trained for {} epochs, best validation loss {} at epoch {} -> {}",
        cfg.model,
        history.epochs.len(),
        fmt_f64(history.best_val_loss),
        history.best_epoch,
        model_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

impl ExperimentConfig {
    /// Adopts the plant and protocol stored with a dataset.
    fn system_from(&mut self, dataset: &data::Dataset) {
        self.plant = dataset.system.clone();
        self.protocol = dataset.protocol.clone();
        self.seed = dataset.master_seed;
        self.system = system_of(dataset);
    }
}

fn system_of(dataset: &data::Dataset) -> SystemName {
    if dataset.system.n_masses() == SystemName::Coupled.spec().n_masses() {
        SystemName::Coupled
    } else {
        SystemName::Duffing
    }
}

pub fn evaluate(args: EvaluateArgs) -> Result<ExitCode> {
    let mut cfg = load_config(&args.common, None)?;
    if let Some(r) = args.reference {
        cfg.eval.reference = r;
    }
    if let Some(v) = args.initial_state {
        cfg.train.initial_state = v;
    }
    if let Some(d) = args.data {
        cfg.paths.data_dir = d;
    }
    if let Some(o) = args.out {
        cfg.paths.out_dir = o;
    }
    let dataset = read_dataset(&cfg.paths.data_dir)?;
    cfg.system_from(&dataset);

    let mut all: Vec<Metrics> = Vec::new();
    for path in &args.models {
        let model = netmodel::load_model(path).map_err(|e| match e {
            oehnn::Error::Io { .. } => anyhow::Error::from(UsageError(e.to_string())),
            other => other.into(),
        })?;
        if model.state_dim() != dataset.system.state_dim() || model.input_dim() != dataset.system.input_dim() {
            return Err(UsageError(format!(
                "{} models {} states and {} inputs, but the dataset system has {} and {}",
                path.display(),
                model.state_dim(),
                model.input_dim(),
                dataset.system.state_dim(),
                dataset.system.input_dim()
            ))
            .into());
        }
        let metrics = oehnn::with_workers(workers(&cfg), || {
            eval::evaluate(&model, &dataset.test, cfg.eval.reference, cfg.train.initial_state)
        })??;
        all.push(metrics);
    }

    let dir = &cfg.paths.out_dir;
    create_dir(dir)?;
    let mut used: Vec<String> = Vec::new();
    for m in &all {
        let mut name = format!("metrics_{}", m.kind);
        let mut i = 2;
        while used.contains(&name) {
            name = format!("metrics_{}_{i}", m.kind);
            i += 1;
        }
        m.write_report(&dir.join(format!("{name}.toml")))?;
        used.push(name);
    }
    eval::write_comparison(&all, &dir.join("comparison.csv"))?;
    cfg.echo(dir, "evaluate")?;
    print!("{}", eval::comparison_csv(&all)?);
    Ok(ExitCode::SUCCESS)
}

enum Source {
    Model(Model),
    System(oehnn::dynamics::SystemSpec),
}

impl Source {
    fn field(&self) -> &dyn VectorField {
        match self {
            Source::Model(m) => m,
            Source::System(s) => s,
        }
    }
}

pub fn simulate(args: SimulateArgs) -> Result<ExitCode> {
    let source = match (&args.model, args.true_system) {
        (Some(path), _) => Source::Model(netmodel::load_model(path)?),
        (None, Some(s)) => Source::System(s.spec()),
        (None, None) => return Err(UsageError("either --model or --true-system is required".into()).into()),
    };
    let field = source.field();
    let (d, m) = (field.state_dim(), field.input_dim());

    let (x0, u, t0, ts) = match (&args.data, &args.trajectory) {
        (Some(dir), Some(name)) => {
            let dataset = read_dataset(dir)?;
            let traj = dataset
                .trajectories()
                .map(|(_, t)| t)
                .find(|t| &t.name == name)
                .ok_or_else(|| UsageError(format!("no trajectory {name} in {}", dir.display())))?;
            if traj.state_dim() != d || traj.input_dim() != m {
                return Err(UsageError(format!("{name} does not match the simulated system's dimensions")).into());
            }
            let p = &dataset.protocol;
            let spec = MultisineSpec::with_amplitude(p.f0, traj.meta.phases.clone(), p.amplitude)?;
            let offset = p.record_offset();
            let horizon = args.horizon.unwrap_or(traj.len());
            // Same sample times as generation, so the true system reproduces the
            // stored states exactly.
            let u = Array2::from_shape_fn((horizon, m), |(k, _)| spec.value((offset + k) as f64 * p.ts));
            let x0 = match &args.x0 {
                Some(x) => x.clone(),
                None => traj.initial_state(args.initial_state)?,
            };
            (x0, u, offset, p.ts)
        }
        _ => {
            let horizon = args.horizon.unwrap_or(500);
            let u = if args.amplitude == 0.0 {
                Array2::zeros((horizon, m))
            } else {
                let spec = MultisineSpec::seeded(args.harmonics, args.f0, args.amplitude, args.input_seed)?;
                Array2::from_shape_fn((horizon, m), |(k, _)| spec.value(k as f64 * args.ts))
            };
            let x0 = args.x0.clone().unwrap_or_else(|| vec![0.0; d]);
            (x0, u, 0, args.ts)
        }
    };
    if x0.len() != d {
        return Err(UsageError(format!("initial state has {} values, the system has {d} states", x0.len())).into());
    }
    if u.nrows() == 0 {
        return Err(UsageError("horizon must be at least 1".into()).into());
    }

    let sim = rollout(field, IntegratorConfig::rk4(ts)?, &x0, u.view())?;
    // Same column names as the dataset files.
    let mut text = String::from("t");
    for j in 0..m {
        text += &format!(",u_{j}");
    }
    for i in 0..d {
        text += &format!(",x_{i}");
    }
    text.push('\n');
    for (k, row) in sim.states.rows().into_iter().enumerate() {
        let t = (t0 + k) as f64 * ts;
        let mut cells = vec![fmt_f64(t)];
        cells.extend(u.row(k).iter().map(|v| fmt_f64(*v)));
        cells.extend(row.iter().map(|v| fmt_f64(*v)));
        text += &cells.join(",");
        text.push('\n');
    }
    fs::write(&args.out, text).with_context(|| format!("writing {}", args.out.display()))?;
    match sim.diverged_at {
        Some(step) => println!(
            "diverged at step {step}; wrote {} of {} samples to {}",
            sim.states.nrows(),
            u.nrows(),
            args.out.display()
        ),
        None => println!("wrote {} samples to {}", sim.states.nrows(), args.out.display()),
    }
    Ok(ExitCode::SUCCESS)
}

pub fn gradcheck(args: GradcheckArgs) -> Result<ExitCode> {
    let fault = match args.fault.as_deref() {
        None => GradFault::None,
        Some("sign-flip") => GradFault::SignFlip,
        Some(other) => return Err(UsageError(format!("unknown fault mode {other:?}")).into()),
    };
    let mut checks = Vec::new();
    for &steps in &args.steps {
        if steps == 0 {
            return Err(UsageError("rollout lengths must be positive".into()).into());
        }
        checks.push(train::check_rollout_gradient(steps, args.hidden, args.seed, fault)?);
    }
    if !args.skip_directional {
        checks.push(train::check_directional_derivative(
            args.directional_steps,
            args.directional_hidden,
            args.seed,
            fault,
        )?);
    }
    let mut worst: f64 = 0.0;
    for c in &checks {
        worst = worst.max(c.max_rel_error);
        println!(
            "{} {}: max relative error {:.3e} over {} checks (tolerance {:.0e})",
            if c.passed() { "PASS" } else { "FAIL" },
            c.label,
            c.max_rel_error,
            c.checked,
            c.tolerance
        );
    }
    println!("max relative error {worst:.3e}");
    Ok(if checks.iter().all(|c| c.passed()) {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}
