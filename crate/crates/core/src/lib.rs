//! Output-error identification of port-Hamiltonian mass-spring systems.
//!
//! A model is a Hamiltonian network `H_theta` embedded in the canonical
//! structure `x' = J grad H(x) + G u`, `y = C x`, trained by comparing free-run
//! RK4 simulations with noisy measurements.

pub mod data;
pub mod dynamics;
pub mod eval;
pub mod error;
pub mod integrate;
pub mod netmodel;
pub mod signals;
pub mod train;

pub use error::{Error, Result};

/// Runs `f` inside a thread pool of `workers` threads (0 uses every core).
/// Parallel results are reduced in a fixed order, so outputs do not depend on
/// the worker count.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> Result<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid("worker pool", e.to_string()))?;
    Ok(pool.install(f))
}
