pub mod corpus;
pub mod encoders;
pub mod error;
pub mod evalrun;
pub mod history;
pub mod model;
pub mod nn;
pub mod oracle;
pub mod params;
pub mod policy;
pub mod rouge;
pub mod synth;
pub mod tensor;
pub mod trainer;

pub use error::{GosumError, Result};

/// A rayon pool with `workers` threads (at least one).
pub fn worker_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| GosumError::InvalidArgument(format!("cannot start {workers} workers: {e}")))
}
