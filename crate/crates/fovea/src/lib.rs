//! Dataset generation, file formats, training and batch commands around
//! `fovea-core`.

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
mod error;
pub mod report;
pub mod train;

pub use error::{Error, Result};

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "FOVEA_THREADS";

/// Worker pool sized by `FOVEA_THREADS`, or by the machine when unset.
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v
            .trim()
            .parse()
            .ok()
            .filter(|n| *n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV}={v:?} is not a positive integer")))?;
        builder = builder.num_threads(n);
    }
    builder
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}
