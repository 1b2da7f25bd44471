// SPDX-License-Identifier: MIT OR Apache-2.0

//! Worker pool sizing. `LOOKAHEAD_LAB_THREADS` caps the number of workers;
//! results never depend on it.

use thiserror::Error;

pub const THREADS_ENV: &str = "LOOKAHEAD_LAB_THREADS";

#[derive(Debug, Error)]
pub enum ThreadsError {
    #[error("{THREADS_ENV} must be a positive integer, got {0:?}")]
    Invalid(String),
    #[error("cannot build worker pool: {0}")]
    Pool(#[from] rayon::ThreadPoolBuildError),
}

/// Parses a worker count; `None` for an unset or empty value.
pub fn parse_threads(value: Option<&str>) -> Result<Option<usize>, ThreadsError> {
    match value.map(str::trim) {
        None | Some("") => Ok(None),
        Some(v) => match v.parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(ThreadsError::Invalid(v.to_string())),
        },
    }
}

pub fn threads_from_env() -> Result<Option<usize>, ThreadsError> {
    parse_threads(std::env::var(THREADS_ENV).ok().as_deref())
}

/// Runs `f` inside a pool of `threads` workers, or rayon's default size.
pub fn with_threads<R: Send>(threads: Option<usize>, f: impl FnOnce() -> R + Send) -> Result<R, ThreadsError> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    Ok(builder.build()?.install(f))
}
