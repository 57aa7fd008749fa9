//! Scene generation, visualization, metrics and command implementations for
//! the `atoken` binary.

pub mod config;
pub mod metrics;
pub mod render;
pub mod run;
pub mod scene;

/// Environment variable capping the number of worker threads.
pub const THREADS_ENV: &str = "ATOKEN_THREADS";

/// Worker count requested through [`THREADS_ENV`], if set to a positive
/// integer.
pub fn requested_threads() -> Option<usize> {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

/// Runs `f` on a thread pool of `threads` workers (or rayon's default).
pub fn with_thread_pool<T: Send>(threads: Option<usize>, f: impl FnOnce() -> T + Send) -> T {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    match builder.build() {
        Ok(pool) => pool.install(f),
        Err(_) => f(),
    }
}
