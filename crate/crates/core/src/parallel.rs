//! Thread-count control for the few data-parallel loops.

use crate::error::{Error, Result};

pub const THREADS_ENV: &str = "MMUI_THREADS";

/// Thread cap from `MMUI_THREADS`, or `None` when unset.
pub fn thread_cap() -> Result<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(_) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

/// Runs `f` on a rayon pool sized by [`thread_cap`].
///
/// Results never depend on the thread count: every parallel loop in this
/// crate collects in index order.
pub fn install<R: Send>(f: impl FnOnce() -> R + Send) -> Result<R> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Some(n) = thread_cap()? {
        b = b.num_threads(n);
    }
    let pool = b.build().map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    Ok(pool.install(f))
}
