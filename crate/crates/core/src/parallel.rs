// SPDX-License-Identifier: MIT OR Apache-2.0

use rayon::prelude::*;

use crate::error::{Error, Result};

/// Maps `f` over `items` on at most `workers` threads. Output order matches
/// input order and the first error (by index) wins, so results never depend
/// on the worker count.
pub(crate) fn ordered_map<T, R, F>(workers: usize, items: &[T], f: F) -> Result<Vec<R>>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> Result<R> + Sync,
{
    if workers <= 1 {
        return items.iter().map(f).collect();
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start {workers} workers: {e}")))?;
    let results: Vec<Result<R>> = pool.install(|| items.par_iter().map(&f).collect());
    results.into_iter().collect()
}
