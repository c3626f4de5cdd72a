//! Per-sequence data parallelism. Results always come back in input order, so
//! reductions over them are deterministic regardless of the mode.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Parallelism {
    Sequential,
    /// Rayon thread pool; falls back to sequential without the `parallel`
    /// feature.
    #[default]
    Rayon,
}

pub fn map_indexed<I, R, F>(mode: Parallelism, items: &[I], f: F) -> Vec<R>
where
    I: Sync,
    R: Send,
    F: Fn(usize, &I) -> R + Sync + Send,
{
    match mode {
        #[cfg(feature = "parallel")]
        Parallelism::Rayon => {
            use rayon::prelude::*;
            items.par_iter().enumerate().map(|(i, x)| f(i, x)).collect()
        }
        _ => items.iter().enumerate().map(|(i, x)| f(i, x)).collect(),
    }
}
