//! Parallel or sequential evaluation of independent work items.
//!
//! Results are always returned in input order, so the choice never changes
//! any output.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    /// Uses the rayon pool when built with the `parallel` feature, otherwise sequential.
    #[default]
    Parallel,
}

impl Execution {
    pub fn map<T, R, F>(self, items: &[T], f: F) -> Vec<R>
    where
        T: Sync,
        R: Send,
        F: Fn(&T) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            return items.par_iter().map(f).collect();
        }
        items.iter().map(f).collect()
    }

    pub fn map_range<R, F>(self, n: usize, f: F) -> Vec<R>
    where
        R: Send,
        F: Fn(usize) -> R + Sync + Send,
    {
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            return (0..n).into_par_iter().map(f).collect();
        }
        (0..n).map(f).collect()
    }

    /// Fold fixed-size chunks into partial results and merge them left to right.
    pub fn fold_chunks<T, A, F, M>(self, items: &[T], chunk: usize, init: impl Fn() -> A + Sync + Send, fold: F, merge: M) -> A
    where
        T: Sync,
        A: Send,
        F: Fn(A, &[T]) -> A + Sync + Send,
        M: Fn(A, A) -> A + Sync + Send,
    {
        let chunk = chunk.max(1);
        #[cfg(feature = "parallel")]
        if self == Execution::Parallel {
            use rayon::prelude::*;
            return items.par_chunks(chunk).map(|c| fold(init(), c)).reduce(&init, &merge);
        }
        items.chunks(chunk).fold(init(), |acc, c| merge(acc, fold(init(), c)))
    }
}
