//! Data-parallel execution over independent work items.
//!
//! Results are always collected in index order, so both modes produce
//! identical output when each item owns its own random stream.

/// How independent work items are scheduled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Execution {
    Sequential,
    /// Rayon thread pool when the `parallel` feature is enabled, otherwise
    /// the same as `Sequential`.
    Parallel,
}

impl Default for Execution {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Execution::Parallel
        } else {
            Execution::Sequential
        }
    }
}

/// `(0..n).map(f).collect()`, possibly in parallel.
pub fn map_collect<T, F>(exec: Execution, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Execution::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

/// Splits `0..n` into contiguous chunks of at most `chunk` items and
/// concatenates the per-chunk outputs in order.
pub fn map_chunks<T, F>(exec: Execution, n: usize, chunk: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(std::ops::Range<usize>) -> Vec<T> + Sync + Send,
{
    let chunk = chunk.max(1);
    let n_chunks = n.div_ceil(chunk);
    map_collect(exec, n_chunks, |c| f(c * chunk..((c + 1) * chunk).min(n)))
        .into_iter()
        .flatten()
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_agree_and_keep_order() {
        let f = |i: usize| (i as f64).sqrt();
        let a = map_collect(Execution::Sequential, 1000, f);
        let b = map_collect(Execution::Parallel, 1000, f);
        assert_eq!(a, b);
        let c = map_chunks(Execution::Parallel, 1003, 64, |r| r.map(f).collect());
        assert_eq!(a.len() + 3, c.len());
        assert_eq!(&c[..1000], &a[..]);
    }
}
