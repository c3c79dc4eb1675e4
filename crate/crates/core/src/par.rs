//! Data-parallel loops over index ranges.
//!
//! With the `parallel` feature the loops run on the rayon pool; without it
//! they run sequentially. Every loop body is a pure function of its index, so
//! both paths produce identical results.

/// Execution strategy for an index loop.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exec {
    Sequential,
    Parallel,
}

impl Default for Exec {
    fn default() -> Self {
        if cfg!(feature = "parallel") {
            Exec::Parallel
        } else {
            Exec::Sequential
        }
    }
}

pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    map_range_with(Exec::default(), n, f)
}

pub fn map_range_with<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(f).collect()
        }
        _ => (0..n).map(f).collect(),
    }
}

pub fn count_range<F>(n: usize, pred: F) -> usize
where
    F: Fn(usize) -> bool + Sync + Send,
{
    count_range_with(Exec::default(), n, pred)
}

pub fn count_range_with<F>(exec: Exec, n: usize, pred: F) -> usize
where
    F: Fn(usize) -> bool + Sync + Send,
{
    match exec {
        #[cfg(feature = "parallel")]
        Exec::Parallel => {
            use rayon::prelude::*;
            (0..n).into_par_iter().filter(|&i| pred(i)).count()
        }
        _ => (0..n).filter(|&i| pred(i)).count(),
    }
}

/// Runs `f` on a pool of `threads` workers (0 = library default). Without the
/// `parallel` feature `threads` is ignored.
pub fn with_threads<R, F>(threads: usize, f: F) -> R
where
    R: Send,
    F: FnOnce() -> R + Send,
{
    #[cfg(feature = "parallel")]
    {
        if threads > 0 {
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
                return pool.install(f);
            }
        }
        f()
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        f()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequential_and_parallel_agree() {
        let f = |i: usize| (i as f64).sin();
        let a = map_range_with(Exec::Sequential, 1000, f);
        let b = map_range_with(Exec::Parallel, 1000, f);
        assert_eq!(a, b);
        let c1 = count_range_with(Exec::Sequential, 1000, |i| i % 7 == 0);
        let c2 = with_threads(3, || count_range_with(Exec::Parallel, 1000, |i| i % 7 == 0));
        assert_eq!(c1, c2);
        assert_eq!(c1, 143);
    }
}
