//! Data-parallel helpers with a sequential fallback.
//!
//! All helpers return results in index order. Callers reduce those results with a
//! sequential fold, which keeps floating-point sums independent of the worker
//! count.

/// Execution strategy for data-parallel loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Exec {
    Sequential,
    /// Uses rayon when built with the `parallel` feature, sequential otherwise.
    #[default]
    Parallel,
}

impl Exec {
    /// True when this strategy actually fans out across threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Exec::Parallel
    }
}

/// Evaluates `f(i)` for `i in 0..n`, returning the results in index order.
pub fn map_indexed<T, F>(exec: Exec, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return (0..n).into_par_iter().map(f).collect();
    }
    let _ = exec;
    (0..n).map(f).collect()
}

/// Maps over a slice, returning results in slice order.
pub fn map_slice<S, T, F>(exec: Exec, items: &[S], f: F) -> Vec<T>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn index_order_is_preserved() {
        let seq = map_indexed(Exec::Sequential, 1000, |i| i * i);
        let par = map_indexed(Exec::Parallel, 1000, |i| i * i);
        assert_eq!(seq, par);
        let v: Vec<u32> = (0..100).collect();
        assert_eq!(map_slice(Exec::Parallel, &v, |x| x + 1), (1..101).collect::<Vec<_>>());
    }

    #[test]
    fn ordered_fold_is_worker_independent() {
        let terms = |exec| map_indexed(exec, 10_000, |i| 1.0 / (1.0 + i as f64).powf(1.3));
        let a: f64 = terms(Exec::Sequential).iter().sum();
        let b: f64 = terms(Exec::Parallel).iter().sum();
        assert_eq!(a.to_bits(), b.to_bits());
    }
}
