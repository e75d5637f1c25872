//! Data-parallel map with a sequential fallback.
//!
//! With the default `parallel` feature the work runs on the rayon pool;
//! without it the same API runs on the calling thread. Results always come
//! back in input order, so reductions over them are deterministic in both
//! modes.

#[cfg(feature = "parallel")]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    use rayon::prelude::*;
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    items.iter().map(f).collect()
}

/// Sequential twin of [`par_map`]: always runs on the calling thread, no
/// matter how the crate was built. Benchmarks use it to compare the two
/// execution paths inside a single build.
pub fn seq_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    F: Fn(&T) -> R,
{
    items.iter().map(f).collect()
}

/// Which execution backend this build uses.
pub fn backend() -> &'static str {
    if cfg!(feature = "parallel") {
        "parallel"
    } else {
        "sequential"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn results_come_back_in_input_order() {
        let items: Vec<u64> = (0..500).collect();
        let out = par_map(&items, |x| x * x);
        let expect: Vec<u64> = items.iter().map(|x| x * x).collect();
        assert_eq!(out, expect);
    }

    #[test]
    fn sequential_twin_agrees_with_the_parallel_map() {
        let items: Vec<i64> = (-20..20).collect();
        assert_eq!(seq_map(&items, |x| x * 3 - 1), par_map(&items, |x| x * 3 - 1));
    }

    #[test]
    fn backend_matches_the_feature_flag() {
        let b = backend();
        assert!(b == "parallel" || b == "sequential");
        #[cfg(feature = "parallel")]
        assert_eq!(b, "parallel");
    }
}
