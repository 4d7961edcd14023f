//! Data-parallel execution with a sequential fallback.
//!
//! With the `parallel` feature (default) batch work runs on rayon; without it
//! every path degrades to plain iterators. Callers can also force the
//! sequential path at runtime, which the benches use to compare both.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Execution {
    Sequential,
    #[default]
    Parallel,
}

impl Execution {
    /// True when work will actually be spread over threads.
    pub fn is_parallel(self) -> bool {
        cfg!(feature = "parallel") && self == Execution::Parallel
    }
}

/// Order-preserving map over a slice.
pub fn map<T, R, F>(exec: Execution, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        return items.par_iter().map(f).collect();
    }
    let _ = exec;
    items.iter().map(f).collect()
}

/// Order-preserving map with at most `max_in_flight` items processed at
/// once. Used for provider calls, where the bound is a contract rather than
/// a tuning knob.
pub fn map_bounded<T, R, F>(exec: Execution, max_in_flight: usize, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() && max_in_flight > 1 && items.len() > 1 {
        use rayon::prelude::*;
        match rayon::ThreadPoolBuilder::new()
            .num_threads(max_in_flight)
            .build()
        {
            Ok(pool) => return pool.install(|| items.par_iter().map(&f).collect()),
            Err(e) => log::warn!("falling back to sequential execution: {e}"),
        }
    }
    let _ = (exec, max_in_flight);
    items.iter().map(f).collect()
}

/// Fills `out[j] = f(j)` for every index.
pub fn fill<F>(exec: Execution, out: &mut [f64], f: F)
where
    F: Fn(usize) -> f64 + Send + Sync,
{
    #[cfg(feature = "parallel")]
    if exec.is_parallel() {
        use rayon::prelude::*;
        out.par_iter_mut()
            .with_min_len(64)
            .enumerate()
            .for_each(|(j, v)| *v = f(j));
        return;
    }
    let _ = exec;
    for (j, v) in out.iter_mut().enumerate() {
        *v = f(j);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::atomic::{AtomicUsize, Ordering};

    #[test]
    fn map_preserves_order_in_both_modes() {
        let xs: Vec<u32> = (0..1000).collect();
        let seq = map(Execution::Sequential, &xs, |x| x * 2);
        let par = map(Execution::Parallel, &xs, |x| x * 2);
        assert_eq!(seq, par);
        assert_eq!(seq[999], 1998);
    }

    #[test]
    fn bounded_map_never_exceeds_cap() {
        let live = AtomicUsize::new(0);
        let peak = AtomicUsize::new(0);
        let xs: Vec<u32> = (0..64).collect();
        let out = map_bounded(Execution::Parallel, 3, &xs, |x| {
            let now = live.fetch_add(1, Ordering::SeqCst) + 1;
            peak.fetch_max(now, Ordering::SeqCst);
            std::thread::sleep(std::time::Duration::from_millis(1));
            live.fetch_sub(1, Ordering::SeqCst);
            *x
        });
        assert_eq!(out, xs);
        assert!(peak.load(Ordering::SeqCst) <= 3);
    }

    #[test]
    fn fill_matches() {
        let mut a = vec![0.0; 300];
        let mut b = vec![0.0; 300];
        fill(Execution::Sequential, &mut a, |j| j as f64 * 0.5);
        fill(Execution::Parallel, &mut b, |j| j as f64 * 0.5);
        assert_eq!(a, b);
    }
}
