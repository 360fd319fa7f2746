//! Deterministic parallel map.
//!
//! Heavy workloads (bootstrap replicates, per-quantile fits, simulation
//! replicates) are embarrassingly parallel maps over immutable inputs. The
//! contract here is that results come back in input order and reductions
//! happen sequentially over the collected vector, so output is independent
//! of scheduling and worker count. With the `parallel` feature disabled the
//! same API runs sequentially.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, in parallel when the `parallel` feature is enabled.
/// Output order always matches input order.
pub fn par_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    T: Send,
    U: Send,
    F: Fn(T) -> U + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.into_iter().map(f).collect()
    }
}

/// Sequential map with the same signature, kept for benchmarking the
/// parallel path against a single-threaded baseline.
pub fn seq_map<T, U, F>(items: Vec<T>, f: F) -> Vec<U>
where
    F: Fn(T) -> U,
{
    items.into_iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn par_map_preserves_order() {
        let out = par_map((0..1000).collect::<Vec<_>>(), |i| i * 2);
        assert_eq!(out, (0..1000).map(|i| i * 2).collect::<Vec<_>>());
        let seq = seq_map((0..1000).collect::<Vec<_>>(), |i| i * 2);
        assert_eq!(out, seq);
    }
}
