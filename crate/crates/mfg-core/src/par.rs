//! Thin wrappers over the data-parallel inner loops.
//!
//! With the `parallel` feature (default) these dispatch to rayon; without it
//! they run sequentially, so the whole crate builds rayon-free. Results are
//! always collected in index order, which keeps runs bit-reproducible
//! regardless of thread count.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `0..n`, collecting results in index order.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// Apply `f` to each length-`chunk` window of `data` (the last may be short).
pub fn for_each_chunk_mut<T, F>(data: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        data.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(i, c)| f(i, c));
    }
    #[cfg(not(feature = "parallel"))]
    {
        data.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    }
}

/// Apply `f` to every 1-D lane of `arr` along `axis` (rows for `Axis(0)`,
/// columns for `Axis(1)`).
pub fn for_each_lane_mut<F>(arr: &mut ndarray::ArrayViewMut2<'_, f64>, axis: ndarray::Axis, f: F)
where
    F: Fn(ndarray::ArrayViewMut1<'_, f64>) + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use ndarray::parallel::prelude::*;
        arr.axis_iter_mut(axis).into_par_iter().for_each(f);
    }
    #[cfg(not(feature = "parallel"))]
    {
        arr.axis_iter_mut(axis).for_each(f);
    }
}

/// Cap the global worker pool. A no-op in sequential builds; calling it twice
/// keeps the first setting (rayon global pools cannot be rebuilt).
pub fn configure_workers(workers: usize) {
    #[cfg(feature = "parallel")]
    {
        if workers > 0 {
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(workers)
                .build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = workers;
    }
}

/// True when the crate was built with rayon support.
pub fn parallel_enabled() -> bool {
    cfg!(feature = "parallel")
}
