//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper has a `*_seq` twin that always runs on the calling thread.
//! The unsuffixed entry points dispatch to rayon when the `parallel`
//! feature is enabled, otherwise they call the sequential twin. Outputs
//! are index-ordered in both modes, so results are identical regardless
//! of how the work was scheduled.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Cap the worker pool used by the parallel entry points.
///
/// Has no effect after the pool is already initialized or when the
/// `parallel` feature is off. `n = 0` keeps the default (all cores).
pub fn configure_threads(n: usize) {
    #[cfg(feature = "parallel")]
    {
        if n > 0 {
            // Ignore the error: the global pool can only be built once.
            let _ = rayon::ThreadPoolBuilder::new()
                .num_threads(n)
                .build_global();
        }
    }
    #[cfg(not(feature = "parallel"))]
    let _ = n;
}

pub fn map_slice_seq<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    items.iter().map(f).collect()
}

pub fn map_range_seq<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    (0..n).map(f).collect()
}

#[cfg(feature = "parallel")]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    T: Sync,
    U: Send,
    F: Fn(&T) -> U + Sync + Send,
{
    items.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, U, F>(items: &[T], f: F) -> Vec<U>
where
    F: Fn(&T) -> U,
{
    map_slice_seq(items, f)
}

#[cfg(feature = "parallel")]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    U: Send,
    F: Fn(usize) -> U + Sync + Send,
{
    (0..n).into_par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
pub fn map_range<U, F>(n: usize, f: F) -> Vec<U>
where
    F: Fn(usize) -> U,
{
    map_range_seq(n, f)
}

/// Apply `f` to each row (fixed-width chunk) of `buf` in place.
pub fn for_each_row_seq<T, F>(buf: &mut [T], width: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for (i, row) in buf.chunks_mut(width).enumerate() {
        f(i, row);
    }
}

#[cfg(feature = "parallel")]
pub fn for_each_row<T, F>(buf: &mut [T], width: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync + Send,
{
    buf.par_chunks_mut(width).enumerate().for_each(|(i, row)| f(i, row));
}

#[cfg(not(feature = "parallel"))]
pub fn for_each_row<T, F>(buf: &mut [T], width: usize, f: F)
where
    F: Fn(usize, &mut [T]),
{
    for_each_row_seq(buf, width, f);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_matches_sequential() {
        let items: Vec<u64> = (0..1000).collect();
        let a = map_slice(&items, |x| x * x + 1);
        let b = map_slice_seq(&items, |x| x * x + 1);
        assert_eq!(a, b);

        let c = map_range(257, |i| i as f64 * 0.5);
        let d = map_range_seq(257, |i| i as f64 * 0.5);
        assert_eq!(c, d);
    }

    #[test]
    fn row_iteration_preserves_order() {
        let mut buf = vec![0u32; 12];
        for_each_row(&mut buf, 3, |i, row| {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (i * 3 + j) as u32;
            }
        });
        let expect: Vec<u32> = (0..12).collect();
        assert_eq!(buf, expect);
    }
}
