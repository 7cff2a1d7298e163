//! Data-parallel helpers.
//!
//! With the `parallel` feature (default) these fan out over the rayon global
//! pool; without it they run sequentially. Output order always matches input
//! order, so results are identical either way.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving order.
pub fn par_map<T, R, F>(items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        items.par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        items.iter().map(f).collect()
    }
}

/// Map `f` over `0..n`, preserving order.
pub fn par_map_range<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
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

/// Maximum of `f` over `0..n` (NaN-free inputs assumed); `f64::NEG_INFINITY` for `n == 0`.
pub fn par_max_range<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        (0..n)
            .into_par_iter()
            .map(f)
            .reduce(|| f64::NEG_INFINITY, f64::max)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Whether this build fans work out over threads.
pub const fn is_parallel() -> bool {
    cfg!(feature = "parallel")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn order_is_preserved() {
        let v: Vec<usize> = (0..1000).collect();
        let out = par_map(&v, |x| x * 2);
        assert!(out.iter().enumerate().all(|(i, &y)| y == 2 * i));
        assert_eq!(par_map_range(5, |i| i + 1), vec![1, 2, 3, 4, 5]);
    }

    #[test]
    fn max_range() {
        assert_eq!(par_max_range(10, |i| i as f64), 9.0);
        assert_eq!(par_max_range(0, |i| i as f64), f64::NEG_INFINITY);
    }
}
