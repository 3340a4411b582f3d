//! Order-preserving map helpers over slices.
//!
//! [`map_slice`] runs on rayon when the `parallel` feature is enabled and
//! degrades to a plain sequential loop otherwise. [`map_slice_seq`] is the
//! always-sequential reference used by the benchmark suite to compare both
//! paths. Outputs are index-aligned with the input either way, so callers
//! that reduce deterministically (argmin by index, first error by index)
//! produce identical results on both paths.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Maps `f` over `items`, in parallel when available.
#[cfg(feature = "parallel")]
pub fn map_slice<T: Sync, U: Send, F: Fn(&T) -> U + Sync + Send>(items: &[T], f: F) -> Vec<U> {
    items.par_iter().map(f).collect()
}

/// Maps `f` over `items`, in parallel when available.
#[cfg(not(feature = "parallel"))]
pub fn map_slice<T, U, F: Fn(&T) -> U>(items: &[T], f: F) -> Vec<U> {
    map_slice_seq(items, f)
}

/// Sequential reference implementation of [`map_slice`].
pub fn map_slice_seq<T, U, F: Fn(&T) -> U>(items: &[T], f: F) -> Vec<U> {
    items.iter().map(f).collect()
}

/// Fallible map; returns the error of the lowest failing index.
pub fn try_map_slice<T: Sync, U: Send, E: Send, F>(items: &[T], f: F) -> Result<Vec<U>, E>
where
    F: Fn(&T) -> Result<U, E> + Sync + Send,
{
    let mut out = Vec::with_capacity(items.len());
    for r in map_slice(items, f) {
        out.push(r?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parallel_and_sequential_agree() {
        let xs: Vec<u64> = (0..257).collect();
        let f = |x: &u64| x * x + 1;
        assert_eq!(map_slice(&xs, f), map_slice_seq(&xs, f));
    }

    #[test]
    fn try_map_reports_first_error_by_index() {
        let xs = vec![1i64, -2, 3, -4];
        let r: Result<Vec<i64>, usize> = try_map_slice(&xs, |&x| {
            if x < 0 {
                Err(xs.iter().position(|&y| y == x).unwrap())
            } else {
                Ok(x)
            }
        });
        assert_eq!(r, Err(1));
    }
}
