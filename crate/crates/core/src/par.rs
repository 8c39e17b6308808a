//! Data-parallel helpers with a sequential fallback.
//!
//! Every helper produces the same output with or without the `parallel`
//! feature: maps collect in index order and sums use a fixed pairwise tree.

use crate::error::Result;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Below this many leaves the pairwise sum recurses sequentially.
const PAR_SUM_CUTOFF: usize = 64;

pub fn map_range<T, F>(n: usize, f: F) -> Vec<T>
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

pub fn try_map_range<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
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

pub fn try_map_slice<S, T, F>(items: &[S], f: F) -> Result<Vec<T>>
where
    S: Sync,
    T: Send,
    F: Fn(&S) -> Result<T> + Sync + Send,
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

fn join<A, B, RA, RB>(a: A, b: B) -> (RA, RB)
where
    A: FnOnce() -> RA + Send,
    B: FnOnce() -> RB + Send,
    RA: Send,
    RB: Send,
{
    #[cfg(feature = "parallel")]
    {
        rayon::join(a, b)
    }
    #[cfg(not(feature = "parallel"))]
    {
        (a(), b())
    }
}

/// Elementwise sum of equal-length vectors using a fixed pairwise tree.
pub fn pairwise_sum<V: AsRef<[f64]> + Sync>(items: &[V], width: usize) -> Vec<f64> {
    match items.len() {
        0 => vec![0.0; width],
        1 => items[0].as_ref().to_vec(),
        len => {
            let (lo, hi) = items.split_at(len / 2);
            let (mut a, b) = if len > PAR_SUM_CUTOFF {
                join(|| pairwise_sum(lo, width), || pairwise_sum(hi, width))
            } else {
                (pairwise_sum(lo, width), pairwise_sum(hi, width))
            };
            for (x, y) in a.iter_mut().zip(&b) {
                *x += y;
            }
            a
        }
    }
}

/// Scalar pairwise sum with the same tree shape as [`pairwise_sum`].
pub fn pairwise_sum_scalar(items: &[f64]) -> f64 {
    match items.len() {
        0 => 0.0,
        1 => items[0],
        len => {
            let (lo, hi) = items.split_at(len / 2);
            pairwise_sum_scalar(lo) + pairwise_sum_scalar(hi)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn map_preserves_order() {
        let v = map_range(1000, |i| i * 2);
        assert!(v.iter().enumerate().all(|(i, x)| *x == 2 * i));
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let items: Vec<Vec<f64>> = (0..513).map(|i| vec![i as f64, 1.0]).collect();
        let s = pairwise_sum(&items, 2);
        assert_eq!(s, vec![(512 * 513 / 2) as f64, 513.0]);
        assert_eq!(pairwise_sum::<Vec<f64>>(&[], 3), vec![0.0; 3]);
    }

    #[test]
    fn pairwise_sum_is_deterministic() {
        let items: Vec<Vec<f64>> = (0..1000).map(|i| vec![(i as f64).sin() * 1e8]).collect();
        let a = pairwise_sum(&items, 1);
        let b = pairwise_sum(&items, 1);
        assert_eq!(a[0].to_bits(), b[0].to_bits());
        let scalars: Vec<f64> = items.iter().map(|v| v[0]).collect();
        assert_eq!(pairwise_sum_scalar(&scalars).to_bits(), a[0].to_bits());
    }
}
