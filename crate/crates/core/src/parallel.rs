//! Data-parallel helpers with a sequential fallback.
//!
//! Batch embedding and per-stage evaluation fan out over examples; both are
//! pure reads of frozen state, so the only requirement is that results come
//! back in input order. With the `parallel` feature (default) the maps run on
//! the rayon pool; without it they run on the calling thread. Either way the
//! reduction happens sequentially over the ordered results, so outputs are
//! identical across both modes.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Map `f` over `items`, preserving input order in the output.
#[cfg(feature = "parallel")]
pub fn map_ordered<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    I: Sync,
    O: Send,
    F: Fn(&I) -> O + Send + Sync,
{
    items.par_iter().map(f).collect()
}

/// Map `f` over `items`, preserving input order in the output.
#[cfg(not(feature = "parallel"))]
pub fn map_ordered<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}

/// Sequential reference path, kept callable regardless of features so the
/// bench suite can compare both strategies in one build.
pub fn map_sequential<I, O, F>(items: &[I], f: F) -> Vec<O>
where
    F: Fn(&I) -> O,
{
    items.iter().map(f).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_map_matches_sequential() {
        let xs: Vec<i64> = (0..257).collect();
        let a = map_ordered(&xs, |x| x * x - 3);
        let b = map_sequential(&xs, |x| x * x - 3);
        assert_eq!(a, b);
    }
}
