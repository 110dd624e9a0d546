//! Deterministic data-parallel helpers.
//!
//! Work is split into fixed chunks; each chunk folds its items sequentially in
//! index order and the per-chunk results are merged in chunk order. The result
//! is therefore bit-identical whether the chunks run on one thread or many,
//! which keeps training runs reproducible under the `parallel` feature.

/// Selects the execution backend for batch-level loops.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecMode {
    Sequential,
    #[cfg(feature = "parallel")]
    Parallel,
}

impl ExecMode {
    /// Parallel when the `parallel` feature is enabled, sequential otherwise.
    pub fn auto() -> Self {
        #[cfg(feature = "parallel")]
        {
            ExecMode::Parallel
        }
        #[cfg(not(feature = "parallel"))]
        {
            ExecMode::Sequential
        }
    }
}

/// Maps every item, preserving input order in the output.
pub fn ordered_map<T, R, F>(mode: ExecMode, items: &[T], f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync + Send,
{
    match mode {
        ExecMode::Sequential => items.iter().map(f).collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items.par_iter().map(f).collect()
        }
    }
}

/// Folds items chunk-wise and merges chunk results left to right.
///
/// `fold` must be associative only up to the guarantee the caller needs:
/// because chunk boundaries and the merge order are fixed, floating-point
/// accumulation is reproducible across backends.
pub fn ordered_chunk_fold<T, R, I, F, M>(
    mode: ExecMode,
    items: &[T],
    chunk_size: usize,
    init: I,
    fold: F,
    merge: M,
) -> Option<R>
where
    T: Sync,
    R: Send,
    I: Fn() -> R + Sync + Send,
    F: Fn(R, &T) -> R + Sync + Send,
    M: Fn(R, R) -> R,
{
    let chunk_size = chunk_size.max(1);
    let per_chunk: Vec<R> = match mode {
        ExecMode::Sequential => items
            .chunks(chunk_size)
            .map(|c| c.iter().fold(init(), &fold))
            .collect(),
        #[cfg(feature = "parallel")]
        ExecMode::Parallel => {
            use rayon::prelude::*;
            items
                .par_chunks(chunk_size)
                .map(|c| c.iter().fold(init(), &fold))
                .collect()
        }
    };
    per_chunk.into_iter().reduce(merge)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ordered_map_preserves_order() {
        let items: Vec<usize> = (0..100).collect();
        let out = ordered_map(ExecMode::auto(), &items, |&x| x * 2);
        assert_eq!(out, (0..100).map(|x| x * 2).collect::<Vec<_>>());
    }

    #[test]
    fn chunk_fold_matches_sequential_sum_exactly() {
        // Values chosen so that naive reordering would change the f64 result.
        let items: Vec<f64> = (0..1000)
            .map(|i| (i as f64 * 0.37).sin() * 10f64.powi((i % 7) as i32 - 3))
            .collect();
        let seq = ordered_chunk_fold(
            ExecMode::Sequential,
            &items,
            8,
            || 0.0,
            |acc, &x| acc + x,
            |a, b| a + b,
        )
        .unwrap();
        let auto = ordered_chunk_fold(
            ExecMode::auto(),
            &items,
            8,
            || 0.0,
            |acc, &x| acc + x,
            |a, b| a + b,
        )
        .unwrap();
        assert_eq!(seq.to_bits(), auto.to_bits());
    }

    #[test]
    fn chunk_fold_empty_input() {
        let items: Vec<f64> = vec![];
        let out = ordered_chunk_fold(
            ExecMode::auto(),
            &items,
            4,
            || 0.0,
            |acc, &x| acc + x,
            |a, b| a + b,
        );
        assert!(out.is_none());
    }
}
