//! Order-preserving chunked map, data-parallel with the `parallel` feature.
//!
//! Chunk boundaries depend only on the input length and chunk size, and
//! results come back in input order, so reductions over the output are
//! identical with and without the feature.

/// Applies `f(offset, chunk)` to consecutive chunks of `items`.
pub fn map_chunks<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(usize, &[T]) -> R + Sync + Send,
{
    let chunk = chunk.max(1);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        items
            .par_chunks(chunk)
            .enumerate()
            .map(|(k, c)| f(k * chunk, c))
            .collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        map_chunks_sequential(items, chunk, f)
    }
}

/// [`map_chunks`] without threads, regardless of features.
pub fn map_chunks_sequential<T, R, F>(items: &[T], chunk: usize, f: F) -> Vec<R>
where
    F: Fn(usize, &[T]) -> R,
{
    let chunk = chunk.max(1);
    items.chunks(chunk).enumerate().map(|(k, c)| f(k * chunk, c)).collect()
}

/// Applies `f` to every index in `0..n`, preserving order.
pub fn map_indices<R, F>(n: usize, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(usize) -> R + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}

/// SplitMix64 finaliser, used to derive independent sub-seeds.
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut x: u64 = 0x9E37_79B9_7F4A_7C15;
    for &p in parts {
        x = x.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn chunks_keep_order_and_offsets() {
        let v: Vec<usize> = (0..10).collect();
        let out = map_chunks(&v, 3, |off, c| (off, c.iter().sum::<usize>()));
        assert_eq!(out, vec![(0, 3), (3, 12), (6, 21), (9, 9)]);
        assert_eq!(map_indices(4, |i| i * i), vec![0, 1, 4, 9]);
    }

    #[test]
    fn sub_seeds_differ() {
        assert_ne!(mix_seed(&[1, 2]), mix_seed(&[2, 1]));
        assert_eq!(mix_seed(&[7]), mix_seed(&[7]));
    }
}
