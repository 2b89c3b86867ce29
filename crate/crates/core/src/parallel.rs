//! Deterministic chunked Monte Carlo.
//!
//! Work of `total` samples is cut into fixed-size chunks. Chunk `i` of a job
//! labelled by a [`Tag`] draws from its own ChaCha8 stream: the key is derived
//! from `(seed, tag)` and the stream number is `i`. Chunk results are merged
//! in chunk order, so the outcome depends on the seed and chunk size but never
//! on the number of worker threads.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::Result;

pub type StreamRng = ChaCha8Rng;

/// Number of samples handled by one chunk unless an operation says otherwise.
pub const CHUNK_SIZE: usize = 4096;

/// Identifies one independent family of random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Tag(u64);

impl Tag {
    pub fn new(label: &str) -> Self {
        // FNV-1a
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.as_bytes() {
            h ^= u64::from(*b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Tag(h)
    }

    /// Derived tag, e.g. one per horizon in a sweep.
    pub fn with(self, salt: u64) -> Self {
        Tag(splitmix64(
            self.0 ^ splitmix64(salt.wrapping_add(0x9e37_79b9_7f4a_7c15)),
        ))
    }

    pub fn raw(self) -> u64 {
        self.0
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed and worker count for a Monte Carlo computation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MonteCarlo {
    pub seed: u64,
    pub workers: usize,
}

impl MonteCarlo {
    pub fn new(seed: u64) -> Self {
        MonteCarlo { seed, workers: 1 }
    }

    pub fn with_workers(mut self, workers: usize) -> Self {
        self.workers = workers.max(1);
        self
    }

    /// The random stream for chunk `index` of the job labelled `tag`.
    pub fn stream(&self, tag: Tag, index: u64) -> StreamRng {
        let mut state = self.seed ^ tag.raw().rotate_left(17);
        let mut key = [0u8; 32];
        for word in key.chunks_exact_mut(8) {
            state = splitmix64(state);
            word.copy_from_slice(&state.to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(index);
        rng
    }

    /// Runs `produce` on every chunk of `0..total` and folds the results in
    /// chunk order into `acc`.
    pub fn fold_chunks<T, A, F, M>(
        &self,
        tag: Tag,
        total: usize,
        chunk_size: usize,
        mut acc: A,
        produce: F,
        mut merge: M,
    ) -> Result<A>
    where
        T: Send,
        F: Fn(&mut StreamRng, Range<usize>) -> Result<T> + Sync,
        M: FnMut(&mut A, T),
    {
        let chunk_size = chunk_size.max(1);
        let n_chunks = total.div_ceil(chunk_size);
        let run = |i: usize| {
            let mut rng = self.stream(tag, i as u64);
            let lo = i * chunk_size;
            produce(&mut rng, lo..(lo + chunk_size).min(total))
        };
        if self.workers <= 1 || n_chunks <= 1 {
            for i in 0..n_chunks {
                merge(&mut acc, run(i)?);
            }
            return Ok(acc);
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.workers)
            .build()
            .expect("failed to build worker pool");
        // Waves bound the number of chunk results held at once.
        let wave = self.workers * 4;
        let mut start = 0;
        while start < n_chunks {
            let end = (start + wave).min(n_chunks);
            let results: Vec<Result<T>> =
                pool.install(|| (start..end).into_par_iter().map(run).collect());
            for r in results {
                merge(&mut acc, r?);
            }
            start = end;
        }
        Ok(acc)
    }

    /// Chunk results in chunk order.
    pub fn map_chunks<T, F>(
        &self,
        tag: Tag,
        total: usize,
        chunk_size: usize,
        produce: F,
    ) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&mut StreamRng, Range<usize>) -> Result<T> + Sync,
    {
        self.fold_chunks(tag, total, chunk_size, Vec::new(), produce, |acc, t| {
            acc.push(t)
        })
    }

    /// One value per sample, in sample order.
    pub fn collect<T, F>(&self, tag: Tag, total: usize, sample: F) -> Result<Vec<T>>
    where
        T: Send,
        F: Fn(&mut StreamRng) -> Result<T> + Sync,
    {
        self.fold_chunks(
            tag,
            total,
            CHUNK_SIZE,
            Vec::with_capacity(total),
            |rng, range| range.map(|_| sample(rng)).collect::<Result<Vec<T>>>(),
            |acc, chunk| acc.extend(chunk),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn results_do_not_depend_on_worker_count() {
        let draw = |rng: &mut StreamRng| -> Result<f64> { Ok(rng.random::<f64>()) };
        let one = MonteCarlo::new(11)
            .collect(Tag::new("t"), 10_000, draw)
            .unwrap();
        let four = MonteCarlo::new(11)
            .with_workers(4)
            .collect(Tag::new("t"), 10_000, draw)
            .unwrap();
        let eight = MonteCarlo::new(11)
            .with_workers(8)
            .collect(Tag::new("t"), 10_000, draw)
            .unwrap();
        assert_eq!(one, four);
        assert_eq!(one, eight);
    }

    #[test]
    fn tags_and_chunks_give_distinct_streams() {
        let mc = MonteCarlo::new(3);
        let a: u64 = mc.stream(Tag::new("a"), 0).random();
        let b: u64 = mc.stream(Tag::new("b"), 0).random();
        let c: u64 = mc.stream(Tag::new("a"), 1).random();
        let d: u64 = mc.stream(Tag::new("a").with(1), 0).random();
        assert!(a != b && a != c && a != d && c != d);
        let again: u64 = MonteCarlo::new(3).stream(Tag::new("a"), 0).random();
        assert_eq!(a, again);
    }

    #[test]
    fn errors_propagate() {
        let mc = MonteCarlo::new(1).with_workers(2);
        let r = mc.map_chunks(Tag::new("e"), 100, 10, |_, range| {
            if range.start == 50 {
                Err(crate::Error::ZeroEffectiveSample)
            } else {
                Ok(())
            }
        });
        assert!(r.is_err());
    }
}
