//! Seeded random streams.
//!
//! Every consumer of randomness gets its own [`RngStream`] keyed by
//! `(seed, stream_id)`. Streams are independent ChaCha8 streams, so the
//! values drawn from one never depend on how many values another consumed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Stream ids are namespaced by purpose so that, e.g., client 3's training
/// stream never collides with the dataset generator.
pub mod streams {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const PARTITION: u64 = 3;
    pub const PROBE: u64 = 4;
    pub const SCRAMBLE: u64 = 5;
    pub const TEST_SPLIT: u64 = 6;

    /// Stream for one client's local training in one round.
    pub fn client_round(client: usize, round: usize) -> u64 {
        (1u64 << 32) | ((round as u64) << 16) | client as u64
    }
}

#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            rng,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Derives an independent child stream; the parent is not advanced.
    pub fn fork(&self, sub: u64) -> RngStream {
        let mixed = self
            .stream_id
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .rotate_left(17)
            ^ sub;
        RngStream::new(self.seed ^ 0xD1B5_4A32_D192_ED03, mixed)
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn uniform_range(&mut self, low: f64, high: f64) -> f64 {
        low + (high - low) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.rng)
    }

    /// Uniform index in `[0, n)`.
    pub fn index(&mut self, n: usize) -> usize {
        self.rng.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }

    pub(crate) fn inner(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_key_same_sequence() {
        let mut a = RngStream::new(7, 3);
        let mut b = RngStream::new(7, 3);
        for _ in 0..100 {
            assert_eq!(a.uniform().to_bits(), b.uniform().to_bits());
        }
    }

    #[test]
    fn streams_do_not_interfere() {
        let mut solo = RngStream::new(11, 2);
        let expected: Vec<f64> = (0..10).map(|_| solo.normal()).collect();

        let mut other = RngStream::new(11, 1);
        let mut target = RngStream::new(11, 2);
        let mut got = Vec::new();
        for _ in 0..10 {
            other.normal();
            other.normal();
            got.push(target.normal());
        }
        assert_eq!(expected, got);
    }

    #[test]
    fn different_streams_differ() {
        let mut a = RngStream::new(5, 1);
        let mut b = RngStream::new(5, 2);
        let xs: Vec<f64> = (0..4).map(|_| a.uniform()).collect();
        let ys: Vec<f64> = (0..4).map(|_| b.uniform()).collect();
        assert_ne!(xs, ys);
    }

    #[test]
    fn permutation_is_bijection() {
        let mut r = RngStream::new(1, 1);
        let mut p = r.permutation(50);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
    }
}
