//! Deterministic, purpose-separated random streams.
//!
//! Every stochastic choice in the crate (parameter init, routing noise, data
//! sampling, ablation draws) pulls from its own `RngStream`, identified by a
//! `(seed, stream)` pair. Identical seed and call sequence reproduce the same
//! samples on every platform, and distinct purposes never interleave.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;

/// Stream ids for the fixed purposes used by the trainer. Analysis code may
/// allocate further ids above `ABLATION`.
pub mod stream {
    pub const INIT: u64 = 0;
    pub const ROUTING_NOISE: u64 = 1;
    pub const DATA: u64 = 2;
    pub const ABLATION: u64 = 3;
}

/// Counter-based random stream: a ChaCha8 generator keyed by `(seed, stream)`.
#[derive(Clone, Debug)]
pub struct RngStream {
    seed: u64,
    stream: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RngStream { seed, stream, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    /// Position of the word counter, for checkpointing.
    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Rebuild a stream at an exact counter position.
    pub fn restore(seed: u64, stream: u64, word_pos: u128) -> Self {
        let mut s = RngStream::new(seed, stream);
        s.rng.set_word_pos(word_pos);
        s
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in the half-open interval (0, 1].
    pub fn uniform_unit(&mut self) -> f64 {
        let bits = self.rng.next_u64() >> 11; // 53 random bits
        (bits + 1) as f64 * (1.0 / 9_007_199_254_740_992.0) // 2^-53
    }

    /// Uniform integer in `[0, n)`.
    pub fn uniform_usize(&mut self, n: usize) -> usize {
        assert!(n > 0);
        // Modulo bias is negligible for the small n used here, but rejection
        // sampling keeps the stream exactly uniform.
        let bound = u64::MAX - u64::MAX % n as u64;
        loop {
            let v = self.rng.next_u64();
            if v < bound {
                return (v % n as u64) as usize;
            }
        }
    }

    /// One standard normal draw via Box-Muller (consumes exactly two words).
    pub fn standard_normal(&mut self) -> f64 {
        let u1 = self.uniform_unit();
        let u2 = self.uniform_unit();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.uniform_usize(i + 1);
            items.swap(i, j);
        }
    }
}

/// I.i.d. Gaussian tensor with the given mean and standard deviation.
///
/// Panics if `std < 0`. `std == 0` yields a constant tensor but still
/// consumes the same number of draws, so downstream streams stay aligned.
pub fn sample_gaussian(rng: &mut RngStream, shape: Vec<usize>, mean: f64, std: f64) -> Tensor {
    assert!(std >= 0.0, "negative std {std}");
    let numel: usize = shape.iter().product();
    let mut data = Vec::with_capacity(numel);
    for _ in 0..numel {
        let z = rng.standard_normal();
        data.push(mean + std * z);
    }
    Tensor::new(shape, data)
}
