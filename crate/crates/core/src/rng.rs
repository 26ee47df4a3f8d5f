//! Deterministic pseudo-random numbers.
//!
//! A xoshiro256** generator seeded through splitmix64. The sequence is
//! a pure function of the seed and is identical on every platform,
//! which is what makes checkpoints, sampled batches and generated
//! images bit-reproducible.

/// xoshiro256** with splitmix64 seed expansion.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng {
    state: [u64; 4],
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e3779b97f4a7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^ (z >> 31)
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        let mut s = seed;
        Self {
            state: [
                splitmix64(&mut s),
                splitmix64(&mut s),
                splitmix64(&mut s),
                splitmix64(&mut s),
            ],
        }
    }

    /// Independent stream derived from (seed, stream id). Used to give
    /// init, batch sampling and decoding their own sequences.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut s = seed ^ stream.wrapping_mul(0xd2b74407b1ce6e93);
        let _ = splitmix64(&mut s);
        Self::new(splitmix64(&mut s))
    }

    pub fn next_u64(&mut self) -> u64 {
        let result = self.state[1]
            .wrapping_mul(5)
            .rotate_left(7)
            .wrapping_mul(9);
        let t = self.state[1] << 17;
        self.state[2] ^= self.state[0];
        self.state[3] ^= self.state[1];
        self.state[1] ^= self.state[2];
        self.state[0] ^= self.state[3];
        self.state[2] ^= t;
        self.state[3] = self.state[3].rotate_left(45);
        result
    }

    /// Uniform in [0, 1) with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in [0, bound). Rejection-free modulo is fine
    /// here: bounds are tiny relative to 2^64 so the bias is
    /// negligible, and determinism is what matters.
    pub fn below(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        (self.next_u64() % bound as u64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller. Draws two uniforms per value;
    /// the second output is discarded to keep the call stateless.
    pub fn normal(&mut self) -> f64 {
        let u1 = (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.next_f64();
        let r = libm::sqrt(-2.0 * libm::log(1.0 - u1));
        r * libm::cos(2.0 * core::f64::consts::PI * u2)
    }

    /// Index drawn from an unnormalized weight vector.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        debug_assert!(total > 0.0);
        let mut dart = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            dart -= w;
            if dart < 0.0 {
                return i;
            }
        }
        weights.len() - 1
    }

    /// Raw state, exposed so checkpoints can persist and restore the
    /// exact position in the stream.
    pub fn state(&self) -> [u64; 4] {
        self.state
    }

    pub fn from_state(state: [u64; 4]) -> Self {
        Self { state }
    }
}
