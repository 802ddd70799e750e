//! Deterministic, splittable random number streams.
//!
//! Every stochastic component in the crate draws from an [`RngStream`], a
//! counter-based generator addressed by (seed, stream_id). Equal addresses
//! produce identical sequences on every platform, cloning a stream replays
//! its future draws (used for common-random-number gradient estimation), and
//! substreams give independent flows to parallel work items without
//! coordination.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// splitmix64 finalizer; used to derive well-separated substream ids.
fn mix64(mut x: u64) -> u64 {
    x ^= x >> 30;
    x = x.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x ^= x >> 27;
    x = x.wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    x
}

/// Counter-based random stream: state is fully described by
/// (seed, stream_id, counter).
#[derive(Debug, Clone)]
pub struct RngStream {
    seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> RngStream {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream_id);
        RngStream { seed, stream_id, rng }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Number of 32-bit words consumed so far.
    pub fn counter(&self) -> u64 {
        self.rng.get_word_pos() as u64
    }

    /// Derives an independent stream for sub-task `id`. Children of distinct
    /// ids (and of distinct parents) get well-separated stream ids.
    pub fn substream(&self, id: u64) -> RngStream {
        let child = mix64(self.stream_id ^ GOLDEN.wrapping_mul(id.wrapping_add(1)));
        RngStream::new(self.seed, child)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform draw in [0, 1).
    pub fn uniform(&mut self) -> f32 {
        self.uniform_f64() as f32
    }

    /// Uniform draw in [0, 1) with 53-bit resolution.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Unbiased uniform draw from {0, .., n-1} by rejection.
    pub fn range_usize(&mut self, n: usize) -> usize {
        assert!(n > 0, "range_usize needs n > 0");
        let n64 = n as u64;
        let zone = u64::MAX - (u64::MAX % n64);
        loop {
            let x = self.next_u64();
            if x < zone {
                return (x % n64) as usize;
            }
        }
    }

    /// Uniform draw in [lo, hi).
    pub fn uniform_in(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal draw via Box-Muller (two uniforms per value; no spare
    /// is cached so the stream state stays a pure word counter).
    pub fn normal_f64(&mut self) -> f64 {
        // u1 in (0, 1] keeps ln finite.
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
        let u2 = self.uniform_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal(&mut self) -> f32 {
        self.normal_f64() as f32
    }

    pub fn fill_normal(&mut self, out: &mut [f32]) {
        for v in out.iter_mut() {
            *v = self.normal();
        }
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, xs: &mut [T]) {
        for i in (1..xs.len()).rev() {
            let j = self.range_usize(i + 1);
            xs.swap(i, j);
        }
    }
}
