//! Keyed, counter-based randomness.
//!
//! Every random draw in the crate comes from an [`RngStream`] keyed by
//! `(seed, epoch, example)` plus a [`Domain`]. Identical keys reproduce
//! identical draws on every platform; distinct keys (or domains) give
//! independent streams. The generator is ChaCha8, whose output is a pure
//! function of key, stream id and block counter.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

/// Separates the streams used for unrelated purposes under the same key.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Domain {
    /// Token down-sampling inside the reward kernels.
    Sampling,
    /// Per-epoch example order.
    Shuffle,
    /// Latent world tables of the synthetic corpus.
    World,
    /// Per-triplet corpus draws.
    Example,
    /// Parameter initialization.
    Init,
    /// Random gradient-check instances.
    Gradcheck,
    /// Sampling used by held-out reward evaluation.
    Eval,
}

impl Domain {
    fn stream_id(self) -> u64 {
        match self {
            Domain::Sampling => 0,
            Domain::Shuffle => 1,
            Domain::World => 2,
            Domain::Example => 3,
            Domain::Init => 4,
            Domain::Gradcheck => 5,
            Domain::Eval => 6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngKey {
    pub seed: u64,
    pub epoch: u64,
    pub example: u64,
}

/// A single-consumer random stream.
#[derive(Debug, Clone)]
pub struct RngStream {
    key: RngKey,
    domain: Domain,
    inner: ChaCha8Rng,
}

/// The sampling stream for `(seed, epoch, example)`.
pub fn rng_for(seed: u64, epoch: u64, example: u64) -> RngStream {
    RngStream::new(Domain::Sampling, seed, epoch, example)
}

impl RngStream {
    pub fn new(domain: Domain, seed: u64, epoch: u64, example: u64) -> Self {
        let key = RngKey {
            seed,
            epoch,
            example,
        };
        let mut bytes = [0u8; 32];
        bytes[0..8].copy_from_slice(&seed.to_le_bytes());
        bytes[8..16].copy_from_slice(&epoch.to_le_bytes());
        bytes[16..24].copy_from_slice(&example.to_le_bytes());
        bytes[24..32].copy_from_slice(b"sampo-v1");
        let mut inner = ChaCha8Rng::from_seed(bytes);
        inner.set_stream(domain.stream_id());
        Self { key, domain, inner }
    }

    pub fn key(&self) -> RngKey {
        self.key
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform integer in `[0, n)`. Unbiased (rejection on the top zone).
    ///
    /// # Panics
    /// If `n == 0`.
    pub fn below(&mut self, n: u64) -> u64 {
        assert!(n > 0, "below(0)");
        let zone = u64::MAX - (u64::MAX % n + 1) % n;
        loop {
            let x = self.next_u64();
            if x <= zone {
                return x % n;
            }
        }
    }

    /// Uniform integer in the inclusive range `[lo, hi]`.
    pub fn range_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        debug_assert!(lo <= hi);
        lo + self.below((hi - lo + 1) as u64) as usize
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.next_f64() < p
    }

    /// Standard normal via Box-Muller (one draw per call, the pair's second
    /// value is discarded to keep the stream position simple).
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Index drawn from unnormalized non-negative weights.
    pub fn categorical(&mut self, weights: &[f64]) -> usize {
        let total: f64 = weights.iter().sum();
        let mut u = self.next_f64() * total;
        for (i, &w) in weights.iter().enumerate() {
            if u < w {
                return i;
            }
            u -= w;
        }
        // round-off fell past the end: last positive weight
        weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

#[derive(Serialize, Deserialize)]
struct StreamState {
    key: RngKey,
    domain: Domain,
    word_pos_hi: u64,
    word_pos_lo: u64,
}

impl Serialize for RngStream {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let pos = self.inner.get_word_pos();
        StreamState {
            key: self.key,
            domain: self.domain,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for RngStream {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let st = StreamState::deserialize(d)?;
        let mut rng = RngStream::new(st.domain, st.key.seed, st.key.epoch, st.key.example);
        rng.inner
            .set_word_pos(((st.word_pos_hi as u128) << 64) | st.word_pos_lo as u128);
        Ok(rng)
    }
}
