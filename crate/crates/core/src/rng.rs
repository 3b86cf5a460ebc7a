//! Seekable, hierarchically addressed random streams.
//!
//! Every random quantity in a run is owned by a [`StreamKey`] (derived from the
//! run seed and a path of indices such as outer level, outer sample and pool
//! index) and a 64-bit lane. The pair selects a ChaCha8 keystream, so any
//! draw can be regenerated in isolation and the output of a run does not
//! depend on the order in which samples are evaluated.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// 256-bit stream key built from a seed and a path of indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamKey {
    words: [u64; 4],
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl StreamKey {
    pub fn new(seed: u64) -> Self {
        let mut words = [0u64; 4];
        let mut s = seed;
        for (i, w) in words.iter_mut().enumerate() {
            s = splitmix(s ^ (i as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
            *w = s;
        }
        StreamKey { words }
    }

    /// Key of the sub-stream addressed by `index` below this one.
    pub fn child(&self, index: u64) -> Self {
        let mut words = self.words;
        let mut carry = splitmix(index ^ 0xA076_1D64_78BD_642F);
        for w in words.iter_mut() {
            carry = splitmix(*w ^ carry);
            *w = carry;
        }
        StreamKey { words }
    }

    pub fn path(seed: u64, indices: &[u64]) -> Self {
        indices.iter().fold(StreamKey::new(seed), |k, &i| k.child(i))
    }

    fn seed_bytes(&self) -> [u8; 32] {
        let mut out = [0u8; 32];
        for (i, w) in self.words.iter().enumerate() {
            out[8 * i..8 * i + 8].copy_from_slice(&w.to_le_bytes());
        }
        out
    }

    pub fn stream(&self, lane: u64) -> IncrementStream {
        IncrementStream::new(*self, lane)
    }
}

/// A stream of standard normals (and uniforms) on one `(key, lane)` pair.
///
/// Normals are produced in Box–Muller pairs from two consecutive 64-bit
/// words, so when a stream is used only for normals, normal `n` is a pure
/// function of `(key, lane, n)` and can be reached with [`seek_normal`].
///
/// [`seek_normal`]: IncrementStream::seek_normal
#[derive(Clone, Debug)]
pub struct IncrementStream {
    key: StreamKey,
    lane: u64,
    rng: ChaCha8Rng,
    spare: Option<f64>,
    position: u64,
}

// 2^-53
const UNIT: f64 = 1.0 / 9_007_199_254_740_992.0;

impl IncrementStream {
    pub fn new(key: StreamKey, lane: u64) -> Self {
        let mut rng = ChaCha8Rng::from_seed(key.seed_bytes());
        rng.set_stream(lane);
        IncrementStream {
            key,
            lane,
            rng,
            spare: None,
            position: 0,
        }
    }

    pub fn key(&self) -> StreamKey {
        self.key
    }

    pub fn lane(&self) -> u64 {
        self.lane
    }

    /// Number of normals handed out since the stream start (or last seek).
    pub fn position(&self) -> u64 {
        self.position
    }

    /// Uniform on the open interval (0, 1).
    #[inline]
    fn open_unit(&mut self) -> f64 {
        ((self.rng.next_u64() >> 11) as f64 + 0.5) * UNIT
    }

    /// Uniform on [0, 1). Consumes one word and discards any cached normal.
    pub fn uniform(&mut self) -> f64 {
        self.spare = None;
        (self.rng.next_u64() >> 11) as f64 * UNIT
    }

    #[inline]
    pub fn normal(&mut self) -> f64 {
        self.position += 1;
        if let Some(z) = self.spare.take() {
            return z;
        }
        let u1 = self.open_unit();
        let u2 = self.open_unit();
        let radius = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        self.spare = Some(radius * s);
        radius * c
    }

    /// Positions the stream so that the next call to [`normal`](Self::normal)
    /// returns normal number `n`. Only meaningful for normal-only streams.
    pub fn seek_normal(&mut self, n: u64) {
        let pair = n / 2;
        // each pair uses two u64 words = four 32-bit words
        self.rng.set_word_pos(pair as u128 * 4);
        self.spare = None;
        self.position = pair * 2;
        if n % 2 == 1 {
            self.normal();
        }
    }

    /// Normal number `n` of this `(key, lane)`, without disturbing `self`.
    pub fn normal_at(&self, n: u64) -> f64 {
        let mut s = IncrementStream::new(self.key, self.lane);
        s.seek_normal(n);
        s.normal()
    }

    pub fn fill_normals(&mut self, out: &mut [f64]) {
        for z in out.iter_mut() {
            *z = self.normal();
        }
    }
}
