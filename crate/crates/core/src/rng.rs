//! Seeded random streams.
//!
//! All randomness flows through [`ChaCha8Rng`]. Independent streams for
//! offspring evaluation are derived from `(run seed, generation, index)` so
//! that concurrent evaluations never share generator state.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

/// Seeds a generator from a 64-bit run seed.
pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derives an independent generator for one evaluation.
pub fn derive_stream(run_seed: u64, generation: u64, index: u64) -> Rng {
    let mut h = splitmix64(run_seed);
    h = splitmix64(h ^ generation.wrapping_mul(0xa076_1d64_78bd_642f));
    h = splitmix64(h ^ index.wrapping_mul(0xe703_7ed1_a0b4_28db));
    let mut rng = seeded(h);
    rng.set_stream(index);
    rng
}

/// Complete, serializable position of a [`Rng`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

impl fmt::Display for RngState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for b in self.seed {
            write!(f, "{b:02x}")?;
        }
        write!(f, " {} {}", self.stream, self.word_pos)
    }
}

impl FromStr for RngState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split_whitespace();
        let hex = parts.next().ok_or("missing rng seed")?;
        if hex.len() != 64 {
            return Err(format!("rng seed must be 64 hex digits, got {}", hex.len()));
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&hex[2 * i..2 * i + 2], 16).map_err(|e| e.to_string())?;
        }
        let stream = parts
            .next()
            .ok_or("missing rng stream")?
            .parse()
            .map_err(|e: std::num::ParseIntError| e.to_string())?;
        let word_pos = parts
            .next()
            .ok_or("missing rng word position")?
            .parse()
            .map_err(|e: std::num::ParseIntError| e.to_string())?;
        if parts.next().is_some() {
            return Err("trailing rng fields".into());
        }
        Ok(RngState {
            seed,
            stream,
            word_pos,
        })
    }
}
