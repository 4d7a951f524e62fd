//! Deterministic randomness. Every random draw in the system flows from one
//! master seed through named sub-streams, so each component (weight init,
//! batch sampling, phantom generation, history buffers) is independently
//! reproducible and resumable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A seekable random stream identified by (master seed, name).
pub struct NamedStream {
    pub name: String,
    rng: ChaCha8Rng,
}

fn derive_seed(master: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update([0x1f]);
    h.update(name.as_bytes());
    h.finalize().into()
}

impl NamedStream {
    pub fn new(master: u64, name: &str) -> NamedStream {
        NamedStream {
            name: name.to_string(),
            rng: ChaCha8Rng::from_seed(derive_seed(master, name)),
        }
    }

    /// Recreate a stream at an exact position (checkpoint resume).
    pub fn restore(master: u64, name: &str, word_pos: u128) -> NamedStream {
        let mut s = NamedStream::new(master, name);
        s.rng.set_word_pos(word_pos);
        s
    }

    pub fn word_pos(&self) -> u128 {
        self.rng.get_word_pos()
    }

    /// Uniform integer in [0, n).
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0);
        self.rng.gen_range(0..n)
    }

    /// Uniform f64 in [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Uniform f64 in [lo, hi).
    pub fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Standard normal via Box-Muller, scaled by std.
    pub fn normal(&mut self, std: f64) -> f64 {
        // u1 in (0,1] keeps the log finite
        let u1 = 1.0 - self.uniform();
        let u2 = self.uniform();
        std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    /// Fill a buffer with N(0, std) fp32 samples.
    pub fn normal_f32_vec(&mut self, n: usize, std: f64) -> Vec<f32> {
        (0..n).map(|_| self.normal(std) as f32).collect()
    }
}
