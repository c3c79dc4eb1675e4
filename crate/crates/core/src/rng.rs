//! Counter-based Gaussian streams.
//!
//! Every random draw in the crate is a pure function of `(key, stream, index)`.
//! The key is a 64-bit seed expanded into a ChaCha8 key, the stream selects
//! the ChaCha nonce and the index selects the word position. One standard
//! normal consumes exactly two 64-bit words (four 32-bit ChaCha words), so
//! element `i` of a stream always starts at word position `4 * i`
//! regardless of how many other elements were drawn before it.
//!
//! Gaussian transform (cosine branch of Box–Muller):
//!
//! ```text
//! a, b  = next_u64(), next_u64()
//! u1    = ((a >> 11) + 1) * 2^-53        in (0, 1]
//! u2    = (b >> 11) * 2^-53              in [0, 1)
//! z     = sqrt(-2 ln u1) * cos(2 pi u2)
//! ```
//!
//! Stream layout used by the rest of the crate:
//!
//! | purpose                   | key                          | stream            |
//! |---------------------------|------------------------------|-------------------|
//! | random plant taps         | `derive_seed(seed, PLANT)`   | 0                 |
//! | output noise of query `q` | `derive_seed(seed, NOISE)`   | `2q`              |
//! | process noise of query `q`| `derive_seed(seed, NOISE)`   | `2q + 1`          |
//! | Monte-Carlo sample `i`    | `derive_seed(seed, MC)`      | `i`               |
//! | perturbation filter `i`   | `derive_seed(seed, PERTURB)` | `i`               |
//! | closed-loop sensor noise  | `derive_seed(seed, SIM)`     | 0                 |

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const PLANT: u64 = 0x0050_4c41_4e54;
pub const NOISE: u64 = 0x004e_4f49_5345;
pub const MC: u64 = 0x4d43;
pub const PERTURB: u64 = 0x5045_5254;
pub const SIM: u64 = 0x0053_494d;

const TWO_PI: f64 = std::f64::consts::TAU;
const INV_2_53: f64 = 1.0 / (1u64 << 53) as f64;

/// SplitMix64 finalizer applied to `seed ^ tag`; separates the sub-keys derived
/// from a single user seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = (seed ^ tag.rotate_left(17)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// A positioned reader over one `(key, stream)` pair.
#[derive(Clone, Debug)]
pub struct GaussianStream {
    rng: ChaCha8Rng,
}

impl GaussianStream {
    pub fn new(key: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(key);
        rng.set_stream(stream);
        Self { rng }
    }

    /// Positions the stream so that the next draw is element `index`.
    pub fn at(key: u64, stream: u64, index: u64) -> Self {
        let mut s = Self::new(key, stream);
        s.seek(index);
        s
    }

    pub fn seek(&mut self, index: u64) {
        self.rng.set_word_pos(4 * index as u128);
    }

    /// Uniform draw in `[0, 1)`. Consumes one 64-bit word; callers that mix
    /// uniforms and normals lose per-element addressability.
    pub fn uniform(&mut self) -> f64 {
        (self.rng.next_u64() >> 11) as f64 * INV_2_53
    }

    pub fn normal(&mut self) -> f64 {
        let a = self.rng.next_u64();
        let b = self.rng.next_u64();
        let u1 = ((a >> 11) + 1) as f64 * INV_2_53;
        let u2 = (b >> 11) as f64 * INV_2_53;
        (-2.0 * u1.ln()).sqrt() * (TWO_PI * u2).cos()
    }

    pub fn fill_normal(&mut self, out: &mut [f64]) {
        for x in out.iter_mut() {
            *x = self.normal();
        }
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }
}

/// Element `index` of the standard-normal stream `(key, stream)`.
pub fn normal_at(key: u64, stream: u64, index: u64) -> f64 {
    GaussianStream::at(key, stream, index).normal()
}
