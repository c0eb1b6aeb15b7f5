//! Counter-based random streams.
//!
//! Every random decision in the toolkit is drawn from a ChaCha8 stream whose
//! key is derived from a root seed and a path of integer coordinates
//! (batch counter, image position, setting index, ...). Streams never share
//! state, so results do not depend on evaluation order or worker count.
//!
//! Derivation, fixed for cross-language reproduction:
//!
//! * `splitmix64(x)`: the standard SplitMix64 finalizer applied to
//!   `x + 0x9E3779B97F4A7C15`.
//! * `derive_seed(root, path)`: `h = splitmix64(root)`, then for every
//!   coordinate `c`: `h = splitmix64(h ^ splitmix64(c))`.
//! * the ChaCha8 key is the four words `splitmix64(h), splitmix64(h+1),
//!   splitmix64(h+2), splitmix64(h+3)` in little-endian byte order; the
//!   stream id and block counter start at zero.
//! * integers below `n` use rejection on `next_u64` (reject values at or
//!   above the largest multiple of `n`), then `x % n`.
//! * uniform reals use the top 53 bits of `next_u64` scaled by 2^-53.
//! * normals use Box-Muller (`sqrt(-2 ln(1-u1)) * cos(2 pi u2)`), one draw
//!   per pair of uniforms.

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type Stream = ChaCha8Rng;

pub fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn derive_seed(root: u64, path: &[u64]) -> u64 {
    path.iter()
        .fold(splitmix64(root), |h, &c| splitmix64(h ^ splitmix64(c)))
}

/// Opens the stream addressed by `path` under `root`.
pub fn stream(root: u64, path: &[u64]) -> Stream {
    let h = derive_seed(root, path);
    let mut key = [0u8; 32];
    for (i, chunk) in key.chunks_exact_mut(8).enumerate() {
        chunk.copy_from_slice(&splitmix64(h.wrapping_add(i as u64)).to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// Hashes a short ASCII tag into a path coordinate.
pub const fn tag(name: &str) -> u64 {
    // FNV-1a
    let bytes = name.as_bytes();
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    let mut i = 0;
    while i < bytes.len() {
        h ^= bytes[i] as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
        i += 1;
    }
    h
}

pub fn uniform_below<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> usize {
    assert!(n > 0, "uniform_below(0)");
    let n = n as u64;
    let zone = u64::MAX - (u64::MAX % n);
    loop {
        let x = rng.next_u64();
        if x < zone {
            return (x % n) as usize;
        }
    }
}

/// Uniform in [0, 1).
pub fn uniform<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

pub fn uniform_range<R: RngCore + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * uniform(rng)
}

pub fn standard_normal<R: RngCore + ?Sized>(rng: &mut R) -> f64 {
    let u1 = uniform(rng);
    let u2 = uniform(rng);
    (-2.0 * (1.0 - u1).ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Draws `m` distinct indices from `0..n` uniformly without replacement
/// (partial Fisher-Yates). The order of the result is the draw order.
pub fn sample_without_replacement<R: RngCore + ?Sized>(rng: &mut R, n: usize, m: usize) -> Vec<usize> {
    assert!(m <= n, "cannot draw {m} of {n}");
    let mut pool: Vec<usize> = (0..n).collect();
    for i in 0..m {
        let j = i + uniform_below(rng, n - i);
        pool.swap(i, j);
    }
    pool.truncate(m);
    pool
}

/// Uniform random permutation of `0..n`.
pub fn permutation<R: RngCore + ?Sized>(rng: &mut R, n: usize) -> Vec<usize> {
    sample_without_replacement(rng, n, n)
}
