//! Deterministic randomness.
//!
//! Every stochastic component derives its stream from explicit integer keys,
//! so parallel and serial runs of the same experiment see identical draws.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// splitmix64 step; used to mix seed components into independent streams.
pub fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Mixes any number of key components into a single 64-bit seed.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut state = 0x6a09_e667_f3bc_c909u64;
    let mut acc = 0u64;
    for &p in parts {
        state ^= p;
        acc ^= splitmix64(&mut state);
    }
    acc
}

/// One task gets one stream; the stream depends only on its keys.
pub fn rng_from(parts: &[u64]) -> ChaCha8Rng {
    let mut state = derive_seed(parts);
    let mut seed = [0u8; 32];
    for chunk in seed.chunks_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    ChaCha8Rng::from_seed(seed)
}

/// Standard normal via Box-Muller (avoids a rand_distr dependency).
pub fn normal_f64(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = loop {
        let u: f64 = rng.gen();
        if u > 1e-12 {
            break u;
        }
    };
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn normal_f32(rng: &mut ChaCha8Rng) -> f32 {
    normal_f64(rng) as f32
}

/// Knuth's product method; adequate for the photon counts used by shot noise.
pub fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    // Split large lambda so exp(-lambda) stays representable.
    if lambda > 400.0 {
        return poisson(rng, lambda / 2.0) + poisson(rng, lambda - lambda / 2.0);
    }
    let threshold = (-lambda).exp();
    let mut k = 0u64;
    let mut p = 1.0f64;
    loop {
        p *= rng.gen::<f64>();
        if p <= threshold {
            return k;
        }
        k += 1;
    }
}

/// Deterministic in-place Fisher-Yates shuffle.
pub fn shuffle<T>(items: &mut [T], rng: &mut ChaCha8Rng) {
    for i in (1..items.len()).rev() {
        let j = rng.gen_range(0..=i);
        items.swap(i, j);
    }
}
