//! Seeded randomness with named sub-streams.
//!
//! Every stochastic component draws from its own stream derived from the run
//! seed and a stream name, so changing one component's draw count (say, the
//! number of controller samples) never perturbs another's (data generation).

use rand::Rng as _;
use rand_chacha::rand_core::SeedableRng;

use crate::error::{KforgeError, Result};

pub type Rng = rand_chacha::ChaCha8Rng;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Derive the RNG stream `name` from a run seed.
pub fn stream(seed: u64, name: &str) -> Rng {
    Rng::seed_from_u64(splitmix64(seed ^ fnv1a(name.as_bytes())))
}

/// Draw an index from a categorical distribution by inverse CDF on a single
/// uniform sample.
pub fn categorical_sample(probs: &[f64], rng: &mut Rng) -> Result<usize> {
    if probs.is_empty() {
        return Err(KforgeError::InvalidDistribution("empty".into()));
    }
    let mut total = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        if !p.is_finite() || p < 0.0 {
            return Err(KforgeError::InvalidDistribution(format!(
                "probs[{i}] = {p}"
            )));
        }
        total += p;
    }
    if (total - 1.0).abs() > 1e-6 {
        return Err(KforgeError::InvalidDistribution(format!(
            "sum = {total}, expected 1"
        )));
    }
    let u: f64 = rng.random::<f64>() * total;
    let mut cum = 0.0;
    let mut last_nonzero = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_nonzero = i;
        }
        cum += p;
        if u < cum {
            return Ok(i);
        }
    }
    // Rounding pushed u past the final cumulative sum.
    Ok(last_nonzero)
}
