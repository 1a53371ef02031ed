//! Deterministic random streams.
//!
//! Every seed owns a family of independent ChaCha8 streams. Stream ids are
//! fixed so that paired runs (different guidance modes on the same seed) see
//! identical data and sampler noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const DATA_STREAM: u64 = 0;
pub const SAMPLER_STREAM: u64 = 1;
const PROBE_STREAM_BASE: u64 = 1 << 32;

pub fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Probe stream for a labelled consumer (e.g. a guidance mode name).
pub fn probe_stream(seed: u64, label: &str) -> ChaCha8Rng {
    stream(seed, PROBE_STREAM_BASE | (fnv1a(label) >> 32))
}

/// 64-bit FNV-1a; stable across platforms and toolchains.
pub fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub fn rademacher<R: Rng + ?Sized>(rng: &mut R, d: usize) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_fn(d, |_, _| if rng.random::<bool>() { 1.0 } else { -1.0 })
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, d: usize) -> nalgebra::DVector<f64> {
    nalgebra::DVector::from_fn(d, |_, _| rng.sample::<f64, _>(rand_distr::StandardNormal))
}
