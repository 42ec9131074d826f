//! Named deterministic RNG streams.
//!
//! All randomness in a run flows from the single config seed through
//! streams derived by name (`data`, `diffusion`, `ddpo`, `translator`,
//! `eval`), so changing how one stage consumes randomness never perturbs
//! another stage's draws.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Derive the stream for `name` from the run seed.
pub fn named(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(b"/");
    hasher.update(name.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// Derive a sub-stream, e.g. one per example or per checkpoint, without
/// consuming draws from the parent stream.
pub fn substream(seed: u64, name: &str, index: u64) -> ChaCha8Rng {
    named(seed, &format!("{name}#{index}"))
}

/// One standard-normal draw (Box-Muller, cosine branch).
pub fn randn(rng: &mut impl rand::Rng) -> f64 {
    loop {
        let u1: f64 = rng.gen();
        if u1 > 0.0 {
            let u2: f64 = rng.gen();
            return (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
    }
}
