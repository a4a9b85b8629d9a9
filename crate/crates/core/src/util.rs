//! Seed derivation, stable hashing, and small shared helpers.
//!
//! Every random draw in the crate flows through a `ChaCha8Rng` whose seed is
//! derived here, so a run is a pure function of its top-level seed.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// splitmix64 finalizer; good avalanche, cheap, stable across platforms.
fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// FNV-1a over a byte slice. Used for vocabulary hashes and seed salts.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a child seed from a base seed, a purpose label, and an index.
///
/// Distinct labels give statistically independent streams, e.g.
/// `derive_seed(seed, "mask", step)` for the per-step mask stream.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let salt = fnv1a(label.as_bytes());
    splitmix64(base ^ splitmix64(salt) ^ splitmix64(index.wrapping_mul(0xA24B_AED4_963E_E407)))
}

/// Seeded RNG for a (base, label, index) triple.
pub fn rng_for(base: u64, label: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(base, label, index))
}

/// Format a float for table/CSV output: fixed 4 decimal places, stable
/// across platforms (no locale, no scientific notation).
pub fn fmt_metric(v: f64) -> String {
    if v.is_nan() {
        "nan".to_string()
    } else {
        format!("{v:.4}")
    }
}
