//! Named random streams derived from one master seed.
//!
//! Each stream is seeded with `SHA-256(master_le || label || index_le)`, so
//! consuming randomness in one stream (say, reservoir decisions) never shifts
//! another (say, data shuffling).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub mod stream {
    pub const INIT: &str = "init";
    pub const HEAD: &str = "head-row";
    pub const SHUFFLE: &str = "shuffle";
    pub const RESERVOIR: &str = "reservoir";
    pub const REPLAY: &str = "replay-sample";
    pub const CODEBOOK: &str = "codebook";
    pub const NISPA: &str = "nispa";
    pub const SYNTH: &str = "synth";
}

/// 32-byte seed for `(master, label, index)`.
pub fn derive_seed(master: u64, label: &str, index: u64) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(label.as_bytes());
    h.update([0u8]);
    h.update(index.to_le_bytes());
    h.finalize().into()
}

pub fn stream_rng(master: u64, label: &str, index: u64) -> StreamRng {
    ChaCha8Rng::from_seed(derive_seed(master, label, index))
}

/// Derived 64-bit seed, for components that take a plain integer seed.
pub fn derive_u64(master: u64, label: &str, index: u64) -> u64 {
    let s = derive_seed(master, label, index);
    u64::from_le_bytes(s[..8].try_into().expect("8 bytes"))
}
