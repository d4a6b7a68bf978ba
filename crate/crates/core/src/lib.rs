//! OFDM link simulation and neural receivers with axial self-attention.

pub mod autodiff;
pub mod baseline;
pub mod channel;
pub mod checkpoint;
pub mod complexity;
pub mod config;
pub mod error;
pub mod layers;
pub mod ldpc;
pub mod link;
pub mod phy;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};

/// First line of every artifact written by the tools.
pub fn provenance_line(config_hash: &str, seed: u64) -> String {
    format!(
        "# axrx v{} config_hash={config_hash} seed={seed}",
        env!("CARGO_PKG_VERSION")
    )
}

/// Mixes `tags` into `base` so every (sample, purpose) pair gets an
/// independent stream.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    let mut s = base;
    for &t in tags {
        s = splitmix64(s ^ splitmix64(t.wrapping_add(0x9E37_79B9_7F4A_7C15)));
    }
    splitmix64(s)
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
