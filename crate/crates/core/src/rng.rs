//! Seeded, portable random substreams.
//!
//! Every random draw in the crate comes from a ChaCha8 block-cipher stream.
//! ChaCha is counter based: a 256-bit key plus a 64-bit stream id address an
//! independent keystream, so any substream can be opened directly without
//! advancing a shared generator. The key is the little-endian 64-bit seed
//! zero-padded to 32 bytes; the stream id is the substream index.
//!
//! Hierarchical seeds (run → instance → strategy → purpose) are derived with
//! the SplitMix64 finalizer, which is a published bijective mixer.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

/// Purpose labels for [`derive_seed`]. Fixed values: changing them changes every
/// recorded number.
pub mod purpose {
    pub const INSTANCE: u64 = 0x10;
    pub const STRATEGY: u64 = 0x20;
    pub const AUXILIARY: u64 = 0x30;
    pub const MC_INVERSION: u64 = 0x40;
    pub const MC_RECONSTRUCTION: u64 = 0x41;
    pub const TRANSFORMS: u64 = 0x50;
    pub const ORACLE: u64 = 0x60;
}

const GOLDEN_GAMMA: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN_GAMMA);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(parent, purpose, index)`.
pub fn derive_seed(parent: u64, purpose: u64, index: u64) -> u64 {
    splitmix64(splitmix64(parent ^ splitmix64(purpose)).wrapping_add(index))
}

/// Opens substream `stream` of the generator keyed by `seed`.
pub fn substream(seed: u64, stream: u64) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    let mut rng = ChaCha8Rng::from_seed(key);
    rng.set_stream(stream);
    rng
}
