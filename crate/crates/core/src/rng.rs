//! Order-independent RNG streams keyed by tuples of integers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains for the second key word. The high bit keeps them clear
/// of epoch numbers, which view streams place in that word.
pub mod domain {
    pub const SAMPLE: u64 = 1 << 63 | 1;
    pub const BAND_RESPONSE: u64 = 1 << 63 | 2;
    pub const SHUFFLE: u64 = 1 << 63 | 3;
    pub const FINETUNE: u64 = 1 << 63 | 4;
}

/// ChaCha8 stream whose 256-bit key is the four words, little-endian.
pub fn keyed(words: [u64; 4]) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for (i, w) in words.iter().enumerate() {
        key[i * 8..(i + 1) * 8].copy_from_slice(&w.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}
