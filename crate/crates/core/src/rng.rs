//! Seeded randomness. All randomness in the engine flows from one root seed
//! through named sub-streams, so runs are reproducible and individual
//! consumers (data, init, sampler, dropout) stay independent of each other.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Root seed expanded into independent named streams.
#[derive(Debug, Clone, Copy)]
pub struct Streams {
    root: u64,
}

impl Streams {
    pub fn from_root(root: u64) -> Self {
        Streams { root }
    }

    pub fn root(&self) -> u64 {
        self.root
    }

    /// Deterministic generator for `name`, independent across names.
    pub fn stream(&self, name: &str) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(expand_seed(self.root));
        rng.set_stream(fnv1a(name.as_bytes()));
        rng
    }
}

/// Snapshot of a ChaCha stream, enough to resume it mid-sequence.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct RngSnapshot {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

pub fn snapshot(rng: &ChaCha8Rng) -> RngSnapshot {
    RngSnapshot {
        seed: rng.get_seed(),
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos(),
    }
}

pub fn restore(snap: &RngSnapshot) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::from_seed(snap.seed);
    rng.set_stream(snap.stream);
    rng.set_word_pos(snap.word_pos);
    rng
}

fn expand_seed(root: u64) -> [u8; 32] {
    // SplitMix64 over the root seed fills the 256-bit ChaCha key.
    let mut state = root;
    let mut out = [0u8; 32];
    for chunk in out.chunks_exact_mut(8) {
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        chunk.copy_from_slice(&z.to_le_bytes());
    }
    out
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut hash = 0xcbf2_9ce4_8422_2325u64;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}
