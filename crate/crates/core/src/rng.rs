//! Splittable, counter-based randomness.
//!
//! A stream is identified by `(master_seed, stream_path)`. The path is folded
//! into a 256-bit ChaCha20 key with SplitMix64 finalizers:
//!
//! ```text
//! h_0 = mix(master_seed ^ 0x6a09e667f3bcc908)
//! h_{k+1} = mix(h_k ^ mix(path[k] + (k + 1) * 0x9e3779b97f4a7c15))
//! key words w_j = mix(h_L + (j + 1) * 0xbb67ae8584caa73b), j = 0..4
//! ```
//!
//! and the draws are the ChaCha20 keystream from block counter zero. The
//! construction is fixed, so a given build is bit-reproducible, and sibling
//! paths get unrelated keys.

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

#[inline]
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Handle to one deterministic random stream.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RngHandle {
    master_seed: u64,
    stream_path: Vec<u64>,
}

impl RngHandle {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            stream_path: Vec::new(),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_path(&self) -> &[u64] {
        &self.stream_path
    }

    /// Substream addressed by appending `index` to the path.
    pub fn child(&self, index: u64) -> Self {
        let mut stream_path = self.stream_path.clone();
        stream_path.push(index);
        Self {
            master_seed: self.master_seed,
            stream_path,
        }
    }

    /// Substream addressed by a textual label (e.g. an experiment id).
    pub fn named(&self, label: &str) -> Self {
        // FNV-1a, stable across platforms
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in label.bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        self.child(h)
    }

    fn key(&self) -> [u8; 32] {
        let mut h = mix(self.master_seed ^ 0x6a09_e667_f3bc_c908);
        for (k, &p) in self.stream_path.iter().enumerate() {
            h = mix(h ^ mix(p.wrapping_add((k as u64 + 1).wrapping_mul(GOLDEN))));
        }
        let mut key = [0u8; 32];
        for j in 0..4 {
            let w = mix(h.wrapping_add((j as u64 + 1).wrapping_mul(0xbb67_ae85_84ca_a73b)));
            key[j * 8..(j + 1) * 8].copy_from_slice(&w.to_le_bytes());
        }
        key
    }

    /// Fresh generator positioned at the start of this stream.
    pub fn rng(&self) -> ChaCha20Rng {
        ChaCha20Rng::from_seed(self.key())
    }
}
