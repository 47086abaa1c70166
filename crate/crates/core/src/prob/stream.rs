//! Addressable random streams.
//!
//! A stream is named by a master seed and a path of 64-bit labels, for
//! example `[trial, purpose, model, sample]`. The path is hashed into a
//! ChaCha key, so any stream can be reconstructed from its address alone and
//! sibling streams never share keystream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

const DOMAIN_TAG: &[u8] = b"mfeig.stream.v1";

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngStream {
    master_seed: u64,
    stream_path: Vec<u64>,
}

impl RngStream {
    pub fn new(master_seed: u64) -> Self {
        Self {
            master_seed,
            stream_path: Vec::new(),
        }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn path(&self) -> &[u64] {
        &self.stream_path
    }

    /// Child stream whose path is this path extended by `label`.
    pub fn derive(&self, label: u64) -> Self {
        let mut stream_path = Vec::with_capacity(self.stream_path.len() + 1);
        stream_path.extend_from_slice(&self.stream_path);
        stream_path.push(label);
        Self {
            master_seed: self.master_seed,
            stream_path,
        }
    }

    pub fn derive_path(&self, labels: &[u64]) -> Self {
        let mut stream_path = self.stream_path.clone();
        stream_path.extend_from_slice(labels);
        Self {
            master_seed: self.master_seed,
            stream_path,
        }
    }

    /// Generator positioned at the start of this stream.
    pub fn generator(&self) -> ChaCha8Rng {
        let mut hasher = Sha256::new();
        hasher.update(DOMAIN_TAG);
        hasher.update(self.master_seed.to_le_bytes());
        hasher.update((self.stream_path.len() as u64).to_le_bytes());
        for label in &self.stream_path {
            hasher.update(label.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        ChaCha8Rng::from_seed(seed)
    }
}

/// Free-function form of [`RngStream::derive`].
pub fn derive_stream(parent: &RngStream, label: u64) -> RngStream {
    parent.derive(label)
}
