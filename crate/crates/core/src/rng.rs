//! Deterministic random streams.
//!
//! Every random draw in training comes from a ChaCha8 stream keyed by
//! `(seed, epoch, example index, purpose)`, so results do not depend on batch
//! layout or evaluation order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum Purpose {
    Init = 1,
    Shuffle = 2,
    Perturb = 3,
    DropoutClean = 4,
    DropoutPerturbed = 5,
    Synthetic = 6,
    Split = 7,
    Corruption = 8,
}

pub fn stream(seed: u64, epoch: u64, index: u64, purpose: Purpose) -> StreamRng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    key[24..].copy_from_slice(&(purpose as u64).to_le_bytes());
    ChaCha8Rng::from_seed(key)
}
