//! Seed derivation. Every random stream in a run is keyed by the experiment
//! seed plus a role tag, so that e.g. splits and weight init never share a
//! generator state.

pub const SPLIT: u64 = 0x7370_6c69_7400_0001;
pub const VALIDATION: u64 = 0x7661_6c69_6400_0002;
pub const INIT: u64 = 0x696e_6974_0000_0003;
pub const SHUFFLE: u64 = 0x7368_7566_0000_0004;
pub const DROPOUT: u64 = 0x6472_6f70_0000_0005;
pub const MONTE_CARLO: u64 = 0x6d63_0000_0000_0006;
pub const SAMPLE: u64 = 0x7361_6d70_0000_0007;

/// SplitMix64 finaliser.
pub fn avalanche(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed for `role` under experiment seed `seed`.
pub fn derive(seed: u64, role: u64) -> u64 {
    avalanche(avalanche(seed.wrapping_add(0x9e37_79b9_7f4a_7c15)) ^ role)
}
