//! Independent random streams derived from a base seed and a path of tags.

/// Stream tags.
pub mod stream {
    pub const INIT: u64 = 1;
    pub const STEP: u64 = 2;
    pub const EVAL: u64 = 3;
    pub const ABLATION: u64 = 4;
    pub const EXPORT: u64 = 5;

    pub const SOURCE: u64 = 0;
    pub const TARGET: u64 = 1;
    pub const AUGMENT: u64 = 2;
    pub const SAMPLE: u64 = 3;
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Child seed of `base` along `tags`.
pub fn derive_seed(base: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix64(base), |acc, &t| splitmix64(acc ^ splitmix64(t.wrapping_add(0xA076_1D64_78BD_642F))))
}
