//! 64-bit FNV-1a digests for specs, parameter sets and configs.

use std::hash::Hasher;

use fnv::FnvHasher;

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Incremental digest over a sequence of byte slices.
#[derive(Default)]
pub struct Digest(FnvHasher);

impl Digest {
    pub fn update(&mut self, bytes: &[u8]) -> &mut Self {
        self.0.write(bytes);
        self
    }

    pub fn finish(&self) -> u64 {
        self.0.finish()
    }
}
