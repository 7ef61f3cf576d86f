//! Stable seed derivation, independent of platform and std hasher changes.

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

/// Builds a 64-bit seed from a global seed plus labelled parts.
///
/// ```
/// use biasscope_core::seed::SeedBuilder;
/// let a = SeedBuilder::new(7).str("bbq-Age-0").u64(3).finish();
/// let b = SeedBuilder::new(7).str("bbq-Age-0").u64(3).finish();
/// assert_eq!(a, b);
/// ```
#[derive(Debug, Clone, Copy)]
pub struct SeedBuilder {
    state: u64,
}

impl SeedBuilder {
    pub fn new(global: u64) -> Self {
        SeedBuilder { state: FNV_OFFSET }.u64(global)
    }

    fn bytes(mut self, bytes: &[u8]) -> Self {
        for &b in bytes {
            self.state ^= b as u64;
            self.state = self.state.wrapping_mul(FNV_PRIME);
        }
        self
    }

    pub fn u64(self, v: u64) -> Self {
        self.bytes(&v.to_le_bytes())
    }

    /// Length-prefixed so that ("ab", "c") and ("a", "bc") differ.
    pub fn str(self, s: &str) -> Self {
        self.u64(s.len() as u64).bytes(s.as_bytes())
    }

    pub fn finish(self) -> u64 {
        splitmix64(self.state)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parts_are_separated() {
        let a = SeedBuilder::new(0).str("ab").str("c").finish();
        let b = SeedBuilder::new(0).str("a").str("bc").finish();
        assert_ne!(a, b);
    }

    #[test]
    fn pinned_value() {
        // Guards against accidental changes to the derivation, which would
        // silently change every random_k selection and sweep draw.
        assert_eq!(SeedBuilder::new(0).finish(), SeedBuilder::new(0).finish());
        assert_ne!(SeedBuilder::new(0).finish(), SeedBuilder::new(1).finish());
        assert_eq!(splitmix64(0), 0xe220_a839_7b1d_cdaf);
    }
}
