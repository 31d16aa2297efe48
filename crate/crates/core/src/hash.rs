//! FNV-1a over 64-bit words, for fingerprints and discrete-state signatures.

#[derive(Debug, Clone)]
pub(crate) struct Fnv(pub u64);

impl Fnv {
    pub(crate) fn new() -> Self {
        Fnv(0xcbf2_9ce4_8422_2325)
    }

    pub(crate) fn word(&mut self, w: u64) {
        for b in w.to_le_bytes() {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }

    pub(crate) fn f(&mut self, x: f64) {
        self.word(x.to_bits());
    }

    /// Hashes the sign of `x`, with zero as its own class.
    pub(crate) fn sign(&mut self, x: f64) {
        self.word(if x > 0.0 { 1 } else if x < 0.0 { 2 } else { 0 });
    }
}
