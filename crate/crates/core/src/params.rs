//! Named parameter blocks shared by the optimizer, the gradient checker and
//! the checkpoint format.

/// Read-only view of one parameter block.
#[derive(Debug, Clone)]
pub struct ParamBlock<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub values: &'a [f64],
}

#[derive(Debug)]
pub struct ParamBlockMut<'a> {
    pub name: String,
    pub shape: (usize, usize),
    pub values: &'a mut [f64],
}

/// Anything that owns trainable `f64` blocks in a fixed, documented order.
///
/// `blocks` and `blocks_mut` must list the same blocks in the same order.
pub trait Parameters {
    fn blocks(&self) -> Vec<ParamBlock<'_>>;
    fn blocks_mut(&mut self) -> Vec<ParamBlockMut<'_>>;

    fn param_count(&self) -> usize {
        self.blocks().iter().map(|b| b.values.len()).sum()
    }

    /// Order-sensitive 64-bit digest of every parameter bit pattern.
    fn checksum(&self) -> u64 {
        let mut h = Fingerprint::new();
        for b in self.blocks() {
            h.write_u64(b.shape.0 as u64);
            h.write_u64(b.shape.1 as u64);
            for v in b.values {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    fn set_zero(&mut self) {
        for b in self.blocks_mut() {
            b.values.iter_mut().for_each(|v| *v = 0.0);
        }
    }

    /// Copies every value into one flat vector in block order.
    fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for b in self.blocks() {
            out.extend_from_slice(b.values);
        }
        out
    }
}

/// FNV-1a over 64-bit words.
#[derive(Debug, Clone, Copy)]
pub struct Fingerprint(u64);

impl Fingerprint {
    const OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;

    pub fn new() -> Self {
        Fingerprint(Self::OFFSET)
    }

    #[inline]
    pub fn write_u64(&mut self, word: u64) {
        self.0 = (self.0 ^ word).wrapping_mul(Self::PRIME);
    }

    pub fn finish(self) -> u64 {
        self.0
    }
}

impl Default for Fingerprint {
    fn default() -> Self {
        Self::new()
    }
}
