use std::sync::atomic::{AtomicU64, Ordering};

/// Fixed-width subscriber bitmap with atomic per-bit updates.
///
/// Bit `i` is set while the subscriber with topic-local id `i` holds at least
/// one reference to the entry.
#[derive(Debug)]
pub struct AtomicBitmap {
    words: Box<[AtomicU64]>,
}

impl AtomicBitmap {
    pub fn new(width: usize) -> Self {
        let words = (0..width.div_ceil(64)).map(|_| AtomicU64::new(0)).collect();
        Self { words }
    }

    /// Sets bit `i`, returning its previous value.
    pub fn test_and_set(&self, i: usize) -> bool {
        let mask = 1u64 << (i % 64);
        self.words[i / 64].fetch_or(mask, Ordering::AcqRel) & mask != 0
    }

    /// Clears bit `i`, returning its previous value.
    pub fn test_and_clear(&self, i: usize) -> bool {
        let mask = 1u64 << (i % 64);
        self.words[i / 64].fetch_and(!mask, Ordering::AcqRel) & mask != 0
    }

    pub fn is_set(&self, i: usize) -> bool {
        self.words[i / 64].load(Ordering::Acquire) & (1u64 << (i % 64)) != 0
    }

    pub fn is_zero(&self) -> bool {
        self.words.iter().all(|w| w.load(Ordering::Acquire) == 0)
    }

    pub fn count(&self) -> u32 {
        self.words.iter().map(|w| w.load(Ordering::Acquire).count_ones()).sum()
    }

    /// Indices of set bits in ascending order.
    pub fn ones(&self) -> Vec<u32> {
        let mut out = Vec::new();
        for (wi, w) in self.words.iter().enumerate() {
            let mut bits = w.load(Ordering::Acquire);
            while bits != 0 {
                let b = bits.trailing_zeros();
                out.push(wi as u32 * 64 + b);
                bits &= bits - 1;
            }
        }
        out
    }
}
