//! On-log record layout. Every field is a little-endian 64-bit word:
//!
//! ```text
//! word 0  header (lock word)
//! word 1  prev   (48-bit logical address, upper bits zero)
//! word 2  key
//! word 3  dim    (low 16 bits, rest zero)
//! word 4+ payload, two f32 per word (even index in the low half)
//! ```

pub const HEADER_WORDS: usize = 4;
pub const HEADER_BYTES: u64 = (HEADER_WORDS * 8) as u64;
pub const MAX_DIM: usize = 4096;

pub const W_HEADER: usize = 0;
pub const W_PREV: usize = 1;
pub const W_KEY: usize = 2;
pub const W_DIM: usize = 3;

#[inline]
pub fn payload_words(dim: usize) -> usize {
    dim.div_ceil(2)
}

#[inline]
pub fn record_size(dim: usize) -> u64 {
    HEADER_BYTES + 8 * payload_words(dim) as u64
}

#[inline]
pub fn pack_pair(lo: f32, hi: f32) -> u64 {
    lo.to_bits() as u64 | ((hi.to_bits() as u64) << 32)
}

#[inline]
pub fn unpack_pair(w: u64) -> (f32, f32) {
    (f32::from_bits(w as u32), f32::from_bits((w >> 32) as u32))
}

/// Packs a payload into words; an odd trailing element is padded with zero bits.
pub fn encode_payload(values: &[f32], out: &mut Vec<u64>) {
    out.clear();
    for pair in values.chunks(2) {
        let hi = pair.get(1).copied().unwrap_or(0.0);
        out.push(pack_pair(pair[0], hi));
    }
}

pub fn decode_payload(words: impl Iterator<Item = u64>, dim: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(dim + 1);
    for w in words {
        let (a, b) = unpack_pair(w);
        out.push(a);
        out.push(b);
    }
    out.truncate(dim);
    out
}
