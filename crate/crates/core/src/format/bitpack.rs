//! Fixed-width packing of codeword indices.
//!
//! Index `j` occupies bits `[j*b, (j+1)*b)` of a little-endian bit stream
//! (bit `k` is bit `k % 8` of byte `k / 8`), with `b = ceil(log2 K)`. The last
//! byte is zero padded.

use super::FormatError;

/// `ceil(log2 K)` for `K >= 2`.
pub fn index_bits(k: u64) -> Result<u32, FormatError> {
    if k < 2 {
        return Err(FormatError::CodebookSize(k));
    }
    Ok(64 - (k - 1).leading_zeros())
}

pub fn packed_len(n: usize, k: u64) -> Result<usize, FormatError> {
    let b = index_bits(k)? as usize;
    Ok((n * b).div_ceil(8))
}

pub fn pack_indices(indices: &[u32], k: u64) -> Result<Vec<u8>, FormatError> {
    let b = index_bits(k)?;
    let mut out = Vec::with_capacity(packed_len(indices.len(), k)?);
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    for (pos, &i) in indices.iter().enumerate() {
        if u64::from(i) >= k {
            return Err(FormatError::IndexOutOfRange { position: pos, index: u64::from(i), k });
        }
        acc |= u64::from(i) << filled;
        filled += b;
        while filled >= 8 {
            out.push(acc as u8);
            acc >>= 8;
            filled -= 8;
        }
    }
    if filled > 0 {
        out.push(acc as u8);
    }
    Ok(out)
}

pub fn unpack_indices(bytes: &[u8], n: usize, k: u64) -> Result<Vec<u32>, FormatError> {
    let b = index_bits(k)?;
    let expected = packed_len(n, k)?;
    if bytes.len() != expected {
        return Err(FormatError::Length { what: "index payload", expected, found: bytes.len() });
    }
    let mask = (1u64 << b) - 1;
    let mut out = Vec::with_capacity(n);
    let mut acc: u64 = 0;
    let mut filled: u32 = 0;
    let mut src = bytes.iter();
    for pos in 0..n {
        while filled < b {
            let byte = *src.next().expect("length checked above");
            acc |= u64::from(byte) << filled;
            filled += 8;
        }
        let v = acc & mask;
        acc >>= b;
        filled -= b;
        if v >= k {
            return Err(FormatError::IndexOutOfRange { position: pos, index: v, k });
        }
        out.push(v as u32);
    }
    Ok(out)
}
