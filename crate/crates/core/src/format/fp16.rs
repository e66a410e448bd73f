//! IEEE-754 binary16 conversion.
//!
//! Rounding is to nearest, ties to even. Values beyond the largest finite
//! half round to infinity, subnormals are kept, and every NaN becomes the
//! canonical quiet NaN (sign kept).

pub const POS_INFINITY: u16 = 0x7C00;
pub const NEG_INFINITY: u16 = 0xFC00;
pub const QUIET_NAN: u16 = 0x7E00;

pub fn encode(x: f32) -> u16 {
    let bits = x.to_bits();
    let sign = ((bits >> 16) & 0x8000) as u16;
    let exp = ((bits >> 23) & 0xFF) as i32;
    let man = bits & 0x007F_FFFF;

    if exp == 0xFF {
        return if man != 0 { sign | QUIET_NAN } else { sign | POS_INFINITY };
    }

    let e = exp - 127 + 15;
    if e >= 0x1F {
        return sign | POS_INFINITY;
    }
    if e <= 0 {
        // below half the smallest subnormal (2^-25) everything rounds to zero
        if e < -10 {
            return sign;
        }
        let full = man | 0x0080_0000;
        let shift = (14 - e) as u32;
        let mut half = full >> shift;
        let rem = full & ((1u32 << shift) - 1);
        let halfway = 1u32 << (shift - 1);
        if rem > halfway || (rem == halfway && half & 1 == 1) {
            half += 1;
        }
        return sign | half as u16;
    }

    let mut half = ((e as u32) << 10) | (man >> 13);
    let rem = man & 0x1FFF;
    if rem > 0x1000 || (rem == 0x1000 && half & 1 == 1) {
        // a carry out of the mantissa bumps the exponent, up to infinity
        half += 1;
    }
    sign | half as u16
}

pub fn decode(h: u16) -> f32 {
    let sign = ((h & 0x8000) as u32) << 16;
    let exp = ((h >> 10) & 0x1F) as u32;
    let man = (h & 0x03FF) as u32;
    let bits = match (exp, man) {
        (0, 0) => sign,
        (0, _) => {
            // subnormal: value = man * 2^-24, normalize into an f32
            let lead = 31 - man.leading_zeros(); // position of the top set bit, 0..=9
            let e = lead + 127 - 24;
            let m = (man << (23 - lead)) & 0x007F_FFFF;
            sign | (e << 23) | m
        }
        (0x1F, 0) => sign | 0x7F80_0000,
        (0x1F, _) => sign | 0x7F80_0000 | (man << 13),
        _ => sign | ((exp + 127 - 15) << 23) | (man << 13),
    };
    f32::from_bits(bits)
}
