//! IEEE binary16 conversion.
//!
//! Downconversion rounds to nearest, ties to even; upconversion is an exact
//! widening. Values are carried as raw `u16` bit patterns since the stash
//! only stores and restores them, never computes on them.

/// Convert an f32 to binary16 bits, rounding to nearest-even.
pub fn f32_to_f16_bits(value: f32) -> u16 {
    let x = value.to_bits();
    let sign = x & 0x8000_0000;
    let exp = x & 0x7F80_0000;
    let man = x & 0x007F_FFFF;

    // Infinity or NaN: all exponent bits set.
    if exp == 0x7F80_0000 {
        let nan_bit = if man == 0 { 0 } else { 0x0200 };
        return ((sign >> 16) | 0x7C00 | nan_bit | (man >> 13)) as u16;
    }

    let half_sign = sign >> 16;
    let unbiased_exp = ((exp >> 23) as i32) - 127;
    let half_exp = unbiased_exp + 15;

    // Exponent overflow: round to signed infinity.
    if half_exp >= 0x1F {
        return (half_sign | 0x7C00) as u16;
    }

    // Subnormal half or full underflow.
    if half_exp <= 0 {
        if 14 - half_exp > 24 {
            return half_sign as u16;
        }
        let man = man | 0x0080_0000; // restore the hidden bit
        let mut half_man = man >> (14 - half_exp);
        let round_bit = 1 << (13 - half_exp);
        // Round up when the round bit is set and either a sticky bit or the
        // result LSB is set (ties to even).
        if (man & round_bit) != 0 && (man & (3 * round_bit - 1)) != 0 {
            half_man += 1;
        }
        return (half_sign | half_man) as u16;
    }

    let half_exp = (half_exp as u32) << 10;
    let half_man = man >> 13;
    let round_bit = 0x0000_1000;
    if (man & round_bit) != 0 && (man & (3 * round_bit - 1)) != 0 {
        // The +1 may carry into the exponent; that is the correct rounding
        // (e.g. 65520.0 rounds up to infinity).
        ((half_sign | half_exp | half_man) + 1) as u16
    } else {
        (half_sign | half_exp | half_man) as u16
    }
}

/// Widen binary16 bits to f32 exactly.
pub fn f16_bits_to_f32(i: u16) -> f32 {
    // Signed zero.
    if i & 0x7FFF == 0 {
        return f32::from_bits((i as u32) << 16);
    }
    let half_sign = (i & 0x8000) as u32;
    let half_exp = (i & 0x7C00) as u32;
    let half_man = (i & 0x03FF) as u32;

    // Infinity or NaN.
    if half_exp == 0x7C00 {
        if half_man == 0 {
            return f32::from_bits((half_sign << 16) | 0x7F80_0000);
        }
        return f32::from_bits((half_sign << 16) | 0x7FC0_0000 | (half_man << 13));
    }

    let sign = half_sign << 16;
    let unbiased_exp = ((half_exp as i32) >> 10) - 15;

    // Subnormal half: normalize while widening.
    if half_exp == 0 {
        let e = (half_man as u16).leading_zeros() - 6;
        let exp = (127 - 15 - e) << 23;
        let man = (half_man << (14 + e)) & 0x007F_FFFF;
        return f32::from_bits(sign | exp | man);
    }

    let exp = ((unbiased_exp + 127) as u32) << 23;
    let man = half_man << 13;
    f32::from_bits(sign | exp | man)
}

/// Quantize an f32 through binary16 and back (round-trip loss applied once).
pub fn f16_round_trip(value: f32) -> f32 {
    f16_bits_to_f32(f32_to_f16_bits(value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_small_integers_survive() {
        for v in [0.0f32, 1.0, -1.0, 2.0, -2.0, 0.5, 1024.0, 65504.0] {
            assert_eq!(f16_round_trip(v), v, "value {v}");
        }
    }

    #[test]
    fn ties_round_to_even_mantissa() {
        // 1 + 2^-11 is exactly halfway between f16(1.0) and the next
        // representable value; the even mantissa (1.0) wins.
        let halfway_down = 1.0f32 + 2.0f32.powi(-11);
        assert_eq!(f16_round_trip(halfway_down), 1.0);
        // 1 + 3*2^-11 is halfway between mantissa 1 and 2; rounds to 2.
        let halfway_up = 1.0f32 + 3.0 * 2.0f32.powi(-11);
        assert_eq!(f16_round_trip(halfway_up), 1.0 + 2.0 * 2.0f32.powi(-10));
    }

    #[test]
    fn subnormal_ties() {
        // 2^-25 is halfway between 0 and the smallest subnormal 2^-24.
        assert_eq!(f16_round_trip(2.0f32.powi(-25)), 0.0);
        // 1.5 * 2^-24 is halfway between 2^-24 and 2^-23; rounds to 2^-23.
        assert_eq!(f16_round_trip(1.5 * 2.0f32.powi(-24)), 2.0f32.powi(-23));
    }

    #[test]
    fn overflow_rounds_to_infinity() {
        assert_eq!(f16_round_trip(65520.0), f32::INFINITY);
        assert_eq!(f16_round_trip(-65520.0), f32::NEG_INFINITY);
        assert_eq!(f16_round_trip(1.0e9), f32::INFINITY);
        // Just under the midpoint stays at the max finite value.
        assert_eq!(f16_round_trip(65519.0), 65504.0);
    }

    #[test]
    fn signed_zero_and_specials() {
        assert_eq!(f32_to_f16_bits(-0.0), 0x8000);
        assert_eq!(f16_bits_to_f32(0x8000).to_bits(), (-0.0f32).to_bits());
        assert_eq!(f16_bits_to_f32(0x7C00), f32::INFINITY);
        assert!(f16_bits_to_f32(0x7C01).is_nan());
        assert!(f32_to_f16_bits(f32::NAN) & 0x7C00 == 0x7C00);
    }

    #[test]
    fn every_finite_f16_round_trips_exactly() {
        // Exhaustive: widening then narrowing must be the identity on all
        // 63488 finite bit patterns (NaNs excluded, payload may change).
        for bits in 0..=u16::MAX {
            let wide = f16_bits_to_f32(bits);
            if wide.is_nan() {
                continue;
            }
            assert_eq!(f32_to_f16_bits(wide), bits, "bits {bits:#06x}");
        }
    }

    #[test]
    fn relative_error_bounded_for_normals() {
        // Unit roundoff for binary16 normals is 2^-11.
        let bound = 2.0f64.powi(-11);
        let mut v = 6.1e-5f32; // just above the smallest normal
        while v < 6.0e4 {
            let rt = f16_round_trip(v);
            let rel = ((rt as f64) - (v as f64)).abs() / (v as f64);
            assert!(rel <= bound, "v={v} rt={rt} rel={rel}");
            v *= 1.37;
        }
    }
}
