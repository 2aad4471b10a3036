//! FP8 E4M3 (4 exponent bits, 3 mantissa bits, bias 7): subnormals, no
//! infinities, `S.1111.111` is NaN, largest finite value 448.

/// The E4M3 format constants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Fp8Format {
    pub exponent_bits: u32,
    pub mantissa_bits: u32,
    pub bias: i32,
}

pub const E4M3: Fp8Format = Fp8Format { exponent_bits: 4, mantissa_bits: 3, bias: 7 };

impl Fp8Format {
    pub const MAX_NORMAL: f64 = 448.0;
    /// Smallest positive normal, 2^-6.
    pub const MIN_NORMAL: f64 = 0.015625;
    /// Subnormal spacing, 2^-9.
    pub const MIN_SUBNORMAL: f64 = 0.001953125;

    pub fn max_normal(&self) -> f64 {
        Self::MAX_NORMAL
    }

    pub fn is_nan_code(code: u8) -> bool {
        code & 0x7f == 0x7f
    }

    /// Value of a code; NaN codes decode to NaN.
    pub fn decode(code: u8) -> f64 {
        if Self::is_nan_code(code) {
            return f64::NAN;
        }
        let sign = if code & 0x80 != 0 { -1.0 } else { 1.0 };
        let e = ((code >> 3) & 0x0f) as i32;
        let m = (code & 0x07) as f64;
        let mag = if e == 0 { m * Self::MIN_SUBNORMAL } else { (1.0 + m / 8.0) * 2f64.powi(e - 7) };
        sign * mag
    }

    /// Round-to-nearest-even onto the finite E4M3 set, saturating at +-448.
    /// The input must be finite. Negative zero encodes as `0x80`.
    pub fn encode(x: f64) -> u8 {
        debug_assert!(x.is_finite());
        let sign = if x.is_sign_negative() { 0x80 } else { 0 };
        let a = x.abs();
        if a >= Self::MAX_NORMAL {
            return sign | 0x7e;
        }
        // spacing of representable values around `a`; division by a power
        // of two is exact, so the integer rounding below is exact RNE
        let quantum = if a < Self::MIN_NORMAL {
            Self::MIN_SUBNORMAL
        } else {
            2f64.powi(binade(a) - 3)
        };
        let steps = (a / quantum).round_ties_even();
        let v = steps * quantum;
        sign | Self::magnitude_code(v)
    }

    /// Code of a non-negative representable magnitude.
    fn magnitude_code(v: f64) -> u8 {
        if v < Self::MIN_NORMAL {
            return (v / Self::MIN_SUBNORMAL) as u8;
        }
        let e = binade(v);
        let m = (v / 2f64.powi(e) - 1.0) * 8.0;
        (((e + 7) as u8) << 3) | m as u8
    }

    /// Nearest representable value of `x`.
    pub fn round(x: f64) -> f64 {
        Self::decode(Self::encode(x))
    }

    /// All 254 finite codes, in code order (both zeros included).
    pub fn finite_codes() -> impl Iterator<Item = u8> {
        (0u8..=255).filter(|&c| !Self::is_nan_code(c))
    }

    /// Distinct finite values, ascending.
    pub fn representable_values() -> Vec<f64> {
        let mut v: Vec<f64> = Self::finite_codes().map(Self::decode).collect();
        v.sort_by(f64::total_cmp);
        v.dedup_by(|a, b| a == b);
        v
    }
}

/// `floor(log2(a))` for a positive normal f64, read from the exponent bits.
fn binade(a: f64) -> i32 {
    ((a.to_bits() >> 52) & 0x7ff) as i32 - 1023
}
