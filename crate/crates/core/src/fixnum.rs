//! Q-format fixed-point numbers and the quantization kernels built on them.
//!
//! A value in format `(WL, FL)` is stored as an integer mantissa `m` and
//! represents `m / 2^FL`. Unsigned formats hold `m ∈ [0, 2^WL − 1]`; signed
//! formats use the symmetric range `m ∈ [−(2^(WL−1) − 1), 2^(WL−1) − 1]`, so
//! the most negative two's-complement code is never produced.
//!
//! Every rounding step in the crate is round-half-away-from-zero, both in the
//! real-valued reference ([`fix_quant`]) and in the integer rescaler
//! ([`rescale_shift`]), which is what makes the two bit-exactly comparable.

use std::fmt;

use thiserror::Error;

use crate::scalar::Scalar;

pub const MIN_WORD_LENGTH: u8 = 2;
pub const MAX_WORD_LENGTH: u8 = 32;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FixError {
    #[error("invalid fixed-point format: WL={word_length}, FL={frac_length}, {signedness}")]
    InvalidFormat {
        word_length: u8,
        frac_length: i32,
        signedness: Signedness,
    },
    #[error("expected a {expected} format, got {got}")]
    SignednessMismatch {
        expected: Signedness,
        got: Signedness,
    },
    #[error("operand of width {width} bits is wider than 8 bits")]
    WideOperand { width: u8 },
    #[error("mantissa {mantissa} does not fit format {format}")]
    MantissaOutOfRange { mantissa: i64, format: FixFormat },
    #[error("32-bit accumulator overflow")]
    AccumulatorOverflow,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Signedness {
    Unsigned,
    Signed,
}

impl fmt::Display for Signedness {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Signedness::Unsigned => f.write_str("unsigned"),
            Signedness::Signed => f.write_str("signed"),
        }
    }
}

/// A `(word length, fractional length, signedness)` triple.
///
/// Constructed only through [`FixFormat::new`] (or the `signed`/`unsigned`
/// shorthands), so every instance satisfies the range constraints:
/// `0 ≤ FL ≤ WL` for unsigned and `0 ≤ FL ≤ WL − 1` for signed formats.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct FixFormat {
    word_length: u8,
    frac_length: u8,
    signedness: Signedness,
}

impl FixFormat {
    pub fn new(
        word_length: u8,
        frac_length: i32,
        signedness: Signedness,
    ) -> Result<Self, FixError> {
        let err = || FixError::InvalidFormat {
            word_length,
            frac_length,
            signedness,
        };
        if !(MIN_WORD_LENGTH..=MAX_WORD_LENGTH).contains(&word_length) {
            return Err(err());
        }
        let max_fl = max_frac_length(word_length, signedness) as i32;
        if frac_length < 0 || frac_length > max_fl {
            return Err(err());
        }
        Ok(Self {
            word_length,
            frac_length: frac_length as u8,
            signedness,
        })
    }

    pub fn unsigned(word_length: u8, frac_length: i32) -> Result<Self, FixError> {
        Self::new(word_length, frac_length, Signedness::Unsigned)
    }

    pub fn signed(word_length: u8, frac_length: i32) -> Result<Self, FixError> {
        Self::new(word_length, frac_length, Signedness::Signed)
    }

    /// Same word length and signedness, different fractional length.
    pub fn with_frac_length(self, frac_length: i32) -> Result<Self, FixError> {
        Self::new(self.word_length, frac_length, self.signedness)
    }

    pub fn word_length(&self) -> u8 {
        self.word_length
    }

    pub fn frac_length(&self) -> u8 {
        self.frac_length
    }

    pub fn signedness(&self) -> Signedness {
        self.signedness
    }

    pub fn is_signed(&self) -> bool {
        self.signedness == Signedness::Signed
    }

    pub fn max_mantissa(&self) -> i64 {
        match self.signedness {
            Signedness::Unsigned => (1i64 << self.word_length) - 1,
            Signedness::Signed => (1i64 << (self.word_length - 1)) - 1,
        }
    }

    pub fn min_mantissa(&self) -> i64 {
        match self.signedness {
            Signedness::Unsigned => 0,
            Signedness::Signed => -self.max_mantissa(),
        }
    }

    pub fn contains_mantissa(&self, m: i64) -> bool {
        (self.min_mantissa()..=self.max_mantissa()).contains(&m)
    }

    /// Least significant bit, `2^-FL`.
    pub fn resolution<T: Scalar>(&self) -> T {
        T::pow2(-(self.frac_length as i32))
    }

    pub fn max_value<T: Scalar>(&self) -> T {
        from_mantissa(self.max_mantissa(), *self)
    }

    pub fn min_value<T: Scalar>(&self) -> T {
        from_mantissa(self.min_mantissa(), *self)
    }
}

impl fmt::Display for FixFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = if self.is_signed() { "s" } else { "u" };
        write!(f, "{}Q({},{})", s, self.word_length, self.frac_length)
    }
}

/// Largest legal fractional length for the given word length and signedness.
pub fn max_frac_length(word_length: u8, signedness: Signedness) -> u8 {
    match signedness {
        Signedness::Unsigned => word_length,
        Signedness::Signed => word_length.saturating_sub(1),
    }
}

/// Round-half-away-from-zero, then clip into the format's mantissa range.
fn round_clip<T: Scalar>(scaled: T, fmt: FixFormat) -> T {
    let lo = T::from_i64_lossy(fmt.min_mantissa());
    let hi = T::from_i64_lossy(fmt.max_mantissa());
    if scaled.is_nan() {
        return T::zero();
    }
    // clip-then-round and round-then-clip agree because the bounds are integers
    scaled.max(lo).min(hi).round()
}

/// Quantize `x` to the nearest value representable in `fmt` (clip, scale by
/// `2^FL`, round half away from zero), dispatching on signedness.
pub fn fix_quant<T: Scalar>(x: T, fmt: FixFormat) -> T {
    let scale = T::pow2(fmt.frac_length as i32);
    round_clip(x * scale, fmt) / scale
}

/// Unsigned fixed-point quantization:
/// `2^-FL · round(clip(x · 2^FL, 0, 2^WL − 1))`.
pub fn fix_quant_unsigned<T: Scalar>(x: T, fmt: FixFormat) -> Result<T, FixError> {
    expect_signedness(fmt, Signedness::Unsigned)?;
    Ok(fix_quant(x, fmt))
}

/// Signed fixed-point quantization with the symmetric clip range
/// `[−2^(WL−1) + 1, 2^(WL−1) − 1]`.
pub fn fix_quant_signed<T: Scalar>(x: T, fmt: FixFormat) -> Result<T, FixError> {
    expect_signedness(fmt, Signedness::Signed)?;
    Ok(fix_quant(x, fmt))
}

fn expect_signedness(fmt: FixFormat, expected: Signedness) -> Result<(), FixError> {
    if fmt.signedness != expected {
        return Err(FixError::SignednessMismatch {
            expected,
            got: fmt.signedness,
        });
    }
    Ok(())
}

/// Storage form of [`fix_quant`]: the saturated integer mantissa.
pub fn to_mantissa<T: Scalar>(x: T, fmt: FixFormat) -> i64 {
    let scale = T::pow2(fmt.frac_length as i32);
    round_clip(x * scale, fmt).to_i64().unwrap_or(0)
}

pub fn from_mantissa<T: Scalar>(m: i64, fmt: FixFormat) -> T {
    T::from_i64_lossy(m) / T::pow2(fmt.frac_length as i32)
}

/// A single fixed-point number.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixScalar {
    mantissa: i64,
    format: FixFormat,
}

impl FixScalar {
    pub fn new(mantissa: i64, format: FixFormat) -> Result<Self, FixError> {
        if !format.contains_mantissa(mantissa) {
            return Err(FixError::MantissaOutOfRange { mantissa, format });
        }
        Ok(Self { mantissa, format })
    }

    pub fn quantize<T: Scalar>(x: T, format: FixFormat) -> Self {
        Self {
            mantissa: to_mantissa(x, format),
            format,
        }
    }

    pub fn mantissa(&self) -> i64 {
        self.mantissa
    }

    pub fn format(&self) -> FixFormat {
        self.format
    }

    pub fn value<T: Scalar>(&self) -> T {
        from_mantissa(self.mantissa, self.format)
    }
}

/// Integer mantissas sharing one format, in row-major order over `shape`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FixTensor {
    mantissas: Vec<i64>,
    shape: Vec<usize>,
    format: FixFormat,
}

impl FixTensor {
    pub fn new(
        mantissas: Vec<i64>,
        shape: Vec<usize>,
        format: FixFormat,
    ) -> Result<Self, FixError> {
        assert_eq!(
            mantissas.len(),
            shape.iter().product::<usize>(),
            "mantissa count does not match shape"
        );
        if let Some(&m) = mantissas.iter().find(|&&m| !format.contains_mantissa(m)) {
            return Err(FixError::MantissaOutOfRange {
                mantissa: m,
                format,
            });
        }
        Ok(Self {
            mantissas,
            shape,
            format,
        })
    }

    pub fn quantize<T: Scalar>(values: &[T], shape: Vec<usize>, format: FixFormat) -> Self {
        assert_eq!(values.len(), shape.iter().product::<usize>());
        Self {
            mantissas: values.iter().map(|&v| to_mantissa(v, format)).collect(),
            shape,
            format,
        }
    }

    pub fn mantissas(&self) -> &[i64] {
        &self.mantissas
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn format(&self) -> FixFormat {
        self.format
    }

    pub fn len(&self) -> usize {
        self.mantissas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mantissas.is_empty()
    }

    pub fn values<T: Scalar>(&self) -> Vec<T> {
        self.mantissas
            .iter()
            .map(|&m| from_mantissa(m, self.format))
            .collect()
    }
}

/// A 32-bit integer accumulator and the fractional length of its contents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Accumulator {
    pub value: i32,
    pub frac_length: u8,
}

impl Accumulator {
    pub fn zero(frac_length: u8) -> Self {
        Self {
            value: 0,
            frac_length,
        }
    }

    pub fn real<T: Scalar>(&self) -> T {
        T::from_i64_lossy(self.value as i64) / T::pow2(self.frac_length as i32)
    }

    /// Add another product in the same fractional length, failing on overflow.
    pub fn checked_add(self, other: Accumulator) -> Result<Self, FixError> {
        debug_assert_eq!(self.frac_length, other.frac_length);
        let value = self
            .value
            .checked_add(other.value)
            .ok_or(FixError::AccumulatorOverflow)?;
        Ok(Self { value, ..self })
    }
}

/// Exact product of two 8-bit fixed-point operands into a 32-bit accumulator
/// with `FL = FL_a + FL_b`.
pub fn mul_accumulate(a: FixScalar, b: FixScalar) -> Result<Accumulator, FixError> {
    for f in [a.format, b.format] {
        if f.word_length > 8 {
            return Err(FixError::WideOperand {
                width: f.word_length,
            });
        }
    }
    let prod = a.mantissa * b.mantissa;
    let value = i32::try_from(prod).map_err(|_| FixError::AccumulatorOverflow)?;
    Ok(Accumulator {
        value,
        frac_length: a.format.frac_length + b.format.frac_length,
    })
}

/// Arithmetic shift with round-half-away-from-zero; positive `shift` moves
/// right (divides by `2^shift`), negative moves left. Saturates at the `i64`
/// range.
pub fn shift_round(value: i64, shift: i32) -> i64 {
    let v = value as i128;
    let out = if shift > 0 {
        let mag = v.unsigned_abs();
        let half = 1u128 << (shift - 1);
        let r = ((mag + half) >> shift) as i128;
        if v < 0 {
            -r
        } else {
            r
        }
    } else {
        v << (-shift).min(63)
    };
    out.clamp(i64::MIN as i128, i64::MAX as i128) as i64
}

/// Requantize an accumulator holding `acc · 2^-acc_fl` into `target`:
/// `clip(round(acc / 2^(acc_fl − FL_target)))`.
pub fn rescale_shift(acc: i64, acc_frac_length: u8, target: FixFormat) -> i64 {
    let shift = acc_frac_length as i32 - target.frac_length as i32;
    shift_round(acc, shift).clamp(target.min_mantissa(), target.max_mantissa())
}

/// Number of bits needed to hold `m` in a two's-complement (`m < 0`) or
/// unsigned (`m ≥ 0`) integer; an 8-bit operand is one where this is ≤ 8.
pub fn operand_width(m: i64, signedness: Signedness) -> u8 {
    match signedness {
        Signedness::Unsigned if m >= 0 => (64 - m.leading_zeros()) as u8,
        _ => {
            // bits for the magnitude plus the sign bit
            let mag = if m < 0 { !m } else { m };
            (64 - mag.leading_zeros()) as u8 + 1
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn u(wl: u8, fl: i32) -> FixFormat {
        FixFormat::unsigned(wl, fl).unwrap()
    }

    fn s(wl: u8, fl: i32) -> FixFormat {
        FixFormat::signed(wl, fl).unwrap()
    }

    #[test]
    fn format_validation() {
        assert!(FixFormat::unsigned(8, 8).is_ok());
        assert!(FixFormat::unsigned(8, 9).is_err());
        assert!(FixFormat::signed(8, 7).is_ok());
        assert!(FixFormat::signed(8, 8).is_err());
        assert!(FixFormat::signed(8, -1).is_err());
        assert!(FixFormat::unsigned(1, 0).is_err());
        assert!(FixFormat::unsigned(33, 0).is_err());
        assert!(FixFormat::signed(32, 31).is_ok());
        assert_eq!(s(8, 4).min_mantissa(), -127);
        assert_eq!(u(8, 4).max_mantissa(), 255);
    }

    #[test]
    fn unsigned_examples() {
        assert_eq!(fix_quant_unsigned(0.0, u(8, 4)).unwrap(), 0.0);
        assert_eq!(fix_quant_unsigned(300.0, u(8, 0)).unwrap(), 255.0);
        assert_eq!(fix_quant_unsigned(0.3, u(8, 8)).unwrap(), 77.0 / 256.0);
        assert_eq!(fix_quant_unsigned(-3.0, u(8, 2)).unwrap(), 0.0);
    }

    #[test]
    fn signed_examples() {
        assert_eq!(fix_quant_signed(-10.0, s(8, 4)).unwrap(), -127.0 / 16.0);
        assert_eq!(fix_quant_signed(-5.0, s(8, 4)).unwrap(), -5.0);
        assert_eq!(fix_quant_signed(0.0312, s(8, 7)).unwrap(), 4.0 / 128.0);
        // the asymmetric code -128 never appears
        assert_eq!(to_mantissa(-1e9, s(8, 0)), -127);
    }

    #[test]
    fn signedness_is_checked() {
        assert!(matches!(
            fix_quant_unsigned(1.0, s(8, 4)),
            Err(FixError::SignednessMismatch { .. })
        ));
        assert!(fix_quant_signed(1.0, u(8, 4)).is_err());
    }

    #[test]
    fn ties_round_away_from_zero() {
        assert_eq!(fix_quant(0.5, s(8, 0)), 1.0);
        assert_eq!(fix_quant(-0.5, s(8, 0)), -1.0);
        assert_eq!(fix_quant(2.5f32, s(8, 0)), 3.0);
    }

    #[test]
    fn mantissa_examples() {
        assert_eq!(to_mantissa(1.0, u(8, 4)), 16);
        assert_eq!(from_mantissa::<f64>(255, u(8, 8)), 255.0 / 256.0);
        assert_eq!(to_mantissa(0.0, s(5, 2)), 0);
        assert_eq!(to_mantissa(f64::NAN, s(8, 2)), 0);
    }

    #[test]
    fn mul_accumulate_examples() {
        let a = FixScalar::new(16, s(8, 4)).unwrap();
        let b = FixScalar::new(8, s(8, 4)).unwrap();
        let acc = mul_accumulate(a, b).unwrap();
        assert_eq!(
            acc,
            Accumulator {
                value: 128,
                frac_length: 8
            }
        );
        assert_eq!(acc.real::<f64>(), 0.5);

        let z = FixScalar::new(0, u(8, 3)).unwrap();
        assert_eq!(mul_accumulate(z, b).unwrap().value, 0);

        let n = FixScalar::new(-127, s(8, 7)).unwrap();
        let p = FixScalar::new(127, s(8, 7)).unwrap();
        assert_eq!(
            mul_accumulate(n, p).unwrap(),
            Accumulator {
                value: -16129,
                frac_length: 14
            }
        );
    }

    #[test]
    fn mul_accumulate_rejects_wide_operands() {
        let wide = FixScalar::new(1000, s(16, 4)).unwrap();
        let b = FixScalar::new(1, s(8, 0)).unwrap();
        assert_eq!(
            mul_accumulate(wide, b),
            Err(FixError::WideOperand { width: 16 })
        );
    }

    #[test]
    fn accumulator_overflow_is_reported() {
        let a = Accumulator {
            value: i32::MAX,
            frac_length: 4,
        };
        assert_eq!(
            a.checked_add(Accumulator {
                value: 1,
                frac_length: 4
            }),
            Err(FixError::AccumulatorOverflow)
        );
    }

    #[test]
    fn rescale_examples() {
        assert_eq!(rescale_shift(128, 8, u(8, 4)), 8);
        assert_eq!(rescale_shift(0, 12, s(8, 3)), 0);
        assert_eq!(rescale_shift(37, 6, u(8, 4)), 9);
        assert_eq!(rescale_shift(38, 6, u(8, 4)), 10);
        assert_eq!(rescale_shift(-38, 6, s(8, 4)), -10);
        assert_eq!(rescale_shift(-1000, 2, u(8, 0)), 0);
        assert_eq!(rescale_shift(3, 1, u(8, 4)), 24);
        assert_eq!(rescale_shift(1 << 20, 0, s(8, 0)), 127);
    }

    #[test]
    fn operand_widths() {
        assert_eq!(operand_width(255, Signedness::Unsigned), 8);
        assert_eq!(operand_width(256, Signedness::Unsigned), 9);
        assert_eq!(operand_width(127, Signedness::Signed), 8);
        assert_eq!(operand_width(-127, Signedness::Signed), 8);
        assert_eq!(operand_width(-128, Signedness::Signed), 8);
        assert_eq!(operand_width(-129, Signedness::Signed), 9);
        assert_eq!(operand_width(0, Signedness::Signed), 1);
    }

    #[test]
    fn fix_tensor_rejects_out_of_range() {
        assert!(FixTensor::new(vec![0, 256], vec![2], u(8, 0)).is_err());
        let t = FixTensor::quantize(&[0.5f64, 1.0], vec![2], u(8, 4));
        assert_eq!(t.mantissas(), &[8, 16]);
        assert_eq!(t.values::<f64>(), vec![0.5, 1.0]);
    }
}
