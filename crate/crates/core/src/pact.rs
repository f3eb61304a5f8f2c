//! Clipping-level activation quantizer (PACT) and its fixed-point form.
//!
//! With the scale `M = 2^WL − 1`, clipping at a trainable level `α` and
//! quantizing to `M` steps is the same map as unsigned fixed-point
//! quantization of `x / η` rescaled by `η`, where `η = 2^FL·α / (2^WL − 1)` is
//! the fix scaling factor. [`pact_via_fixquant`] evaluates that form and
//! agrees with [`pact`] bit-for-bit: the reciprocal of `η` is computed as
//! `M / (2^FL·α)` so both paths round the same products.

use thiserror::Error;

use crate::fixnum::{fix_quant_unsigned, FixError, FixFormat};
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PactError {
    #[error("clipping level must be positive, got {0}")]
    NonPositiveAlpha(f64),
    #[error("scale M = {scale} does not equal 2^WL - 1 = {expected}")]
    ScaleMismatch { scale: f64, expected: f64 },
    #[error(transparent)]
    Format(#[from] FixError),
}

/// Trainable clipping level `α` and quantization scale `M`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipParam<T> {
    alpha: T,
    scale: T,
}

impl<T: Scalar> ClipParam<T> {
    /// `α` with the usual scale `M = 2^WL − 1`.
    pub fn new(alpha: T, word_length: u8) -> Result<Self, PactError> {
        Self::with_scale(alpha, full_scale(word_length))
    }

    pub fn with_scale(alpha: T, scale: T) -> Result<Self, PactError> {
        if !(alpha > T::zero()) || !alpha.is_finite() {
            return Err(PactError::NonPositiveAlpha(
                alpha.to_f64().unwrap_or(f64::NAN),
            ));
        }
        Ok(Self { alpha, scale })
    }

    pub fn alpha(&self) -> T {
        self.alpha
    }

    pub fn scale(&self) -> T {
        self.scale
    }

    pub fn set_alpha(&mut self, alpha: T) -> Result<(), PactError> {
        *self = Self::with_scale(alpha, self.scale)?;
        Ok(())
    }
}

/// `2^WL − 1`.
pub fn full_scale<T: Scalar>(word_length: u8) -> T {
    T::pow2(word_length as i32) - T::one()
}

/// `(α/M) · round((M/α) · clip(x, 0, α))`.
pub fn pact<T: Scalar>(x: T, p: &ClipParam<T>) -> T {
    let clipped = x.max(T::zero()).min(p.alpha);
    let r = p.scale / p.alpha;
    // the top code maps back to α itself, not α·(1 ± ulp)
    ((p.alpha / p.scale) * (r * clipped).round()).min(p.alpha)
}

/// `η = 2^FL · α / (2^WL − 1)`.
pub fn eta_fix<T: Scalar>(p: &ClipParam<T>, fmt: FixFormat) -> T {
    eta_from_alpha(p.alpha, fmt)
}

pub fn eta_from_alpha<T: Scalar>(alpha: T, fmt: FixFormat) -> T {
    T::pow2(fmt.frac_length() as i32) * alpha / full_scale::<T>(fmt.word_length())
}

/// `1/η`, computed as `(2^WL − 1) / (2^FL · α)`.
pub fn inv_eta_from_alpha<T: Scalar>(alpha: T, fmt: FixFormat) -> T {
    full_scale::<T>(fmt.word_length()) / (T::pow2(fmt.frac_length() as i32) * alpha)
}

/// `η · fix_quant(x / η)` for an unsigned format whose word length matches
/// the clipping scale.
pub fn pact_via_fixquant<T: Scalar>(
    x: T,
    p: &ClipParam<T>,
    fmt: FixFormat,
) -> Result<T, PactError> {
    let expected = full_scale::<T>(fmt.word_length());
    if p.scale != expected {
        return Err(PactError::ScaleMismatch {
            scale: p.scale.to_f64().unwrap_or(f64::NAN),
            expected: expected.to_f64().unwrap_or(f64::NAN),
        });
    }
    let q = fix_quant_unsigned(x * inv_eta_from_alpha(p.alpha, fmt), fmt)?;
    Ok(eta_fix(p, fmt) * q)
}

/// Straight-through gradient of [`pact`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SteGrad<T> {
    /// `∂out/∂x`: 1 strictly inside `(0, α)`, else 0.
    pub input_mask: T,
    /// `∂out/∂α`: 1 where the input saturates (`x ≥ α`), else 0.
    pub alpha_grad: T,
}

pub fn pact_ste_grad<T: Scalar>(x: T, p: &ClipParam<T>) -> SteGrad<T> {
    let (one, zero) = (T::one(), T::zero());
    if x >= p.alpha {
        SteGrad {
            input_mask: zero,
            alpha_grad: one,
        }
    } else if x > zero {
        SteGrad {
            input_mask: one,
            alpha_grad: zero,
        }
    } else {
        SteGrad {
            input_mask: zero,
            alpha_grad: zero,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(alpha: f64) -> ClipParam<f64> {
        ClipParam::new(alpha, 8).unwrap()
    }

    #[test]
    fn rejects_bad_alpha() {
        assert!(ClipParam::new(0.0, 8).is_err());
        assert!(ClipParam::new(-1.0f32, 8).is_err());
        assert!(ClipParam::new(f64::NAN, 8).is_err());
    }

    #[test]
    fn pact_examples() {
        let p = clip(1.7);
        assert_eq!(pact(1.7, &p), 1.7);
        assert_eq!(pact(9.0, &p), 1.7);
        assert_eq!(pact(0.0, &p), 0.0);
        assert_eq!(pact(-3.0, &p), 0.0);
        let p1 = clip(1.0);
        assert_eq!(pact(0.5, &p1), 128.0 / 255.0);
    }

    #[test]
    fn eta_examples() {
        let f7 = FixFormat::unsigned(8, 7).unwrap();
        assert_eq!(eta_fix(&clip(1.0), f7), 128.0 / 255.0);
        for fl in 0..=8 {
            let f = FixFormat::unsigned(8, fl).unwrap();
            let a = 255.0 / 2f64.powi(fl);
            assert!((eta_fix(&clip(a), f) - 1.0).abs() < 1e-15);
        }
        let f0 = FixFormat::unsigned(8, 0).unwrap();
        assert_eq!(eta_fix(&clip(2.0), f0), 2.0 / 255.0);
    }

    #[test]
    fn eta_halves_with_fl() {
        let p = clip(0.37);
        for fl in 1..=8 {
            let hi = eta_fix(&p, FixFormat::unsigned(8, fl).unwrap());
            let lo = eta_fix(&p, FixFormat::unsigned(8, fl - 1).unwrap());
            assert_eq!(lo * 2.0, hi);
        }
    }

    #[test]
    fn fixquant_form_matches_pact() {
        let p = clip(1.0);
        for fl in 0..=8 {
            let f = FixFormat::unsigned(8, fl).unwrap();
            assert_eq!(pact_via_fixquant(0.0, &p, f).unwrap(), 0.0);
            assert_eq!(pact_via_fixquant(3.0, &p, f).unwrap(), 1.0);
            // exact tie at round(127.5)
            assert_eq!(pact_via_fixquant(0.5, &p, f).unwrap(), pact(0.5, &p));
        }
    }

    #[test]
    fn scale_mismatch_is_rejected() {
        let p = ClipParam::with_scale(1.0, 100.0).unwrap();
        let f = FixFormat::unsigned(8, 4).unwrap();
        assert!(matches!(
            pact_via_fixquant(0.3, &p, f),
            Err(PactError::ScaleMismatch { .. })
        ));
        let p = clip(1.0);
        assert!(matches!(
            pact_via_fixquant(0.3, &p, FixFormat::signed(8, 4).unwrap()),
            Err(PactError::Format(_))
        ));
    }

    #[test]
    fn ste_rule() {
        let p = clip(2.0);
        assert_eq!(
            pact_ste_grad(1.0, &p),
            SteGrad {
                input_mask: 1.0,
                alpha_grad: 0.0
            }
        );
        assert_eq!(
            pact_ste_grad(3.0, &p),
            SteGrad {
                input_mask: 0.0,
                alpha_grad: 1.0
            }
        );
        assert_eq!(pact_ste_grad(2.0, &p).alpha_grad, 1.0);
        assert_eq!(
            pact_ste_grad(-1.0, &p),
            SteGrad {
                input_mask: 0.0,
                alpha_grad: 0.0
            }
        );
    }

    #[test]
    fn ste_sign_matches_finite_difference_on_saturated_units() {
        // loss = 0.5 * (pact(x) - target)^2; for saturated x the α-gradient has
        // the sign of (α - target) and the x-gradient vanishes
        let target = 0.5;
        let loss = |x: f64, a: f64| {
            let y = pact(x, &clip(a));
            0.5 * (y - target) * (y - target)
        };
        for &(x, a) in &[(3.0, 2.0), (5.0, 1.3), (2.5, 0.8)] {
            let h = 1e-6;
            let fd_a = (loss(x, a + h) - loss(x, a - h)) / (2.0 * h);
            let fd_x = (loss(x + h, a) - loss(x - h, a)) / (2.0 * h);
            let g = pact_ste_grad(x, &clip(a));
            let y = pact(x, &clip(a));
            let ste_a = (y - target) * g.alpha_grad;
            assert_eq!(fd_a.signum(), ste_a.signum());
            assert!((fd_a - ste_a).abs() < 1e-6);
            assert_eq!(fd_x, 0.0);
            assert_eq!(g.input_mask, 0.0);
        }
    }
}
