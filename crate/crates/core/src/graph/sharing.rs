//! Private fractional lengths under a shared clipping level.
//!
//! A sibling that shares the master's `α` but quantizes with its own `FL`
//! computes
//!
//! ```text
//! lhs = (2^FL·α/M) · 2^-FL · round(clip(M/(2^FL_m·α) · x · 2^FL, 0, M))
//! ```
//!
//! which is ordinary clipping-level quantization with `α' = 2^(FL_m − FL)·α`
//! followed by a shift of `2^(FL − FL_m)`:
//!
//! ```text
//! rhs = 2^(FL − FL_m) · (2^FL·α'/M) · 2^-FL · round(clip(M/(2^FL·α') · x · 2^FL, 0, M))
//! ```
//!
//! Since `2^FL·α' = 2^FL_m·α` exactly, both sides round the same product and
//! agree bit-for-bit.

use crate::fixnum::FixFormat;
use crate::pact::full_scale;
use crate::Real;

use super::GraphError;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivateFlSides {
    pub lhs: Real,
    pub rhs: Real,
    /// Integer code produced by the left-hand side.
    pub lhs_mantissa: i64,
    pub rhs_mantissa: i64,
    /// `α' = 2^(FL_m − FL)·α`.
    pub effective_alpha: Real,
}

fn code(arg: Real, m: Real) -> Real {
    arg.max(0.0).min(m).round()
}

pub fn private_fl_equiv(
    x: Real,
    alpha: Real,
    fl: u8,
    fl_master: u8,
    word_length: u8,
) -> Result<PrivateFlSides, GraphError> {
    let fmt = FixFormat::unsigned(word_length, fl as i32)?;
    FixFormat::unsigned(word_length, fl_master as i32)?;
    if !(alpha > 0.0) {
        return Err(GraphError::Pact(crate::pact::PactError::NonPositiveAlpha(
            alpha,
        )));
    }
    let m: Real = full_scale(fmt.word_length());
    let p = |e: i32| 2f64.powi(e);
    let (fl, flm) = (fl as i32, fl_master as i32);

    let lhs_code = code(m / (p(flm) * alpha) * x * p(fl), m);
    let lhs = (p(fl) * alpha / m) * p(-fl) * lhs_code;

    let alpha_p = p(flm - fl) * alpha;
    let rhs_code = code(m / (p(fl) * alpha_p) * x * p(fl), m);
    let rhs = p(fl - flm) * ((p(fl) * alpha_p / m) * p(-fl) * rhs_code);

    Ok(PrivateFlSides {
        lhs,
        rhs,
        lhs_mantissa: lhs_code as i64,
        rhs_mantissa: rhs_code as i64,
        effective_alpha: alpha_p,
    })
}
