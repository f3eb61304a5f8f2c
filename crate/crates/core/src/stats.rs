//! Representability of Gaussian data in 8-bit fixed point, and choosing the
//! fractional length from a standard deviation.
//!
//! [`sweep`] measures the relative quantization error of every legal
//! fractional length across a grid of standard deviations (brute force);
//! [`fl_from_std`] is the closed-form rule `FL* = ⌊log2(c/σ)⌋` with `c = 40`
//! for signed and `c = 70` for unsigned (rectified) data. The brute-force
//! table also yields the threshold σ at which the optimum moves from one
//! fractional length to the next ([`threshold_sigmas`]).
//!
//! The relative error is the noise-to-signal energy ratio
//! `‖fix_quant(v) − v‖² / ‖v‖²`.

use std::io::{self, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::fixnum::{fix_quant, max_frac_length, FixError, FixFormat, Signedness};
use crate::scalar::Scalar;

pub const SIGNED_STD_CONSTANT: f64 = 40.0;
pub const UNSIGNED_STD_CONSTANT: f64 = 70.0;
pub const DEFAULT_SAMPLES: usize = 10_000;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StatsError {
    #[error("standard deviation must be positive, got {0}")]
    NonPositiveSigma(f64),
    #[error("relative error is undefined for an all-zero vector")]
    ZeroSignal,
    #[error("invalid sweep config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Format(#[from] FixError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub sigma_grid: Vec<f64>,
    pub n_samples: usize,
    pub signedness: Signedness,
    pub word_length: u8,
    pub seed: u64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            sigma_grid: log_spaced(1e-2, 1e3, 200),
            n_samples: DEFAULT_SAMPLES,
            signedness: Signedness::Signed,
            word_length: 8,
            seed: 0,
        }
    }
}

impl SweepConfig {
    pub fn log_spaced(
        sigma_min: f64,
        sigma_max: f64,
        points: usize,
        signedness: Signedness,
    ) -> Self {
        Self {
            sigma_grid: log_spaced(sigma_min, sigma_max, points),
            signedness,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), StatsError> {
        if self.sigma_grid.is_empty() {
            return Err(StatsError::InvalidConfig("empty sigma grid".into()));
        }
        if let Some(&s) = self
            .sigma_grid
            .iter()
            .find(|s| !(**s > 0.0) || !s.is_finite())
        {
            return Err(StatsError::NonPositiveSigma(s));
        }
        if self.sigma_grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(StatsError::InvalidConfig(
                "sigma grid must be strictly increasing".into(),
            ));
        }
        if self.n_samples < 100 {
            return Err(StatsError::InvalidConfig(format!(
                "n_samples must be at least 100, got {}",
                self.n_samples
            )));
        }
        FixFormat::new(self.word_length, 0, self.signedness)?;
        Ok(())
    }

    /// Every legal fractional length for the configured format.
    pub fn frac_lengths(&self) -> Vec<u8> {
        (0..=max_frac_length(self.word_length, self.signedness)).collect()
    }
}

/// `points` values spaced evenly in log10 between `min` and `max` inclusive.
pub fn log_spaced(min: f64, max: f64, points: usize) -> Vec<f64> {
    match points {
        0 => vec![],
        1 => vec![min],
        _ => {
            let (a, b) = (min.log10(), max.log10());
            let step = (b - a) / (points - 1) as f64;
            (0..points)
                .map(|i| {
                    if i == points - 1 {
                        max
                    } else {
                        10f64.powf(a + step * i as f64)
                    }
                })
                .collect()
        }
    }
}

/// Seed for one sweep row, mixed from the global seed and the σ index so that
/// rows can be evaluated in any order.
pub fn row_seed(seed: u64, sigma_index: usize) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ (sigma_index as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` draws from `N(0, σ²)`, deterministic in `seed`.
pub fn sample_gaussian<T: Scalar>(sigma: T, n: usize, seed: u64) -> Result<Vec<T>, StatsError> {
    let s = sigma.to_f64().unwrap_or(f64::NAN);
    if !(s > 0.0) {
        return Err(StatsError::NonPositiveSigma(s));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64_lossy(z) * sigma
        })
        .collect())
}

pub fn rectify<T: Scalar>(v: &[T]) -> Vec<T> {
    v.iter().map(|&x| x.max(T::zero())).collect()
}

/// `‖fix_quant(v) − v‖² / ‖v‖²`.
pub fn relative_error<T: Scalar>(v: &[T], fmt: FixFormat) -> Result<T, StatsError> {
    let (mut noise, mut signal) = (T::zero(), T::zero());
    for &x in v {
        let e = fix_quant(x, fmt) - x;
        noise = noise + e * e;
        signal = signal + x * x;
    }
    if signal == T::zero() {
        return Err(StatsError::ZeroSignal);
    }
    Ok(noise / signal)
}

/// Brute-force error grid over (σ, FL).
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorTable {
    pub signedness: Signedness,
    pub word_length: u8,
    pub sigmas: Vec<f64>,
    pub frac_lengths: Vec<u8>,
    /// `errors[i][k]` is the relative error at `sigmas[i]`, `frac_lengths[k]`.
    pub errors: Vec<Vec<f64>>,
    pub argmin_fl: Vec<u8>,
    pub min_error: Vec<f64>,
}

impl ErrorTable {
    pub fn error_at(&self, sigma_index: usize, fl: u8) -> Option<f64> {
        let k = self.frac_lengths.iter().position(|&f| f == fl)?;
        Some(self.errors[sigma_index][k])
    }

    /// `sigma,fl,relative_error`
    pub fn write_grid_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "sigma,fl,relative_error")?;
        for (i, &sigma) in self.sigmas.iter().enumerate() {
            for (k, &fl) in self.frac_lengths.iter().enumerate() {
                writeln!(w, "{},{},{}", sigma, fl, self.errors[i][k])?;
            }
        }
        Ok(())
    }

    /// `sigma,opt_fl,min_error`
    pub fn write_argmin_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "sigma,opt_fl,min_error")?;
        for (i, &sigma) in self.sigmas.iter().enumerate() {
            writeln!(w, "{},{},{}", sigma, self.argmin_fl[i], self.min_error[i])?;
        }
        Ok(())
    }
}

/// `fl,sigma_threshold`
pub fn write_thresholds_csv<W: Write>(thresholds: &[(u8, f64)], mut w: W) -> io::Result<()> {
    writeln!(w, "fl,sigma_threshold")?;
    for (fl, sigma) in thresholds {
        writeln!(w, "{},{}", fl, sigma)?;
    }
    Ok(())
}

/// Evaluate the relative error of every legal fractional length at every σ.
///
/// Each σ row draws its own sample from [`row_seed`], shared by all the
/// fractional lengths in that row; rows run in parallel.
pub fn sweep(cfg: &SweepConfig) -> Result<ErrorTable, StatsError> {
    cfg.validate()?;
    let fls = cfg.frac_lengths();
    let formats: Vec<FixFormat> = fls
        .iter()
        .map(|&fl| FixFormat::new(cfg.word_length, fl as i32, cfg.signedness))
        .collect::<Result<_, _>>()?;

    let rows: Vec<Vec<f64>> = cfg
        .sigma_grid
        .par_iter()
        .enumerate()
        .map(|(i, &sigma)| {
            let mut v = sample_gaussian(sigma, cfg.n_samples, row_seed(cfg.seed, i))?;
            if cfg.signedness == Signedness::Unsigned {
                v = rectify(&v);
            }
            formats.iter().map(|&f| relative_error(&v, f)).collect()
        })
        .collect::<Result<_, StatsError>>()?;

    let mut argmin_fl = Vec::with_capacity(rows.len());
    let mut min_error = Vec::with_capacity(rows.len());
    for row in &rows {
        // ties go to the larger FL (finer resolution)
        let (k, e) = row
            .iter()
            .enumerate()
            .fold(
                (0, f64::INFINITY),
                |best, (k, &e)| if e <= best.1 { (k, e) } else { best },
            );
        argmin_fl.push(fls[k]);
        min_error.push(e);
    }

    Ok(ErrorTable {
        signedness: cfg.signedness,
        word_length: cfg.word_length,
        sigmas: cfg.sigma_grid.clone(),
        frac_lengths: fls,
        errors: rows,
        argmin_fl,
        min_error,
    })
}

/// Closed-form fractional length for data with standard deviation `sigma`,
/// clamped into the legal range of the format.
pub fn fl_from_std<T: Scalar>(
    sigma: T,
    signedness: Signedness,
    word_length: u8,
) -> Result<u8, StatsError> {
    let s = sigma.to_f64().unwrap_or(f64::NAN);
    if !(s > 0.0) {
        return Err(StatsError::NonPositiveSigma(s));
    }
    let c = match signedness {
        Signedness::Signed => SIGNED_STD_CONSTANT,
        Signedness::Unsigned => UNSIGNED_STD_CONSTANT,
    };
    let raw = (c / s).log2().floor();
    let hi = max_frac_length(word_length, signedness) as f64;
    Ok(raw.clamp(0.0, hi) as u8)
}

/// Like [`fl_from_std`] but returning the whole format.
pub fn format_from_std<T: Scalar>(
    sigma: T,
    signedness: Signedness,
    word_length: u8,
) -> Result<FixFormat, StatsError> {
    let fl = fl_from_std(sigma, signedness, word_length)?;
    Ok(FixFormat::new(word_length, fl as i32, signedness)?)
}

/// For each fractional length, the σ at which the brute-force optimum last
/// moves from `≥ FL` to `< FL` while scanning σ upward. The threshold is the
/// geometric midpoint of the two grid points around the transition.
pub fn threshold_sigmas(table: &ErrorTable) -> Vec<(u8, f64)> {
    let am = &table.argmin_fl;
    let mut out = Vec::new();
    if am.is_empty() {
        return out;
    }
    for &fl in &table.frac_lengths {
        if am[0] < fl {
            continue;
        }
        let last = (1..am.len())
            .filter(|&i| am[i - 1] >= fl && am[i] < fl)
            .last();
        if let Some(i) = last {
            out.push((fl, (table.sigmas[i - 1] * table.sigmas[i]).sqrt()));
        }
    }
    out
}

/// Least-squares line `y = slope · x + intercept`.
pub fn fit_line(xs: &[f64], ys: &[f64]) -> Option<(f64, f64)> {
    let n = xs.len();
    if n < 2 || n != ys.len() {
        return None;
    }
    let mx = xs.iter().sum::<f64>() / n as f64;
    let my = ys.iter().sum::<f64>() / n as f64;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    if sxx == 0.0 {
        return None;
    }
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    Some((slope, my - slope * mx))
}

/// Fit of `log2(σ_threshold)` against FL.
pub fn threshold_fit(thresholds: &[(u8, f64)]) -> Option<(f64, f64)> {
    let xs: Vec<f64> = thresholds.iter().map(|t| t.0 as f64).collect();
    let ys: Vec<f64> = thresholds.iter().map(|t| t.1.log2()).collect();
    fit_line(&xs, &ys)
}

/// Population standard deviation (about the mean).
pub fn std_dev<T: Scalar>(v: &[T]) -> T {
    if v.is_empty() {
        return T::zero();
    }
    let n = T::from_usize(v.len()).unwrap_or_else(T::one);
    let mean = v.iter().fold(T::zero(), |a, &x| a + x) / n;
    let var = v
        .iter()
        .fold(T::zero(), |a, &x| a + (x - mean) * (x - mean))
        / n;
    var.sqrt()
}
