//! Deterministic synthetic 10-class image task.
//!
//! Each class has a fixed 8×8 template: a shared background pattern plus a
//! class-specific one, both smoothed. A sample is its class template shifted
//! by up to one pixel, with random contrast, brightness and Gaussian pixel
//! noise, clipped to `[0, 1)` and rounded to 8-bit pixel values.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Shape;
use crate::Real;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub shape: Shape,
    pub classes: usize,
    /// `len × shape.len()` pixels in `[0, 1)`.
    pub images: Vec<Real>,
    pub labels: Vec<usize>,
}

impl Dataset {
    /// Wrap externally loaded data.
    pub fn new(
        shape: Shape,
        classes: usize,
        images: Vec<Real>,
        labels: Vec<usize>,
    ) -> Result<Self, String> {
        if shape.is_empty() || images.len() != labels.len() * shape.len() {
            return Err(format!(
                "{} pixels do not make {} images of {}×{}×{}",
                images.len(),
                labels.len(),
                shape.c,
                shape.h,
                shape.w
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(format!("label {bad} out of range for {classes} classes"));
        }
        Ok(Self {
            shape,
            classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image(&self, i: usize) -> &[Real] {
        let n = self.shape.len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn gather(&self, idx: &[usize]) -> (Vec<Real>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * self.shape.len());
        for &i in idx {
            x.extend_from_slice(self.image(i));
        }
        (x, idx.iter().map(|&i| self.labels[i]).collect())
    }

    /// First `n` samples.
    pub fn head(&self, n: usize) -> (Vec<Real>, Vec<usize>) {
        self.gather(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// Shuffled order for one pass, fixed by `(seed, epoch)`.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        idx.shuffle(&mut rng);
        idx
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SyntheticSpec {
    pub train: usize,
    pub test: usize,
    pub seed: u64,
    pub noise: Real,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            train: 8000,
            test: 2000,
            seed: 0,
            noise: 0.2,
        }
    }
}

pub const SIDE: usize = 8;
pub const CLASSES: usize = 10;

fn smooth(v: &[Real]) -> Vec<Real> {
    let mut out = vec![0.0; v.len()];
    for y in 0..SIDE {
        for x in 0..SIDE {
            let (mut s, mut n) = (0.0, 0.0);
            for dy in -1i32..=1 {
                for dx in -1i32..=1 {
                    let (yy, xx) = (y as i32 + dy, x as i32 + dx);
                    if (0..SIDE as i32).contains(&yy) && (0..SIDE as i32).contains(&xx) {
                        let w = if dx == 0 && dy == 0 { 2.0 } else { 1.0 };
                        s += w * v[yy as usize * SIDE + xx as usize];
                        n += w;
                    }
                }
            }
            out[y * SIDE + x] = s / n;
        }
    }
    out
}

fn normalize(v: &mut [Real]) {
    let lo = v.iter().cloned().fold(Real::INFINITY, Real::min);
    let hi = v.iter().cloned().fold(Real::NEG_INFINITY, Real::max);
    for x in v {
        *x = (*x - lo) / (hi - lo).max(1e-12);
    }
}

/// Class templates in `[0, 1]`, fixed by `seed`.
pub fn templates(seed: u64) -> Vec<Vec<Real>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x7E3F));
    let noise = |rng: &mut ChaCha8Rng| -> Vec<Real> {
        (0..SIDE * SIDE).map(|_| rng.gen::<Real>()).collect()
    };
    let base = smooth(&noise(&mut rng));
    (0..CLASSES)
        .map(|_| {
            let own = smooth(&smooth(&noise(&mut rng)));
            let mut t: Vec<Real> = base
                .iter()
                .zip(&own)
                .map(|(b, o)| 0.35 * b + 0.65 * o)
                .collect();
            normalize(&mut t);
            t
        })
        .collect()
}

fn sample(t: &[Real], rng: &mut ChaCha8Rng, noise: &Normal<Real>) -> Vec<Real> {
    let (dx, dy) = (rng.gen_range(-1i32..=1), rng.gen_range(-1i32..=1));
    let contrast = rng.gen_range(0.6..1.0);
    let offset = rng.gen_range(0.0..0.2);
    let mut img = Vec::with_capacity(SIDE * SIDE);
    for y in 0..SIDE as i32 {
        for x in 0..SIDE as i32 {
            let (sy, sx) = (
                (y - dy).clamp(0, SIDE as i32 - 1),
                (x - dx).clamp(0, SIDE as i32 - 1),
            );
            let v = offset + contrast * t[(sy * SIDE as i32 + sx) as usize] + noise.sample(rng);
            // 8-bit pixel in [0, 255/256]
            img.push((v * 256.0).floor().clamp(0.0, 255.0) / 256.0);
        }
    }
    img
}

fn split(spec: &SyntheticSpec, n: usize, stream: u64, tmpl: &[Vec<Real>]) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise");
    let mut images = Vec::with_capacity(n * SIDE * SIDE);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % CLASSES;
        images.extend(sample(&tmpl[y], &mut rng, &noise));
        labels.push(y);
    }
    Dataset {
        shape: Shape::new(1, SIDE, SIDE),
        classes: CLASSES,
        images,
        labels,
    }
}

/// `(train, test)` splits. Templates depend only on `spec.seed`; the two
/// splits draw from independent streams.
pub fn synthetic(spec: &SyntheticSpec) -> (Dataset, Dataset) {
    let tmpl = templates(spec.seed);
    (
        split(spec, spec.train, 1, &tmpl),
        split(spec, spec.test, 2, &tmpl),
    )
}
