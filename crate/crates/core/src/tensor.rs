//! Dense NCHW kernels shared by training and the real-domain reference.
//!
//! A fully connected layer is a 1×1 convolution over a 1×1 map whose channel
//! count is the flattened feature size, so one geometry type covers both.

/// Per-sample activation shape (channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn flat(features: usize) -> Self {
        Self::new(features, 1, 1)
    }

    pub const fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// Geometry of a 2-D convolution over one sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub input: Shape,
    pub output: Shape,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn conv(
        input: Shape,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Option<Self> {
        if kernel == 0 || stride == 0 {
            return None;
        }
        let span = |n: usize| {
            (n + 2 * padding)
                .checked_sub(kernel)
                .map(|d| d / stride + 1)
        };
        let output = Shape::new(out_channels, span(input.h)?, span(input.w)?);
        Some(Self {
            input,
            output,
            kernel,
            stride,
            padding,
        })
    }

    /// Fully connected layer over the flattened input.
    pub fn dense(in_features: usize, out_features: usize) -> Self {
        Self {
            input: Shape::flat(in_features),
            output: Shape::flat(out_features),
            kernel: 1,
            stride: 1,
            padding: 0,
        }
    }

    pub fn weight_len(&self) -> usize {
        self.output.c * self.fan_in()
    }

    pub fn fan_in(&self) -> usize {
        self.input.c * self.kernel * self.kernel
    }

    /// Output positions `o` that read input column/row `o·stride + k − padding`
    /// inside `[0, n)`.
    #[inline]
    pub fn valid_range(&self, k: usize, n_in: usize, n_out: usize) -> std::ops::Range<usize> {
        let (s, p) = (self.stride as isize, self.padding as isize);
        let k = k as isize;
        // smallest o with o*s + k - p >= 0
        let lo = if k >= p { 0 } else { (p - k + s - 1) / s };
        // largest o with o*s + k - p <= n_in - 1
        let num = n_in as isize - 1 + p - k;
        let hi = if num < 0 { -1 } else { num / s };
        let hi = hi.min(n_out as isize - 1);
        if hi < lo {
            0..0
        } else {
            lo as usize..hi as usize + 1
        }
    }

    #[inline]
    pub fn input_index(&self, o: usize, k: usize) -> usize {
        o * self.stride + k - self.padding
    }
}

/// `y[b, oc] = Σ w[oc, ic, ky, kx] · x[b, ic, oy·s+ky−p, ox·s+kx−p]`.
pub fn conv_forward(x: &[f64], batch: usize, g: &ConvGeom, w: &[f64]) -> Vec<f64> {
    let (is, os) = (g.input, g.output);
    debug_assert_eq!(x.len(), batch * is.len());
    debug_assert_eq!(w.len(), g.weight_len());
    let mut y = vec![0.0; batch * os.len()];
    let k = g.kernel;
    for b in 0..batch {
        let xb = &x[b * is.len()..(b + 1) * is.len()];
        let yb = &mut y[b * os.len()..(b + 1) * os.len()];
        for oc in 0..os.c {
            let yp = &mut yb[oc * os.plane()..(oc + 1) * os.plane()];
            for ic in 0..is.c {
                let xp = &xb[ic * is.plane()..(ic + 1) * is.plane()];
                for ky in 0..k {
                    let oys = g.valid_range(ky, is.h, os.h);
                    for kx in 0..k {
                        let wv = w[((oc * is.c + ic) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let oxs = g.valid_range(kx, is.w, os.w);
                        for oy in oys.clone() {
                            let iy = g.input_index(oy, ky);
                            let xrow = &xp[iy * is.w..(iy + 1) * is.w];
                            let yrow = &mut yp[oy * os.w..(oy + 1) * os.w];
                            for ox in oxs.clone() {
                                yrow[ox] += wv * xrow[g.input_index(ox, kx)];
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Gradient of [`conv_forward`] with respect to its input.
pub fn conv_backward_input(dy: &[f64], batch: usize, g: &ConvGeom, w: &[f64]) -> Vec<f64> {
    let (is, os) = (g.input, g.output);
    let mut dx = vec![0.0; batch * is.len()];
    let k = g.kernel;
    for b in 0..batch {
        let dyb = &dy[b * os.len()..(b + 1) * os.len()];
        let dxb = &mut dx[b * is.len()..(b + 1) * is.len()];
        for oc in 0..os.c {
            let dyp = &dyb[oc * os.plane()..(oc + 1) * os.plane()];
            for ic in 0..is.c {
                let dxp = &mut dxb[ic * is.plane()..(ic + 1) * is.plane()];
                for ky in 0..k {
                    let oys = g.valid_range(ky, is.h, os.h);
                    for kx in 0..k {
                        let wv = w[((oc * is.c + ic) * k + ky) * k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let oxs = g.valid_range(kx, is.w, os.w);
                        for oy in oys.clone() {
                            let iy = g.input_index(oy, ky);
                            for ox in oxs.clone() {
                                dxp[iy * is.w + g.input_index(ox, kx)] += wv * dyp[oy * os.w + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of [`conv_forward`] with respect to its weight.
pub fn conv_backward_weight(x: &[f64], dy: &[f64], batch: usize, g: &ConvGeom) -> Vec<f64> {
    let (is, os) = (g.input, g.output);
    let mut dw = vec![0.0; g.weight_len()];
    let k = g.kernel;
    for b in 0..batch {
        let xb = &x[b * is.len()..(b + 1) * is.len()];
        let dyb = &dy[b * os.len()..(b + 1) * os.len()];
        for oc in 0..os.c {
            let dyp = &dyb[oc * os.plane()..(oc + 1) * os.plane()];
            for ic in 0..is.c {
                let xp = &xb[ic * is.plane()..(ic + 1) * is.plane()];
                for ky in 0..k {
                    let oys = g.valid_range(ky, is.h, os.h);
                    for kx in 0..k {
                        let oxs = g.valid_range(kx, is.w, os.w);
                        let mut acc = 0.0;
                        for oy in oys.clone() {
                            let iy = g.input_index(oy, ky);
                            for ox in oxs.clone() {
                                acc += dyp[oy * os.w + ox] * xp[iy * is.w + g.input_index(ox, kx)];
                            }
                        }
                        dw[((oc * is.c + ic) * k + ky) * k + kx] += acc;
                    }
                }
            }
        }
    }
    dw
}

/// Per-channel mean and (biased) variance over batch and spatial positions.
pub fn channel_moments(y: &[f64], batch: usize, s: Shape) -> (Vec<f64>, Vec<f64>) {
    let n = (batch * s.plane()) as f64;
    let mut mean = vec![0.0; s.c];
    let mut var = vec![0.0; s.c];
    for b in 0..batch {
        for c in 0..s.c {
            let off = b * s.len() + c * s.plane();
            mean[c] += y[off..off + s.plane()].iter().sum::<f64>();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    for b in 0..batch {
        for c in 0..s.c {
            let off = b * s.len() + c * s.plane();
            var[c] += y[off..off + s.plane()]
                .iter()
                .map(|v| (v - mean[c]) * (v - mean[c]))
                .sum::<f64>();
        }
    }
    var.iter_mut().for_each(|v| *v /= n);
    (mean, var)
}

/// Sum of `dy` per output channel (bias gradient).
pub fn channel_sums(dy: &[f64], batch: usize, s: Shape) -> Vec<f64> {
    let mut out = vec![0.0; s.c];
    for b in 0..batch {
        for (c, o) in out.iter_mut().enumerate() {
            let off = b * s.len() + c * s.plane();
            *o += dy[off..off + s.plane()].iter().sum::<f64>();
        }
    }
    out
}

/// Apply `f(channel, value)` to every element.
pub fn map_channels(y: &mut [f64], batch: usize, s: Shape, mut f: impl FnMut(usize, f64) -> f64) {
    for b in 0..batch {
        for c in 0..s.c {
            let off = b * s.len() + c * s.plane();
            for v in &mut y[off..off + s.plane()] {
                *v = f(c, *v);
            }
        }
    }
}

/// Mean softmax cross-entropy over rows of `logits` and its gradient with
/// respect to the logits.
pub fn cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let n = labels.len();
    debug_assert_eq!(logits.len(), n * classes);
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let row = &logits[i * classes..(i + 1) * classes];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        loss += z.ln() + m - row[y];
        for (k, g) in grad[i * classes..(i + 1) * classes].iter_mut().enumerate() {
            let p = (row[k] - m).exp() / z;
            *g = (p - if k == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Row-wise argmax, ties to the lowest index.
pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks(classes)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                    if v > bv {
                        (i, v)
                    } else {
                        (bi, bv)
                    }
                })
                .0
        })
        .collect()
}

pub fn accuracy(logits: &[f64], labels: &[usize], classes: usize) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = argmax_rows(logits, classes)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    hits as f64 / labels.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_uniform_and_gradient() {
        let (l, g) = cross_entropy(&[0.0; 8], &[1, 3], 4);
        assert!((l - 4f64.ln()).abs() < 1e-12);
        assert!((g[1] + 0.375).abs() < 1e-12 && (g[0] - 0.125).abs() < 1e-12);
        let x = [0.3, -1.2, 2.0, 0.7, 0.1, 0.0];
        let (_, g) = cross_entropy(&x, &[2, 0], 3);
        for i in 0..x.len() {
            let mut p = x;
            p[i] += 1e-6;
            let mut m = x;
            m[i] -= 1e-6;
            let fd = (cross_entropy(&p, &[2, 0], 3).0 - cross_entropy(&m, &[2, 0], 3).0) / 2e-6;
            assert!((fd - g[i]).abs() < 1e-7);
        }
        assert_eq!(accuracy(&x, &[2, 0], 3), 1.0);
    }

    fn naive_conv(x: &[f64], batch: usize, g: &ConvGeom, w: &[f64]) -> Vec<f64> {
        let (is, os, k) = (g.input, g.output, g.kernel);
        let mut y = vec![0.0; batch * os.len()];
        for b in 0..batch {
            for oc in 0..os.c {
                for oy in 0..os.h {
                    for ox in 0..os.w {
                        let mut acc = 0.0;
                        for ic in 0..is.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                                    if iy < 0
                                        || ix < 0
                                        || iy >= is.h as isize
                                        || ix >= is.w as isize
                                    {
                                        continue;
                                    }
                                    acc += w[((oc * is.c + ic) * k + ky) * k + kx]
                                        * x[b * is.len()
                                            + ic * is.plane()
                                            + iy as usize * is.w
                                            + ix as usize];
                                }
                            }
                        }
                        y[b * os.len() + oc * os.plane() + oy * os.w + ox] = acc;
                    }
                }
            }
        }
        y
    }

    fn pseudo(n: usize, seed: u64) -> Vec<f64> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) - 0.5
            })
            .collect()
    }

    #[test]
    fn geometry() {
        let g = ConvGeom::conv(Shape::new(3, 8, 8), 4, 3, 2, 1).unwrap();
        assert_eq!(g.output, Shape::new(4, 4, 4));
        let g = ConvGeom::conv(Shape::new(3, 8, 8), 4, 1, 2, 0).unwrap();
        assert_eq!(g.output, Shape::new(4, 4, 4));
        assert!(ConvGeom::conv(Shape::new(1, 2, 2), 1, 5, 1, 0).is_none());
    }

    #[test]
    fn forward_matches_naive() {
        for &(k, s, p, h) in &[
            (3, 1, 1, 6),
            (3, 2, 1, 7),
            (1, 2, 0, 6),
            (2, 1, 0, 5),
            (3, 3, 2, 5),
        ] {
            let g = ConvGeom::conv(Shape::new(2, h, h), 3, k, s, p).unwrap();
            let x = pseudo(2 * g.input.len(), 1);
            let w = pseudo(g.weight_len(), 2);
            let a = conv_forward(&x, 2, &g, &w);
            let b = naive_conv(&x, 2, &g, &w);
            for (u, v) in a.iter().zip(&b) {
                assert!((u - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_is_adjoint() {
        // <conv(x), dy> == <x, conv_bi(dy)> == <w, conv_bw(x, dy)>
        let g = ConvGeom::conv(Shape::new(2, 7, 7), 3, 3, 2, 1).unwrap();
        let x = pseudo(2 * g.input.len(), 3);
        let w = pseudo(g.weight_len(), 4);
        let dy = pseudo(2 * g.output.len(), 5);
        let y = conv_forward(&x, 2, &g, &w);
        let lhs: f64 = y.iter().zip(&dy).map(|(a, b)| a * b).sum();
        let dx = conv_backward_input(&dy, 2, &g, &w);
        let dw = conv_backward_weight(&x, &dy, 2, &g);
        let r1: f64 = x.iter().zip(&dx).map(|(a, b)| a * b).sum();
        let r2: f64 = w.iter().zip(&dw).map(|(a, b)| a * b).sum();
        assert!((lhs - r1).abs() < 1e-10);
        assert!((lhs - r2).abs() < 1e-10);
    }

    #[test]
    fn dense_is_matrix_vector() {
        let g = ConvGeom::dense(3, 2);
        let w = [1.0, 2.0, 3.0, -1.0, 0.0, 1.0];
        let y = conv_forward(&[1.0, 1.0, 2.0], 1, &g, &w);
        assert_eq!(y, vec![9.0, 1.0]);
    }

    #[test]
    fn moments() {
        let s = Shape::new(2, 1, 2);
        let y = [1.0, 3.0, 0.0, 0.0, 5.0, 7.0, 2.0, 2.0];
        let (m, v) = channel_moments(&y, 2, s);
        assert_eq!(m, vec![4.0, 1.0]);
        assert_eq!(v, vec![5.0, 1.0]);
        assert_eq!(channel_sums(&y, 2, s), vec![16.0, 4.0]);
    }
}
