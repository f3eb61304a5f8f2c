//! Effective-weight fusion of Conv/Linear + BN with the fix scaling factors of
//! the adjacent layers, and the double forward used while training.
//!
//! For a layer `l` reading input with scale `η_in` and feeding a group whose
//! master has scale `η_out`, the fused map on fixed-point inputs `q` is
//!
//! ```text
//! s_i = Σ_j (γ_i/σ_i)·(η_in/η_out)·W_ij · q_j + (β_i − γ_i·μ_i/σ_i) / η_out
//! ```
//!
//! and the consumer's input is `fix_quant(s)` in its own format.

use crate::fixnum::{fix_quant, FixFormat, FixTensor, Signedness};
use crate::stats::{fl_from_std, std_dev};
use crate::tensor::{channel_moments, conv_forward, ConvGeom};
use crate::Real;

use super::{ConvBNLayer, GraphError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerScales {
    pub eta_in: Real,
    pub eta_out: Real,
}

/// Which quantizers are active. `FIXED` is the deployed arithmetic; turning a
/// switch off replaces that rounding by the identity (clipping is kept).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QuantMode {
    pub weights: bool,
    pub activations: bool,
}

impl QuantMode {
    pub const FIXED: Self = Self {
        weights: true,
        activations: true,
    };
    pub const FLOAT: Self = Self {
        weights: false,
        activations: false,
    };

    pub fn fully_fixed(&self) -> bool {
        self.weights && self.activations
    }
}

impl Default for QuantMode {
    fn default() -> Self {
        Self::FIXED
    }
}

/// Full-precision fused weight and bias.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectiveParams {
    pub weight: Vec<Real>,
    pub bias: Vec<Real>,
    /// Per-output-channel factor `(γ_i/σ_i)·(η_in/η_out)` applied to `W`.
    pub channel_scale: Vec<Real>,
}

pub fn effective_params(
    layer: &ConvBNLayer,
    scales: LayerScales,
    name: &str,
) -> Result<EffectiveParams, GraphError> {
    let LayerScales { eta_in, eta_out } = scales;
    if !(eta_in > 0.0 && eta_in.is_finite() && eta_out > 0.0 && eta_out.is_finite()) {
        return Err(GraphError::Contract(format!(
            "`{name}`: scaling factors must be positive (η_in={eta_in}, η_out={eta_out})"
        )));
    }
    let channels = layer.op.out_channels();
    let per_out = layer.weight.len() / channels;
    let mut weight = Vec::with_capacity(layer.weight.len());
    let mut bias = Vec::with_capacity(channels);
    let mut channel_scale = Vec::with_capacity(channels);
    for c in 0..channels {
        if layer.bn.enabled {
            let sigma = layer.bn.sigma(c);
            if !(sigma > 0.0) || !sigma.is_finite() {
                return Err(GraphError::BadRunningStd {
                    layer: name.into(),
                    channel: c,
                    sigma,
                });
            }
        }
        let k = layer.bn.scale(c) * (eta_in / eta_out);
        channel_scale.push(k);
        weight.extend(
            layer.weight[c * per_out..(c + 1) * per_out]
                .iter()
                .map(|w| k * w),
        );
        bias.push(layer.bn.shift(c) / eta_out);
    }
    Ok(EffectiveParams {
        weight,
        bias,
        channel_scale,
    })
}

/// Signed weight format from the effective weight's standard deviation.
pub fn weight_format_for(
    ep: &EffectiveParams,
    word_length: u8,
    name: &str,
) -> Result<FixFormat, GraphError> {
    let mut sigma = std_dev(&ep.weight);
    if !(sigma > 0.0) {
        // constant tensor: fall back to its magnitude
        sigma = ep.weight.iter().map(|w| w.abs()).fold(0.0, Real::max);
    }
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(GraphError::DegenerateWeights(name.into()));
    }
    let fl = fl_from_std(sigma, Signedness::Signed, word_length)?;
    Ok(FixFormat::signed(word_length, fl as i32)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    pub mantissas: Vec<i64>,
    pub format: FixFormat,
}

/// Quantize the effective weight in the format chosen from its standard
/// deviation.
pub fn quantize_effective(
    ep: &EffectiveParams,
    word_length: u8,
) -> Result<QuantizedWeights, GraphError> {
    if !ep.weight.iter().all(|w| w.is_finite()) {
        return Err(GraphError::Contract(
            "effective weight is not finite".into(),
        ));
    }
    let format = weight_format_for(ep, word_length, "effective weight")?;
    Ok(QuantizedWeights {
        mantissas: FixTensor::quantize(&ep.weight, vec![ep.weight.len()], format)
            .mantissas()
            .to_vec(),
        format,
    })
}

/// Bias format: the 32-bit accumulator with `FL = FL_in + FL_w`.
pub fn bias_format(act_fmt: FixFormat, weight_fmt: FixFormat) -> Result<FixFormat, GraphError> {
    let fl = act_fmt.frac_length() as i32 + weight_fmt.frac_length() as i32;
    Ok(FixFormat::signed(32, fl)?)
}

/// A layer ready to run on quantized inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedLayer {
    pub scales: LayerScales,
    pub eff: EffectiveParams,
    pub weight_fmt: FixFormat,
    pub weight_q: Vec<Real>,
    /// False where the weight quantizer saturated (its gradient is cut).
    pub weight_pass: Vec<bool>,
    pub bias_q: Vec<Real>,
}

impl FusedLayer {
    /// `use_stored_format` keeps `layer.weight_fmt`; otherwise the format is
    /// recomputed from the current effective weight.
    pub fn build(
        layer: &ConvBNLayer,
        scales: LayerScales,
        mode: QuantMode,
        use_stored_format: bool,
        word_length: u8,
        name: &str,
    ) -> Result<Self, GraphError> {
        let eff = effective_params(layer, scales, name)?;
        let weight_fmt = if use_stored_format {
            layer.weight_fmt
        } else {
            weight_format_for(&eff, word_length, name)?
        };
        let (weight_q, weight_pass) = if mode.weights {
            let hi = weight_fmt.max_value::<Real>();
            let q = eff
                .weight
                .iter()
                .map(|&w| fix_quant(w, weight_fmt))
                .collect();
            let pass = eff.weight.iter().map(|w| w.abs() < hi).collect();
            (q, pass)
        } else {
            (eff.weight.clone(), vec![true; eff.weight.len()])
        };
        let bias_q = if mode.fully_fixed() {
            let bf = bias_format(layer.act_fmt, weight_fmt)?;
            eff.bias.iter().map(|&b| fix_quant(b, bf)).collect()
        } else {
            eff.bias.clone()
        };
        Ok(Self {
            scales,
            eff,
            weight_fmt,
            weight_q,
            weight_pass,
            bias_q,
        })
    }

    /// `conv(q, W_eff) + b_eff` on dequantized fixed-point inputs.
    pub fn forward(&self, q: &[Real], batch: usize, geom: &ConvGeom) -> Vec<Real> {
        let mut out = conv_forward(q, batch, geom, &self.weight_q);
        let plane = geom.output.plane();
        for (i, v) in out.iter_mut().enumerate() {
            *v += self.bias_q[(i / plane) % geom.output.c];
        }
        out
    }
}

/// Result of a training-mode double forward.
#[derive(Debug, Clone)]
pub struct LayerPass {
    pub batch_mean: Vec<Real>,
    pub batch_var: Vec<Real>,
    pub fused: FusedLayer,
    pub output: Vec<Real>,
}

/// Activation quantizer: `fix_quant(s)` in `fmt`, or clipping only when
/// activation quantization is off. Returns the value and whether the
/// straight-through gradient passes (strictly inside the clip range).
pub fn quantize_activation(s: Real, fmt: FixFormat, mode: QuantMode) -> (Real, bool) {
    let (lo, hi) = (fmt.min_value::<Real>(), fmt.max_value::<Real>());
    let pass = s > lo && s < hi;
    let q = if mode.activations {
        fix_quant(s, fmt)
    } else {
        s.clamp(lo, hi)
    };
    (q, pass)
}

impl ConvBNLayer {
    /// Training-mode forward on a quantized input batch.
    ///
    /// First pass: convolve the dequantized input `η_in·q` with the
    /// full-precision weight and move the BN running statistics toward the
    /// batch moments (no gradient). Second pass: fuse with the updated
    /// statistics, quantize the effective weight and bias, and return the
    /// pre-activation in units of `1/η_out`.
    pub fn double_forward(
        &mut self,
        q_in: &FixTensor,
        geom: &ConvGeom,
        scales: LayerScales,
        training: bool,
        word_length: u8,
    ) -> Result<Vec<Real>, GraphError> {
        if !training {
            return Err(GraphError::Contract(
                "double forward is a training-mode operation".into(),
            ));
        }
        if q_in.format() != self.act_fmt {
            return Err(GraphError::Contract(format!(
                "input format {} does not match the layer's {}",
                q_in.format(),
                self.act_fmt
            )));
        }
        let per = geom.input.len();
        if q_in.len() % per != 0 {
            return Err(GraphError::InputSize {
                got: q_in.len(),
                per_sample: per,
            });
        }
        let q = q_in.values::<Real>();
        let pass = self.double_forward_pass(
            &q,
            q_in.len() / per,
            geom,
            scales,
            QuantMode::FIXED,
            false,
            word_length,
            "layer",
        )?;
        Ok(pass.output)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn double_forward_pass(
        &mut self,
        q: &[Real],
        batch: usize,
        geom: &ConvGeom,
        scales: LayerScales,
        mode: QuantMode,
        use_stored_format: bool,
        word_length: u8,
        name: &str,
    ) -> Result<LayerPass, GraphError> {
        let dequant: Vec<Real> = q.iter().map(|v| v * scales.eta_in).collect();
        let y = conv_forward(&dequant, batch, geom, &self.weight);
        let (batch_mean, batch_var) = channel_moments(&y, batch, geom.output);
        self.bn.update_running(&batch_mean, &batch_var);

        let fused = FusedLayer::build(self, scales, mode, use_stored_format, word_length, name)?;
        let output = fused.forward(q, batch, geom);
        Ok(LayerPass {
            batch_mean,
            batch_var,
            fused,
            output,
        })
    }
}

/// Unfused reference: dequantize, convolve with `W`, apply BN with running
/// statistics, divide by `η_out`.
pub fn unfused_forward(
    layer: &ConvBNLayer,
    q: &[Real],
    batch: usize,
    geom: &ConvGeom,
    scales: LayerScales,
) -> Vec<Real> {
    let dequant: Vec<Real> = q.iter().map(|v| v * scales.eta_in).collect();
    let mut y = conv_forward(&dequant, batch, geom, &layer.weight);
    let plane = geom.output.plane();
    for (i, v) in y.iter_mut().enumerate() {
        let c = (i / plane) % geom.output.c;
        let bn = &layer.bn;
        let x = if bn.enabled {
            bn.gamma[c] * (*v - bn.running_mean[c]) / bn.sigma(c) + bn.beta[c]
        } else {
            *v + bn.beta[c]
        };
        *v = x / scales.eta_out;
    }
    y
}

#[cfg(test)]
mod tests {
    use super::super::{zoo, BatchNorm, LayerOp};
    use super::*;
    use crate::tensor::Shape;

    fn layer(weight: Vec<Real>, bn: BatchNorm, out: usize) -> ConvBNLayer {
        ConvBNLayer::new(LayerOp::Linear { out_features: out }, 0, weight, bn, 8).unwrap()
    }

    fn lcg(n: usize, seed: u64) -> Vec<Real> {
        let mut s = seed;
        (0..n)
            .map(|_| {
                s = s
                    .wrapping_mul(6364136223846793005)
                    .wrapping_add(1442695040888963407);
                ((s >> 33) as f64 / (1u64 << 31) as f64) * 2.0 - 1.0
            })
            .collect()
    }

    #[test]
    fn identity_bn_with_equal_scales_is_a_no_op() {
        let mut bn = BatchNorm::new(2);
        bn.running_var = vec![4.0 - bn.eps, 9.0 - bn.eps];
        bn.gamma = vec![2.0, 3.0];
        let w = vec![0.5, -1.0, 0.25, 2.0];
        let l = layer(w.clone(), bn, 2);
        let ep = effective_params(
            &l,
            LayerScales {
                eta_in: 0.3,
                eta_out: 0.3,
            },
            "t",
        )
        .unwrap();
        for (a, b) in ep.weight.iter().zip(&w) {
            assert!((a - b).abs() < 1e-15);
        }
        assert_eq!(ep.bias, vec![0.0, 0.0]);
    }

    #[test]
    fn doubling_child_alpha_halves_effective_params() {
        let mut bn = BatchNorm::new(2);
        bn.beta = vec![0.3, -0.2];
        bn.running_mean = vec![0.1, 0.4];
        let l = layer(lcg(6, 1), bn, 2);
        let a = effective_params(
            &l,
            LayerScales {
                eta_in: 0.5,
                eta_out: 0.7,
            },
            "t",
        )
        .unwrap();
        // eta is linear in alpha
        let b = effective_params(
            &l,
            LayerScales {
                eta_in: 0.5,
                eta_out: 1.4,
            },
            "t",
        )
        .unwrap();
        for (x, y) in a.weight.iter().zip(&b.weight) {
            assert!((x / 2.0 - y).abs() < 1e-15);
        }
        for (x, y) in a.bias.iter().zip(&b.bias) {
            assert!((x / 2.0 - y).abs() < 1e-15);
        }
    }

    #[test]
    fn fused_matches_unfused_without_quantization() {
        let g = ConvGeom::conv(Shape::new(3, 5, 5), 4, 3, 1, 1).unwrap();
        let mut bn = BatchNorm::new(4);
        bn.gamma = lcg(4, 3).iter().map(|v| 1.0 + 0.5 * v).collect();
        bn.beta = lcg(4, 4);
        bn.running_mean = lcg(4, 5);
        bn.running_var = lcg(4, 6).iter().map(|v| 0.5 + v.abs()).collect();
        let l = ConvBNLayer::new(
            LayerOp::Conv2d {
                out_channels: 4,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            1,
            lcg(g.weight_len(), 7),
            bn,
            8,
        )
        .unwrap();
        let scales = LayerScales {
            eta_in: 0.037,
            eta_out: 0.11,
        };
        let q: Vec<Real> = lcg(2 * g.input.len(), 8).iter().map(|v| v.abs()).collect();
        let fused = FusedLayer::build(&l, scales, QuantMode::FLOAT, false, 8, "t").unwrap();
        let a = fused.forward(&q, 2, &g);
        let b = unfused_forward(&l, &q, 2, &g, scales);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() <= 1e-10 * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn quantize_effective_examples() {
        let w = crate::stats::sample_gaussian(1.0, 4000, 9).unwrap();
        let ep = EffectiveParams {
            channel_scale: vec![1.0],
            bias: vec![0.0],
            weight: w.clone(),
        };
        let std = std_dev(&w);
        let qw = quantize_effective(&ep, 8).unwrap();
        assert_eq!(
            qw.format.frac_length(),
            fl_from_std(std, Signedness::Signed, 8).unwrap()
        );
        assert!(qw.mantissas.iter().all(|m| m.abs() <= 127));

        // exact unit std -> FL 5
        let unit = EffectiveParams {
            weight: vec![1.0, -1.0, 1.0, -1.0],
            ..ep.clone()
        };
        assert_eq!(
            quantize_effective(&unit, 8).unwrap().format.frac_length(),
            5
        );
        let scaled = EffectiveParams {
            weight: unit.weight.iter().map(|w| w * 2.0).collect(),
            ..ep.clone()
        };
        assert_eq!(
            quantize_effective(&scaled, 8).unwrap().format.frac_length(),
            4
        );

        let zero = EffectiveParams {
            weight: vec![0.0; 8],
            ..ep
        };
        assert!(matches!(
            quantize_effective(&zero, 8),
            Err(GraphError::DegenerateWeights(_))
        ));
    }

    #[test]
    fn bad_running_std_is_rejected() {
        let mut bn = BatchNorm::new(1);
        bn.running_var = vec![f64::NAN];
        let l = layer(vec![1.0], bn, 1);
        assert!(matches!(
            effective_params(
                &l,
                LayerScales {
                    eta_in: 1.0,
                    eta_out: 1.0
                },
                "t"
            ),
            Err(GraphError::BadRunningStd { .. })
        ));
    }

    #[test]
    fn double_forward_updates_bn_toward_batch_mean() {
        let mut g = zoo::mlp(2).unwrap();
        let id = g.layer_ids()[0];
        let geom = g.geometry(id).unwrap();
        let scales = g.scales(id).unwrap();
        let wl = g.word_length;
        let fmt = g.input.format;
        let l = g.layer_mut(id).unwrap();
        let q = FixTensor::quantize(
            &vec![0.5; 2 * geom.input.len()],
            vec![2, geom.input.len()],
            fmt,
        );
        let y_full: Vec<Real> = conv_forward(&q.values::<Real>(), 2, &geom, &l.weight);
        let (bm, _) = channel_moments(&y_full, 2, geom.output);
        let before = l.bn.running_mean.clone();
        l.double_forward(&q, &geom, scales, true, wl).unwrap();
        for c in 0..bm.len() {
            let expect = 0.9 * before[c] + 0.1 * bm[c];
            assert!((l.bn.running_mean[c] - expect).abs() < 1e-12);
        }
        assert!(matches!(
            l.double_forward(&q, &geom, scales, false, wl),
            Err(GraphError::Contract(_))
        ));
    }
}
