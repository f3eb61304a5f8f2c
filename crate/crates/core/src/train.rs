//! Training: full-precision baseline, quantization-aware training with the
//! double forward, calibration of clipping levels and formats, and tiny
//! fine-tuning of a pre-trained model.
//!
//! The quantized step runs every layer on its quantized input with the fused,
//! quantized effective weight built from the just-updated BN running
//! statistics. Backpropagation uses straight-through estimators: rounding is
//! the identity, clipping passes gradient only strictly inside its range, and
//! a saturated weight gets none. Clipping levels enter only through the fix
//! scaling factors: a producer's output scales as `1/α` of its consumer group,
//! and a consumer's effective weight scales as its own input `α`. With
//! rounding treated as the identity the two contributions cancel except where
//! the input saturates, which gives the PACT gradient.

use std::io::Write;

use rayon::prelude::*;
use thiserror::Error;

use crate::data::Dataset;
use crate::fixnum::{FixFormat, Signedness};
use crate::graph::{
    effective_params, grid_search_fl, simulate, weight_format_for, FusedLayer, GraphError,
    GridSearchReport, ModelGraph, NodeId, NodeKind, QuantMode, SearchSpace,
};
use crate::stats::{format_from_std, std_dev};
use crate::tensor::{
    accuracy, channel_moments, channel_sums, conv_backward_input, conv_backward_weight,
    conv_forward, cross_entropy, ConvGeom,
};
use crate::Real;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite loss at step {step}")]
    NonFinite { step: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("log write failed: {0}")]
    Log(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Full precision, BN normalizing with batch statistics.
    Float,
    /// Quantization-aware training with the double forward.
    Qat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Schedule {
    Constant,
    /// Linear decay to zero over the run.
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: Real,
    pub schedule: Schedule,
    pub momentum: Real,
    pub nesterov: bool,
    pub weight_decay: Real,
    /// Apply weight decay to BN scale/shift (and plain biases).
    pub decay_bn: bool,
    /// Apply weight decay to depthwise convolutions. The shipped models have
    /// none, so this only matters for user-built graphs with one input
    /// channel per output channel.
    pub decay_depthwise: bool,
    /// Apply weight decay to clipping levels.
    pub decay_alpha: bool,
    pub fl_momentum: Real,
    pub seed: u64,
    /// Calibrate clipping levels, formats and BN statistics on the first
    /// `calib_size` training images before a quantized run.
    pub calibrate: bool,
    pub calib_size: usize,
}

impl TrainConfig {
    /// From-scratch training of the toy models.
    pub fn toy(seed: u64) -> Self {
        Self {
            steps: 1200,
            batch_size: 64,
            lr: 0.05,
            schedule: Schedule::Linear,
            momentum: 0.9,
            nesterov: true,
            weight_decay: 5e-4,
            decay_bn: true,
            decay_depthwise: true,
            decay_alpha: true,
            fl_momentum: crate::graph::DEFAULT_ACT_MOMENTUM,
            seed,
            calibrate: true,
            calib_size: 512,
        }
    }

    /// Constant learning rate 1e-4 for 500 iterations.
    pub fn tiny_finetune(seed: u64) -> Self {
        Self {
            steps: 500,
            lr: 1e-4,
            schedule: Schedule::Constant,
            calibrate: false,
            ..Self::toy(seed)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight decay must be non-negative");
        }
        if !(self.fl_momentum > 0.0 && self.fl_momentum <= 1.0) {
            return bad("format momentum must be in (0, 1]");
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> Real {
        match self.schedule {
            Schedule::Constant => self.lr,
            Schedule::Linear => self.lr * (1.0 - step as Real / self.steps.max(1) as Real),
        }
    }
}

/// Gradients of one layer's trainable parameters.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerGrads {
    pub weight: Vec<Real>,
    pub gamma: Vec<Real>,
    pub beta: Vec<Real>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub layers: Vec<Option<LayerGrads>>,
    /// Clipping-level gradient per node (non-zero only for masters).
    pub alpha: Vec<Real>,
}

#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: Real,
    pub logits: Vec<Real>,
    pub grads: Grads,
    /// Weight format used by each layer in the second forward.
    pub weight_fmts: Vec<Option<FixFormat>>,
    /// Standard deviation of each layer's pre-quantization input (real units).
    pub input_std: Vec<Option<Real>>,
}

struct QatCache {
    input: Vec<Real>,
    pass: Vec<bool>,
    fused: FusedLayer,
    geom: ConvGeom,
}

/// Forward (double forward per layer, updating BN running statistics) and
/// backward of the quantized model. Parameters are not changed.
pub fn qat_forward_backward(
    g: &mut ModelGraph,
    raw: &[Real],
    labels: &[usize],
    mode: QuantMode,
) -> Result<StepOutput, GraphError> {
    g.validate()?;
    g.assign_masters();
    let shapes = g.shapes()?;
    let batch = labels.len();
    if raw.len() != batch * g.input.shape.len() || batch == 0 {
        return Err(GraphError::InputSize {
            got: raw.len(),
            per_sample: g.input.shape.len(),
        });
    }
    let n = g.nodes.len();
    let wl = g.word_length;
    let mut values: Vec<Vec<Real>> = Vec::with_capacity(n);
    let mut caches: Vec<Option<QatCache>> = Vec::with_capacity(n);
    let mut input_std = vec![None; n];
    let mut weight_fmts = vec![None; n];
    values.push(g.input.prepare(raw));
    caches.push(None);
    for id in 1..n {
        let (v, c) = match g.nodes[id].kind.clone() {
            NodeKind::Input => unreachable!("validated"),
            NodeKind::Add { lhs, rhs } => (
                values[lhs]
                    .iter()
                    .zip(&values[rhs])
                    .map(|(a, b)| a + b)
                    .collect(),
                None,
            ),
            NodeKind::Layer(l) => {
                let (input, pass) = crate::graph::sim_layer_input(g, id, &values, mode)?;
                if l.src != 0 {
                    input_std[id] = Some(std_dev(&values[l.src]) * g.eta_out(l.src)?);
                }
                let scales = g.scales(id)?;
                let geom = l.op.geometry(shapes[l.src]).expect("validated");
                let name = g.nodes[id].name.clone();
                let stored = l.weight_fl_fixed;
                let lp = g
                    .layer_mut(id)?
                    .double_forward_pass(&input, batch, &geom, scales, mode, stored, wl, &name)?;
                weight_fmts[id] = Some(lp.fused.weight_fmt);
                (
                    lp.output,
                    Some(QatCache {
                        input,
                        pass,
                        fused: lp.fused,
                        geom,
                    }),
                )
            }
        };
        values.push(v);
        caches.push(c);
    }

    let classes = g.classes();
    let (loss, dlogits) = cross_entropy(&values[g.output], labels, classes);
    let mut ds: Vec<Vec<Real>> = values.iter().map(|v| vec![0.0; v.len()]).collect();
    ds[g.output] = dlogits;
    let mut grads = Grads {
        layers: vec![None; n],
        alpha: vec![0.0; n],
    };
    for id in (1..n).rev() {
        let d = std::mem::take(&mut ds[id]);
        match &g.nodes[id].kind {
            NodeKind::Input => {}
            NodeKind::Add { lhs, rhs } => {
                for (t, &v) in ds[*lhs].iter_mut().zip(&d) {
                    *t += v;
                }
                for (t, &v) in ds[*rhs].iter_mut().zip(&d) {
                    *t += v;
                }
            }
            NodeKind::Layer(l) => {
                let c = caches[id].as_ref().expect("layer cache");
                let geom = &c.geom;
                let mut de = conv_backward_weight(&c.input, &d, batch, geom);
                for (x, &p) in de.iter_mut().zip(&c.fused.weight_pass) {
                    if !p {
                        *x = 0.0;
                    }
                }
                let db = channel_sums(&d, batch, geom.output);
                let (eta_in, eta_out) = (c.fused.scales.eta_in, c.fused.scales.eta_out);
                let ratio = eta_in / eta_out;
                let per = geom.fan_in();
                let mut lg = LayerGrads {
                    weight: vec![0.0; l.weight.len()],
                    gamma: vec![0.0; geom.output.c],
                    beta: vec![0.0; geom.output.c],
                };
                for i in 0..geom.output.c {
                    let k = c.fused.eff.channel_scale[i];
                    let row = i * per..(i + 1) * per;
                    for j in row.clone() {
                        lg.weight[j] = k * de[j];
                    }
                    lg.beta[i] = db[i] / eta_out;
                    if l.bn.enabled {
                        let sigma = l.bn.sigma(i);
                        let dw: Real = de[row.clone()]
                            .iter()
                            .zip(&l.weight[row])
                            .map(|(a, b)| a * b)
                            .sum();
                        lg.gamma[i] =
                            dw * ratio / sigma - db[i] * l.bn.running_mean[i] / (sigma * eta_out);
                    }
                }
                // output scale: s ∝ 1/α of the consuming group
                if let Some(m) = g.output_master(id) {
                    let alpha = g.layer(m)?.clip.alpha();
                    let dot: Real = d.iter().zip(&values[id]).map(|(a, b)| a * b).sum();
                    grads.alpha[m] -= dot / alpha;
                }
                if l.src != 0 {
                    let dq = conv_backward_input(&d, batch, geom, &c.fused.weight_q);
                    // input scale: E ∝ α of this layer's master, rounding as identity
                    let m = g.master_of(id);
                    let alpha = g.layer(m)?.clip.alpha();
                    let (lo, hi) = (l.act_fmt.min_value::<Real>(), l.act_fmt.max_value::<Real>());
                    let dot: Real = dq
                        .iter()
                        .zip(&values[l.src])
                        .map(|(a, s)| a * s.clamp(lo, hi))
                        .sum();
                    grads.alpha[m] += dot / alpha;
                    for ((t, &v), &p) in ds[l.src].iter_mut().zip(&dq).zip(&c.pass) {
                        if p {
                            *t += v;
                        }
                    }
                }
                grads.layers[id] = Some(lg);
            }
        }
    }
    Ok(StepOutput {
        loss,
        logits: std::mem::take(&mut values[g.output]),
        grads,
        weight_fmts,
        input_std,
    })
}

struct FloatCache {
    /// Post-ReLU layer input.
    input: Vec<Real>,
    y: Vec<Real>,
    xhat: Vec<Real>,
    batch_std: Vec<Real>,
    geom: ConvGeom,
}

/// Full-precision forward. With `train`, BN normalizes with batch statistics
/// and moves its running statistics (`bn_momentum` overrides the layers'
/// momentum); otherwise it uses the running statistics.
fn float_forward(
    g: &mut ModelGraph,
    raw: &[Real],
    batch: usize,
    train: bool,
    bn_momentum: Option<Real>,
) -> Result<(Vec<Vec<Real>>, Vec<Option<FloatCache>>), GraphError> {
    let shapes = g.shapes()?;
    let n = g.nodes.len();
    let mut values: Vec<Vec<Real>> = Vec::with_capacity(n);
    let mut caches: Vec<Option<FloatCache>> = Vec::with_capacity(n);
    values.push(g.input.prepare(raw));
    caches.push(None);
    for id in 1..n {
        let (v, c) = match g.nodes[id].kind.clone() {
            NodeKind::Input => unreachable!("validated"),
            NodeKind::Add { lhs, rhs } => (
                values[lhs]
                    .iter()
                    .zip(&values[rhs])
                    .map(|(a, b)| a + b)
                    .collect(),
                None,
            ),
            NodeKind::Layer(l) => {
                let input: Vec<Real> = if l.src == 0 {
                    values[0].clone()
                } else {
                    values[l.src].iter().map(|v| v.max(0.0)).collect()
                };
                let geom = l.op.geometry(shapes[l.src]).expect("validated");
                let y = conv_forward(&input, batch, &geom, &l.weight);
                let os = geom.output;
                let plane = os.plane();
                let mut z = y.clone();
                let mut xhat = Vec::new();
                let mut batch_std = Vec::new();
                if l.bn.enabled && train {
                    let (mean, var) = channel_moments(&y, batch, os);
                    batch_std = var.iter().map(|v| (v + l.bn.eps).sqrt()).collect();
                    xhat = y
                        .iter()
                        .enumerate()
                        .map(|(i, v)| {
                            let ch = (i / plane) % os.c;
                            (v - mean[ch]) / batch_std[ch]
                        })
                        .collect();
                    for (i, zv) in z.iter_mut().enumerate() {
                        let ch = (i / plane) % os.c;
                        *zv = l.bn.gamma[ch] * xhat[i] + l.bn.beta[ch];
                    }
                    let layer = g.layer_mut(id)?;
                    let saved = layer.bn.momentum;
                    if let Some(m) = bn_momentum {
                        layer.bn.momentum = m;
                    }
                    layer.bn.update_running(&mean, &var);
                    layer.bn.momentum = saved;
                } else {
                    for (i, zv) in z.iter_mut().enumerate() {
                        let ch = (i / plane) % os.c;
                        *zv = if l.bn.enabled {
                            l.bn.gamma[ch] * (*zv - l.bn.running_mean[ch]) / l.bn.sigma(ch)
                                + l.bn.beta[ch]
                        } else {
                            *zv + l.bn.beta[ch]
                        };
                    }
                }
                (
                    z,
                    Some(FloatCache {
                        input,
                        y,
                        xhat,
                        batch_std,
                        geom,
                    }),
                )
            }
        };
        values.push(v);
        caches.push(c);
    }
    Ok((values, caches))
}

/// Forward and backward of the full-precision model with batch-statistics
/// BN (running statistics are updated).
pub fn float_forward_backward(
    g: &mut ModelGraph,
    raw: &[Real],
    labels: &[usize],
) -> Result<StepOutput, GraphError> {
    g.validate()?;
    let batch = labels.len();
    if raw.len() != batch * g.input.shape.len() || batch == 0 {
        return Err(GraphError::InputSize {
            got: raw.len(),
            per_sample: g.input.shape.len(),
        });
    }
    let (mut values, caches) = float_forward(g, raw, batch, true, None)?;
    let n = g.nodes.len();
    let (loss, dlogits) = cross_entropy(&values[g.output], labels, g.classes());
    let mut ds: Vec<Vec<Real>> = values.iter().map(|v| vec![0.0; v.len()]).collect();
    ds[g.output] = dlogits;
    let mut grads = Grads {
        layers: vec![None; n],
        alpha: vec![0.0; n],
    };
    for id in (1..n).rev() {
        let d = std::mem::take(&mut ds[id]);
        match &g.nodes[id].kind {
            NodeKind::Input => {}
            NodeKind::Add { lhs, rhs } => {
                for (t, &v) in ds[*lhs].iter_mut().zip(&d) {
                    *t += v;
                }
                for (t, &v) in ds[*rhs].iter_mut().zip(&d) {
                    *t += v;
                }
            }
            NodeKind::Layer(l) => {
                let c = caches[id].as_ref().expect("layer cache");
                let os = c.geom.output;
                let plane = os.plane();
                let db = channel_sums(&d, batch, os);
                let mut lg = LayerGrads {
                    weight: Vec::new(),
                    gamma: vec![0.0; os.c],
                    beta: db.clone(),
                };
                let dy: Vec<Real> = if l.bn.enabled {
                    let mut dg = vec![0.0; os.c];
                    for (i, (&dv, &xh)) in d.iter().zip(&c.xhat).enumerate() {
                        dg[(i / plane) % os.c] += dv * xh;
                    }
                    let cnt = (batch * plane) as Real;
                    let mut out = vec![0.0; d.len()];
                    for (i, o) in out.iter_mut().enumerate() {
                        let ch = (i / plane) % os.c;
                        let dxh = d[i] * l.bn.gamma[ch];
                        // dxhat sums: Σdxhat = γ·db, Σ dxhat·xhat = γ·dγ
                        *o = (dxh
                            - l.bn.gamma[ch] * db[ch] / cnt
                            - c.xhat[i] * l.bn.gamma[ch] * dg[ch] / cnt)
                            / c.batch_std[ch];
                    }
                    lg.gamma = dg;
                    out
                } else {
                    d.clone()
                };
                let _ = &c.y;
                lg.weight = conv_backward_weight(&c.input, &dy, batch, &c.geom);
                if l.src != 0 {
                    let dx = conv_backward_input(&dy, batch, &c.geom, &l.weight);
                    for ((t, &v), &s) in ds[l.src].iter_mut().zip(&dx).zip(&values[l.src]) {
                        if s > 0.0 {
                            *t += v;
                        }
                    }
                }
                grads.layers[id] = Some(lg);
            }
        }
    }
    Ok(StepOutput {
        loss,
        logits: std::mem::take(&mut values[g.output]),
        grads,
        weight_fmts: vec![None; n],
        input_std: vec![None; n],
    })
}

/// Initialize clipping levels, activation and weight formats from a
/// full-precision forward. With `reset_bn`, BN running statistics are first
/// set to the batch moments of this batch; otherwise the stored ones are used.
///
/// A group's clipping level is the largest absolute pre-activation among the
/// values its members read.
pub fn calibrate(g: &mut ModelGraph, raw: &[Real], reset_bn: bool) -> Result<(), GraphError> {
    g.validate()?;
    g.assign_masters();
    let per = g.input.shape.len();
    if raw.is_empty() || raw.len() % per != 0 {
        return Err(GraphError::InputSize {
            got: raw.len(),
            per_sample: per,
        });
    }
    let batch = raw.len() / per;
    let (values, _) = float_forward(g, raw, batch, reset_bn, Some(1.0))?;
    for group in g.sibling_groups() {
        let mut alpha: Real = 0.0;
        for &id in &group {
            let src = g.layer(id)?.src;
            alpha = alpha.max(values[src].iter().fold(0.0, |m: Real, v| m.max(v.abs())));
        }
        if !(alpha > 0.0) || !alpha.is_finite() {
            alpha = 1.0;
        }
        for &id in &group {
            g.layer_mut(id)?.clip.set_alpha(alpha)?;
        }
    }
    for id in g.layer_ids() {
        let src = g.layer(id)?.src;
        if src == 0 {
            continue;
        }
        let sigma = std_dev(&values[src]);
        let l = g.layer_mut(id)?;
        if sigma > 0.0 && sigma.is_finite() {
            l.act_sigma = sigma;
            if !l.act_fl_fixed {
                l.act_fmt = format_from_std(sigma, Signedness::Unsigned, l.act_fmt.word_length())?;
            }
        }
    }
    refresh_weight_formats(g)?;
    Ok(())
}

fn refresh_weight_formats(g: &mut ModelGraph) -> Result<(), GraphError> {
    for id in g.layer_ids() {
        if g.layer(id)?.weight_fl_fixed {
            continue;
        }
        let ep = effective_params(g.layer(id)?, g.scales(id)?, g.name(id))?;
        let fmt = weight_format_for(&ep, g.word_length, g.name(id))?;
        g.layer_mut(id)?.weight_fmt = fmt;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Param {
    Weight,
    Gamma,
    Beta,
    Alpha,
}

/// SGD with (optionally Nesterov) momentum, no dampening.
#[derive(Debug, Clone, Default)]
pub struct Sgd {
    velocity: std::collections::BTreeMap<(NodeId, u8), Vec<Real>>,
}

impl Sgd {
    fn update(
        &mut self,
        key: (NodeId, Param),
        p: &mut [Real],
        grad: &[Real],
        lr: Real,
        decay: Real,
        cfg: &TrainConfig,
    ) {
        let v = self
            .velocity
            .entry((key.0, key.1 as u8))
            .or_insert_with(|| vec![0.0; p.len()]);
        for ((x, &g0), vi) in p.iter_mut().zip(grad).zip(v.iter_mut()) {
            let g = g0 + decay * *x;
            *vi = cfg.momentum * *vi + g;
            let step = if cfg.nesterov {
                g + cfg.momentum * *vi
            } else {
                *vi
            };
            *x -= lr * step;
        }
    }

    pub fn apply(
        &mut self,
        g: &mut ModelGraph,
        grads: &Grads,
        lr: Real,
        cfg: &TrainConfig,
    ) -> Result<(), GraphError> {
        let wd = cfg.weight_decay;
        let masters: Vec<NodeId> = g.sibling_groups().iter().map(|gr| gr[0]).collect();
        for id in g.layer_ids() {
            let Some(lg) = &grads.layers[id] else {
                continue;
            };
            let l = g.layer_mut(id)?;
            let depthwise = matches!(l.op, crate::graph::LayerOp::Conv2d { out_channels, .. }
                if l.weight.len() == out_channels * match l.op { crate::graph::LayerOp::Conv2d { kernel, .. } => kernel * kernel, _ => 0 });
            let w_decay = if depthwise && !cfg.decay_depthwise {
                0.0
            } else {
                wd
            };
            let bn_decay = if cfg.decay_bn { wd } else { 0.0 };
            self.update(
                (id, Param::Weight),
                &mut l.weight,
                &lg.weight,
                lr,
                w_decay,
                cfg,
            );
            if l.bn.enabled {
                self.update(
                    (id, Param::Gamma),
                    &mut l.bn.gamma,
                    &lg.gamma,
                    lr,
                    bn_decay,
                    cfg,
                );
            }
            self.update(
                (id, Param::Beta),
                &mut l.bn.beta,
                &lg.beta,
                lr,
                bn_decay,
                cfg,
            );
        }
        for m in masters {
            let l = g.layer_mut(m)?;
            let mut a = [l.clip.alpha()];
            let decay = if cfg.decay_alpha { wd } else { 0.0 };
            self.update((m, Param::Alpha), &mut a, &[grads.alpha[m]], lr, decay, cfg);
            l.clip.set_alpha(a[0].max(1e-3))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub loss: Real,
    pub acc: Real,
    pub alpha_mean: Real,
    pub fl_changes: usize,
}

pub const LOG_HEADER: &str = "step,loss,acc,alpha_mean,fl_changes";

impl LogRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.step, self.loss, self.acc, self.alpha_mean, self.fl_changes
        )
    }
}

pub fn write_log<W: Write>(rows: &[LogRow], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{LOG_HEADER}")?;
    for r in rows {
        writeln!(w, "{}", r.csv())?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub mode: TrainMode,
    pub log: Vec<LogRow>,
}

impl TrainReport {
    pub fn final_loss(&self) -> Option<Real> {
        self.log.last().map(|r| r.loss)
    }
}

fn alpha_mean(g: &ModelGraph) -> Real {
    let groups = g.sibling_groups();
    if groups.is_empty() {
        return 0.0;
    }
    groups
        .iter()
        .map(|gr| g.layer(gr[0]).map(|l| l.clip.alpha()).unwrap_or(0.0))
        .sum::<Real>()
        / groups.len() as Real
}

/// One quantization-aware step: double forward, STE backward, parameter
/// update, then activation-format buffers and weight formats. Returns the
/// log row.
pub fn qat_step(
    g: &mut ModelGraph,
    opt: &mut Sgd,
    raw: &[Real],
    labels: &[usize],
    lr: Real,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LogRow, TrainError> {
    let out = qat_forward_backward(g, raw, labels, QuantMode::FIXED)?;
    if !out.loss.is_finite() {
        return Err(TrainError::NonFinite { step });
    }
    opt.apply(g, &out.grads, lr, cfg)?;
    let mut fl_changes = 0;
    for id in g.layer_ids() {
        let l = g.layer_mut(id)?;
        if let Some(f) = out.weight_fmts[id] {
            if !l.weight_fl_fixed && f != l.weight_fmt {
                l.weight_fmt = f;
                fl_changes += 1;
            }
        }
        if let Some(s) = out.input_std[id] {
            let before = l.act_fmt;
            if l.update_act_fl(s, cfg.fl_momentum, true)? != before {
                fl_changes += 1;
            }
        }
    }
    Ok(LogRow {
        step,
        loss: out.loss,
        acc: accuracy(&out.logits, labels, g.classes()),
        alpha_mean: alpha_mean(g),
        fl_changes,
    })
}

pub fn float_step(
    g: &mut ModelGraph,
    opt: &mut Sgd,
    raw: &[Real],
    labels: &[usize],
    lr: Real,
    cfg: &TrainConfig,
    step: usize,
) -> Result<LogRow, TrainError> {
    let out = float_forward_backward(g, raw, labels)?;
    if !out.loss.is_finite() {
        return Err(TrainError::NonFinite { step });
    }
    opt.apply(g, &out.grads, lr, cfg)?;
    Ok(LogRow {
        step,
        loss: out.loss,
        acc: accuracy(&out.logits, labels, g.classes()),
        alpha_mean: 0.0,
        fl_changes: 0,
    })
}

/// Train `g` on `ds`. A quantized run ends by pinning weight formats from the
/// final effective weights and freezing the graph.
pub fn train(
    g: &mut ModelGraph,
    ds: &Dataset,
    cfg: &TrainConfig,
    mode: TrainMode,
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if ds.shape != g.input.shape || ds.classes != g.classes() {
        return Err(TrainError::Config(
            "dataset does not match the model's input or classes".into(),
        ));
    }
    if ds.len() < cfg.batch_size {
        return Err(TrainError::Config("dataset smaller than one batch".into()));
    }
    g.validate()?;
    if mode == TrainMode::Qat {
        g.unfreeze();
        if cfg.calibrate {
            let (x, _) = ds.head(cfg.calib_size.max(1));
            calibrate(g, &x, true)?;
        }
    }
    let mut opt = Sgd::default();
    let per_epoch = ds.len() / cfg.batch_size;
    let mut log = Vec::with_capacity(cfg.steps);
    let mut order = Vec::new();
    for step in 0..cfg.steps {
        let (epoch, k) = (step / per_epoch, step % per_epoch);
        if k == 0 {
            order = ds.epoch_order(cfg.seed, epoch as u64);
        }
        let (x, y) = ds.gather(&order[k * cfg.batch_size..(k + 1) * cfg.batch_size]);
        let lr = cfg.lr_at(step);
        let row = match mode {
            TrainMode::Float => float_step(g, &mut opt, &x, &y, lr, cfg, step)?,
            TrainMode::Qat => qat_step(g, &mut opt, &x, &y, lr, cfg, step)?,
        };
        log.push(row);
    }
    if mode == TrainMode::Qat {
        g.freeze()?;
    }
    Ok(TrainReport { mode, log })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    Float,
    Quantized,
}

const EVAL_CHUNK: usize = 250;

/// Test accuracy. Quantized evaluation runs the real-domain simulation of the
/// integer model with stored formats and running statistics.
pub fn evaluate(g: &ModelGraph, ds: &Dataset, mode: EvalMode) -> Result<Real, GraphError> {
    if ds.is_empty() {
        return Ok(0.0);
    }
    let classes = g.classes();
    let chunks: Vec<(usize, usize)> = (0..ds.len())
        .step_by(EVAL_CHUNK)
        .map(|s| (s, (s + EVAL_CHUNK).min(ds.len())))
        .collect();
    let hits: Result<Vec<usize>, GraphError> = chunks
        .par_iter()
        .map(|&(a, b)| {
            let (x, y) = ds.gather(&(a..b).collect::<Vec<_>>());
            let logits = match mode {
                EvalMode::Quantized => simulate(g, &x, QuantMode::FIXED)?
                    .values
                    .swap_remove(g.output),
                EvalMode::Float => {
                    let mut gc = g.clone();
                    let (mut v, _) = float_forward(&mut gc, &x, b - a, false, None)?;
                    v.swap_remove(g.output)
                }
            };
            Ok((accuracy(&logits, &y, classes) * (b - a) as Real).round() as usize)
        })
        .collect();
    Ok(hits?.iter().sum::<usize>() as Real / ds.len() as Real)
}

#[derive(Debug, Clone)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    pub space: SearchSpace,
    /// Calibration images drawn from the head of the training set.
    pub calib_size: usize,
    /// Standardize the image and quantize it to a signed format whose
    /// fractional length is searched too.
    pub normalize_input: bool,
}

impl FinetuneConfig {
    pub fn new(seed: u64) -> Self {
        Self {
            train: TrainConfig::tiny_finetune(seed),
            space: SearchSpace::full(),
            calib_size: 512,
            normalize_input: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub search: GridSearchReport,
    pub train: TrainReport,
}

/// Quantize a pre-trained full-precision model: calibrate clipping levels,
/// grid-search fractional lengths, then fine-tune with BN updating. Formats
/// chosen by the search stay pinned.
pub fn tiny_finetune(
    g: &mut ModelGraph,
    ds: &Dataset,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport, TrainError> {
    cfg.train.validate()?;
    let untrained = g.layers().filter(|(_, l)| l.bn.enabled).all(|(_, l)| {
        l.bn.running_mean.iter().all(|&m| m == 0.0) && l.bn.running_var.iter().all(|&v| v == 1.0)
    });
    if untrained {
        return Err(TrainError::Config(
            "model has no pre-trained statistics; train it first".into(),
        ));
    }
    let (x, y) = ds.head(cfg.calib_size.max(1));
    g.unfreeze();
    if cfg.normalize_input {
        let mean = x.iter().sum::<Real>() / x.len() as Real;
        let std = std_dev(&x);
        if !(std > 0.0) {
            return Err(TrainError::Config("calibration images are constant".into()));
        }
        g.input.normalize = Some((mean, std));
        // standardized values have unit std
        g.input.format = format_from_std(1.0, Signedness::Signed, 8).map_err(GraphError::from)?;
        absorb_normalization(g)?;
        for id in g.layer_ids() {
            if g.layer(id)?.src == 0 {
                g.layer_mut(id)?.act_fmt = g.input.format;
            }
        }
    }
    calibrate(g, &x, false)?;
    let search = grid_search_fl(g, &x, &y, &cfg.space)?;
    g.unfreeze();
    let tc = TrainConfig {
        calibrate: false,
        ..cfg.train.clone()
    };
    let train = if tc.steps > 0 {
        train(g, ds, &tc, TrainMode::Qat)?
    } else {
        g.freeze()?;
        TrainReport {
            mode: TrainMode::Qat,
            log: Vec::new(),
        }
    };
    Ok(FinetuneReport { search, train })
}

/// Rewrite the first layers so that feeding standardized images reproduces
/// the pre-activations computed from raw images (up to padding borders).
fn absorb_normalization(g: &mut ModelGraph) -> Result<(), GraphError> {
    let Some((mean, std)) = g.input.normalize else {
        return Ok(());
    };
    let shapes = g.shapes()?;
    for id in g.layer_ids() {
        let l = g.layer_mut(id)?;
        if l.src != 0 {
            continue;
        }
        let geom = l.op.geometry(shapes[0]).expect("validated");
        let per = geom.fan_in();
        // W·x = W·(std·z + mean) = (std·W)·z + mean·ΣW
        for c in 0..geom.output.c {
            let row = &mut l.weight[c * per..(c + 1) * per];
            let shift: Real = row.iter().sum::<Real>() * mean;
            row.iter_mut().for_each(|w| *w *= std);
            if l.bn.enabled {
                l.bn.running_mean[c] -= shift;
            } else {
                l.bn.beta[c] += shift;
            }
        }
    }
    Ok(())
}
