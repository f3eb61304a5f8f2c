//! Model representation: Conv/Linear + BN layers wired into a DAG with
//! residual additions.
//!
//! Every layer quantizes its own input. A node's value is the real
//! pre-activation it produces (BN output for layers, the sum for additions);
//! the ReLU and clipping happen in the consumer's unsigned quantizer. The
//! image is the only exception: layers reading the [`NodeKind::Input`] node
//! consume its fixed-point mantissas directly, with scale 1.
//!
//! Layers that consume the same value, directly or through additions, form a
//! sibling group. One member, the first in topological order, is the master:
//! every sibling reads the master's clipping level, and producers feeding the
//! group divide by the master's fix scaling factor. Each member keeps its own
//! activation fractional length.

mod fusion;
mod search;
mod sharing;
mod sim;
pub mod zoo;

use thiserror::Error;

use crate::fixnum::{FixError, FixFormat, Signedness};
use crate::pact::{eta_from_alpha, PactError};
use crate::stats::{format_from_std, StatsError};
use crate::tensor::{ConvGeom, Shape};
use crate::{ClipParam, Real};

pub use fusion::{
    bias_format, effective_params, quantize_activation, quantize_effective, unfused_forward,
    weight_format_for, EffectiveParams, FusedLayer, LayerPass, LayerScales, QuantMode,
    QuantizedWeights,
};
pub use search::{grid_search_fl, Coordinate, GridSearchReport, SearchSpace};
pub use sharing::{private_fl_equiv, PrivateFlSides};
pub(crate) use sim::layer_input as sim_layer_input;
pub use sim::{simulate, LayerTrace, SimOutput};

pub type NodeId = usize;

pub const DEFAULT_ACT_MOMENTUM: f64 = 0.1;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("node {0} is not a layer")]
    NotALayer(NodeId),
    #[error("layer `{layer}` channel {channel}: running std {sigma} is not positive and finite")]
    BadRunningStd {
        layer: String,
        channel: usize,
        sigma: f64,
    },
    #[error("layer `{0}` has an all-zero effective weight")]
    DegenerateWeights(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("input batch has {got} values, expected a multiple of {per_sample}")]
    InputSize { got: usize, per_sample: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error(transparent)]
    Fix(#[from] FixError),
    #[error(transparent)]
    Pact(#[from] PactError),
    #[error(transparent)]
    Stats(#[from] StatsError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerOp {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        out_features: usize,
    },
}

impl LayerOp {
    pub fn geometry(&self, input: Shape) -> Option<ConvGeom> {
        match *self {
            LayerOp::Conv2d {
                out_channels,
                kernel,
                stride,
                padding,
            } => ConvGeom::conv(input, out_channels, kernel, stride, padding),
            LayerOp::Linear { out_features } => Some(ConvGeom::dense(input.len(), out_features)),
        }
    }

    pub fn out_channels(&self) -> usize {
        match *self {
            LayerOp::Conv2d { out_channels, .. } => out_channels,
            LayerOp::Linear { out_features } => out_features,
        }
    }
}

/// Batch normalization parameters and running statistics. A disabled BN is
/// an identity scale with a trainable bias (`β`).
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub enabled: bool,
    pub gamma: Vec<Real>,
    pub beta: Vec<Real>,
    pub running_mean: Vec<Real>,
    pub running_var: Vec<Real>,
    pub momentum: Real,
    pub eps: Real,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            enabled: true,
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: DEFAULT_BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    /// Plain bias, no normalization.
    pub fn bias_only(channels: usize) -> Self {
        Self {
            enabled: false,
            ..Self::new(channels)
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Running standard deviation, `sqrt(var + eps)`.
    pub fn sigma(&self, c: usize) -> Real {
        (self.running_var[c] + self.eps).sqrt()
    }

    /// `γ/σ` (1 when disabled).
    pub fn scale(&self, c: usize) -> Real {
        if self.enabled {
            self.gamma[c] / self.sigma(c)
        } else {
            1.0
        }
    }

    /// `β − γμ/σ` (`β` when disabled).
    pub fn shift(&self, c: usize) -> Real {
        if self.enabled {
            self.beta[c] - self.gamma[c] * self.running_mean[c] / self.sigma(c)
        } else {
            self.beta[c]
        }
    }

    /// Exponential moving average toward the batch moments.
    pub fn update_running(&mut self, mean: &[Real], var: &[Real]) {
        if !self.enabled {
            return;
        }
        let m = self.momentum;
        for c in 0..self.channels() {
            self.running_mean[c] = (1.0 - m) * self.running_mean[c] + m * mean[c];
            self.running_var[c] = (1.0 - m) * self.running_var[c] + m * var[c];
        }
    }
}

/// A convolution (or linear) layer fused with the BN that follows it, plus the
/// quantization state of the layer's input.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvBNLayer {
    pub op: LayerOp,
    pub src: NodeId,
    pub weight: Vec<Real>,
    pub bn: BatchNorm,
    /// Clipping level for this layer's input. Ignored for non-master siblings.
    pub clip: ClipParam,
    /// Format of this layer's quantized input.
    pub act_fmt: FixFormat,
    /// Format of the quantized effective weight (recomputed on the fly while
    /// training unless `weight_fl_fixed`).
    pub weight_fmt: FixFormat,
    /// Momentum buffer of the input's standard deviation.
    pub act_sigma: Real,
    pub master: Option<NodeId>,
    pub act_fl_fixed: bool,
    pub weight_fl_fixed: bool,
}

impl ConvBNLayer {
    pub fn new(
        op: LayerOp,
        src: NodeId,
        weight: Vec<Real>,
        bn: BatchNorm,
        word_length: u8,
    ) -> Result<Self, GraphError> {
        Ok(Self {
            op,
            src,
            weight,
            bn,
            clip: ClipParam::new(1.0, word_length)?,
            act_fmt: FixFormat::unsigned(word_length, (word_length / 2) as i32)?,
            weight_fmt: FixFormat::signed(word_length, (word_length / 2) as i32)?,
            act_sigma: 1.0,
            master: None,
            act_fl_fixed: false,
            weight_fl_fixed: false,
        })
    }

    /// Update the activation std buffer and, unless pinned, the activation
    /// format derived from it. Returns the (possibly new) format.
    pub fn update_act_fl(
        &mut self,
        batch_std: Real,
        momentum: Real,
        training: bool,
    ) -> Result<FixFormat, GraphError> {
        if !training || !(batch_std > 0.0) || !batch_std.is_finite() {
            return Ok(self.act_fmt);
        }
        self.act_sigma = (1.0 - momentum) * self.act_sigma + momentum * batch_std;
        if !self.act_fl_fixed {
            self.act_fmt = format_from_std(
                self.act_sigma,
                self.act_fmt.signedness(),
                self.act_fmt.word_length(),
            )?;
        }
        Ok(self.act_fmt)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    Input,
    Layer(ConvBNLayer),
    Add { lhs: NodeId, rhs: NodeId },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub name: String,
    pub kind: NodeKind,
}

/// Image format and the transform applied before quantizing it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InputSpec {
    pub shape: Shape,
    pub format: FixFormat,
    /// `(mean, std)` standardization applied before quantization.
    pub normalize: Option<(Real, Real)>,
}

impl InputSpec {
    /// Raw 8-bit images in `[0, 1)`, unsigned `(8, 8)`, no standardization.
    pub fn unsigned_image(shape: Shape) -> Self {
        Self {
            shape,
            format: FixFormat::unsigned(8, 8).expect("valid"),
            normalize: None,
        }
    }

    /// Map raw pixels to the fixed-point grid the network consumes.
    pub fn prepare(&self, raw: &[Real]) -> Vec<Real> {
        raw.iter()
            .map(|&x| {
                let v = match self.normalize {
                    Some((m, s)) => (x - m) / s,
                    None => x,
                };
                crate::fixnum::fix_quant(v, self.format)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub input: InputSpec,
    /// Topologically ordered; node 0 is the input.
    pub nodes: Vec<Node>,
    pub output: NodeId,
    pub word_length: u8,
    pub act_momentum: Real,
    pub frozen: bool,
}

impl ModelGraph {
    pub fn new(input: InputSpec, word_length: u8) -> Self {
        Self {
            input,
            nodes: vec![Node {
                name: "input".into(),
                kind: NodeKind::Input,
            }],
            output: 0,
            word_length,
            act_momentum: DEFAULT_ACT_MOMENTUM,
            frozen: false,
        }
    }

    /// Append a layer reading `src`; the new node becomes the output.
    pub fn push_layer(
        &mut self,
        name: &str,
        src: NodeId,
        op: LayerOp,
        weight: Vec<Real>,
        bn: BatchNorm,
    ) -> Result<NodeId, GraphError> {
        let mut layer = ConvBNLayer::new(op, src, weight, bn, self.word_length)?;
        if src == 0 {
            layer.act_fmt = self.input.format;
        }
        self.nodes.push(Node {
            name: name.into(),
            kind: NodeKind::Layer(layer),
        });
        self.output = self.nodes.len() - 1;
        Ok(self.output)
    }

    pub fn push_add(&mut self, name: &str, lhs: NodeId, rhs: NodeId) -> NodeId {
        self.nodes.push(Node {
            name: name.into(),
            kind: NodeKind::Add { lhs, rhs },
        });
        self.output = self.nodes.len() - 1;
        self.output
    }

    pub fn layer(&self, id: NodeId) -> Result<&ConvBNLayer, GraphError> {
        match self.nodes.get(id).map(|n| &n.kind) {
            Some(NodeKind::Layer(l)) => Ok(l),
            _ => Err(GraphError::NotALayer(id)),
        }
    }

    pub fn layer_mut(&mut self, id: NodeId) -> Result<&mut ConvBNLayer, GraphError> {
        match self.nodes.get_mut(id).map(|n| &mut n.kind) {
            Some(NodeKind::Layer(l)) => Ok(l),
            _ => Err(GraphError::NotALayer(id)),
        }
    }

    pub fn layer_ids(&self) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| matches!(n.kind, NodeKind::Layer(_)))
            .map(|(i, _)| i)
            .collect()
    }

    pub fn layers(&self) -> impl Iterator<Item = (NodeId, &ConvBNLayer)> {
        self.nodes
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match &n.kind {
                NodeKind::Layer(l) => Some((i, l)),
                _ => None,
            })
    }

    pub fn name(&self, id: NodeId) -> &str {
        &self.nodes[id].name
    }

    /// Number of output classes (channels of the output layer).
    pub fn classes(&self) -> usize {
        self.layer(self.output)
            .map(|l| l.op.out_channels())
            .unwrap_or(0)
    }

    /// Per-sample shape of every node's value.
    pub fn shapes(&self) -> Result<Vec<Shape>, GraphError> {
        let mut shapes: Vec<Shape> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let s = match &node.kind {
                NodeKind::Input => self.input.shape,
                NodeKind::Layer(l) => {
                    let inp = *shapes.get(l.src).ok_or_else(|| {
                        GraphError::Invalid(format!("`{}` reads a later node", node.name))
                    })?;
                    l.op.geometry(inp)
                        .ok_or_else(|| {
                            GraphError::Invalid(format!(
                                "`{}` kernel does not fit its input",
                                node.name
                            ))
                        })?
                        .output
                }
                NodeKind::Add { lhs, rhs } => {
                    let (a, b) = match (shapes.get(*lhs), shapes.get(*rhs)) {
                        (Some(a), Some(b)) => (*a, *b),
                        _ => {
                            return Err(GraphError::Invalid(format!(
                                "`{}` reads a later node",
                                node.name
                            )))
                        }
                    };
                    if a != b {
                        return Err(GraphError::Invalid(format!(
                            "`{}` adds mismatched shapes",
                            node.name
                        )));
                    }
                    a
                }
            };
            debug_assert_eq!(shapes.len(), id);
            shapes.push(s);
        }
        Ok(shapes)
    }

    pub fn geometry(&self, id: NodeId) -> Result<ConvGeom, GraphError> {
        let l = self.layer(id)?;
        let shapes = self.shapes()?;
        l.op.geometry(shapes[l.src]).ok_or_else(|| {
            GraphError::Invalid(format!("`{}` kernel does not fit its input", self.name(id)))
        })
    }

    /// Structural checks: ordering, shapes, parameter sizes, consumers.
    pub fn validate(&self) -> Result<(), GraphError> {
        let invalid = |m: String| Err(GraphError::Invalid(m));
        if !matches!(self.nodes.first().map(|n| &n.kind), Some(NodeKind::Input)) {
            return invalid("node 0 must be the input".into());
        }
        let shapes = self.shapes()?;
        for (id, node) in self.nodes.iter().enumerate().skip(1) {
            match &node.kind {
                NodeKind::Input => {
                    return invalid(format!("`{}`: only node 0 may be an input", node.name))
                }
                NodeKind::Layer(l) => {
                    if l.src >= id {
                        return invalid(format!("`{}` reads a later node", node.name));
                    }
                    let g = l.op.geometry(shapes[l.src]).expect("checked by shapes()");
                    if l.weight.len() != g.weight_len() {
                        return invalid(format!(
                            "`{}` has {} weights, expected {}",
                            node.name,
                            l.weight.len(),
                            g.weight_len()
                        ));
                    }
                    let c = l.op.out_channels();
                    let bn = &l.bn;
                    if [
                        bn.gamma.len(),
                        bn.beta.len(),
                        bn.running_mean.len(),
                        bn.running_var.len(),
                    ]
                    .iter()
                    .any(|&n| n != c)
                    {
                        return invalid(format!(
                            "`{}` BN size does not match {} channels",
                            node.name, c
                        ));
                    }
                    if l.src == 0 && l.act_fmt != self.input.format {
                        return invalid(format!(
                            "`{}` input format differs from the image format",
                            node.name
                        ));
                    }
                    if l.src != 0 && l.act_fmt.signedness() != Signedness::Unsigned {
                        return invalid(format!(
                            "`{}` activation format must be unsigned",
                            node.name
                        ));
                    }
                }
                NodeKind::Add { lhs, rhs } => {
                    if *lhs >= id || *rhs >= id {
                        return invalid(format!("`{}` reads a later node", node.name));
                    }
                    if *lhs == 0 || *rhs == 0 {
                        return invalid(format!("`{}` cannot add the raw input", node.name));
                    }
                }
            }
        }
        if !matches!(
            self.nodes.get(self.output).map(|n| &n.kind),
            Some(NodeKind::Layer(_))
        ) {
            return invalid("output must be a layer".into());
        }
        for id in 0..self.nodes.len() {
            if id != self.output && self.consumers(id).is_empty() {
                return invalid(format!("`{}` has no consumers", self.nodes[id].name));
            }
        }
        if !self.consumers(self.output).is_empty() {
            return invalid("output node must not feed other nodes".into());
        }
        Ok(())
    }

    /// Nodes reading `id` directly.
    pub fn consumers(&self, id: NodeId) -> Vec<NodeId> {
        self.nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| match &n.kind {
                NodeKind::Layer(l) => l.src == id,
                NodeKind::Add { lhs, rhs } => *lhs == id || *rhs == id,
                NodeKind::Input => false,
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Layers that quantize `id`'s value, directly or after additions.
    pub fn consumer_layers(&self, id: NodeId) -> Vec<NodeId> {
        let mut out = Vec::new();
        let mut stack = vec![id];
        while let Some(n) = stack.pop() {
            for c in self.consumers(n) {
                match self.nodes[c].kind {
                    NodeKind::Layer(_) => out.push(c),
                    NodeKind::Add { .. } => stack.push(c),
                    NodeKind::Input => {}
                }
            }
        }
        out.sort_unstable();
        out.dedup();
        out
    }

    /// Sibling groups (sorted, each listed by increasing node id). Layers
    /// reading the raw input are not grouped.
    pub fn sibling_groups(&self) -> Vec<Vec<NodeId>> {
        let n = self.nodes.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut member = vec![false; n];
        for id in 1..n {
            let cl = self.consumer_layers(id);
            for &c in &cl {
                member[c] = true;
            }
            for w in cl.windows(2) {
                let (a, b) = (find(&mut parent, w[0]), find(&mut parent, w[1]));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
        let mut groups: std::collections::BTreeMap<usize, Vec<NodeId>> = Default::default();
        for id in 0..n {
            if member[id] {
                let r = find(&mut parent, id);
                groups.entry(r).or_default().push(id);
            }
        }
        groups.into_values().collect()
    }

    /// Mark the first layer of every sibling group as master and point the
    /// other members at it.
    pub fn assign_masters(&mut self) {
        for id in self.layer_ids() {
            self.layer_mut(id).expect("layer").master = None;
        }
        for group in self.sibling_groups() {
            let master = group[0];
            for &id in &group[1..] {
                self.layer_mut(id).expect("grouped nodes are layers").master = Some(master);
            }
        }
    }

    /// The layer whose clipping level `id` uses (itself for masters).
    pub fn master_of(&self, id: NodeId) -> NodeId {
        self.layer(id).ok().and_then(|l| l.master).unwrap_or(id)
    }

    /// Master of the group that consumes `id`'s value, if any.
    pub fn output_master(&self, id: NodeId) -> Option<NodeId> {
        if id == 0 {
            return None;
        }
        self.consumer_layers(id).first().map(|&c| self.master_of(c))
    }

    /// Clipping level applied to layer `id`'s input.
    pub fn input_alpha(&self, id: NodeId) -> Result<Real, GraphError> {
        Ok(self.layer(self.master_of(id))?.clip.alpha())
    }

    /// Scale of layer `id`'s dequantized input: 1 for the image, otherwise
    /// `η = 2^FL·α/(2^WL − 1)` with the layer's own FL and the master's α.
    pub fn eta_in(&self, id: NodeId) -> Result<Real, GraphError> {
        let l = self.layer(id)?;
        if l.src == 0 {
            return Ok(1.0);
        }
        Ok(eta_from_alpha(self.input_alpha(id)?, l.act_fmt))
    }

    /// Scale that `id`'s value is divided by: the master consumer's `η`, or
    /// 1 when nothing quantizes it (the logits).
    pub fn eta_out(&self, id: NodeId) -> Result<Real, GraphError> {
        match self.output_master(id) {
            Some(m) => {
                let ml = self.layer(m)?;
                Ok(eta_from_alpha(ml.clip.alpha(), ml.act_fmt))
            }
            None => Ok(1.0),
        }
    }

    pub fn scales(&self, id: NodeId) -> Result<LayerScales, GraphError> {
        Ok(LayerScales {
            eta_in: self.eta_in(id)?,
            eta_out: self.eta_out(id)?,
        })
    }

    /// Pin every layer's weight format (from its current effective weight
    /// unless already fixed) and mark the graph frozen.
    pub fn freeze(&mut self) -> Result<(), GraphError> {
        self.validate()?;
        self.assign_masters();
        for id in self.layer_ids() {
            if !self.layer(id)?.weight_fl_fixed {
                let ep = effective_params(self.layer(id)?, self.scales(id)?, self.name(id))?;
                let fmt = weight_format_for(&ep, self.word_length, self.name(id))?;
                self.layer_mut(id)?.weight_fmt = fmt;
            }
        }
        self.frozen = true;
        Ok(())
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Every layer with `master` set must point at the first layer of its group.
    pub fn check_masters(&self) -> Result<(), GraphError> {
        for group in self.sibling_groups() {
            let m = group[0];
            if self.layer(m)?.master.is_some() {
                return Err(GraphError::Invalid(format!(
                    "`{}` should be a master",
                    self.name(m)
                )));
            }
            for &id in &group[1..] {
                if self.layer(id)?.master != Some(m) {
                    return Err(GraphError::Invalid(format!(
                        "`{}` should share `{}`'s clipping level",
                        self.name(id),
                        self.name(m)
                    )));
                }
            }
        }
        Ok(())
    }
}
