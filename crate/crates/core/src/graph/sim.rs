//! Real-domain simulation of the quantized network.
//!
//! Every node carries `s_N = x_N / η_out(N)`, its pre-activation in units of
//! the consuming group's scale. A layer quantizes `s_src` in its own format
//! (the unsigned clip doubles as ReLU) and applies its fused weight and bias.
//! All quantities are dyadic rationals that fit in 53 bits, so the results
//! are exact and match the integer engine code for code.

use crate::tensor::Shape;
use crate::Real;

use super::fusion::{quantize_activation, FusedLayer, QuantMode};
use super::{GraphError, ModelGraph, NodeId, NodeKind};

/// What one layer saw and produced.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub id: NodeId,
    /// Quantized input values (`2^-FL · mantissa`).
    pub input: Vec<Real>,
    /// Straight-through mask of the activation quantizer.
    pub input_pass: Vec<bool>,
    pub fused: FusedLayer,
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub batch: usize,
    /// `s_N` for every node, `batch × shape` each; node 0 holds the prepared image.
    pub values: Vec<Vec<Real>>,
    pub traces: Vec<Option<LayerTrace>>,
    pub shapes: Vec<Shape>,
    pub output: NodeId,
}

impl SimOutput {
    pub fn logits(&self) -> &[Real] {
        &self.values[self.output]
    }

    pub fn trace(&self, id: NodeId) -> Option<&LayerTrace> {
        self.traces.get(id).and_then(Option::as_ref)
    }
}

pub(crate) fn check_batch(g: &ModelGraph, raw: &[Real]) -> Result<usize, GraphError> {
    let per = g.input.shape.len();
    if per == 0 || raw.len() % per != 0 || raw.is_empty() {
        return Err(GraphError::InputSize {
            got: raw.len(),
            per_sample: per,
        });
    }
    Ok(raw.len() / per)
}

/// Quantize the source value of layer `id` into its input format.
pub(crate) fn layer_input(
    g: &ModelGraph,
    id: NodeId,
    values: &[Vec<Real>],
    mode: QuantMode,
) -> Result<(Vec<Real>, Vec<bool>), GraphError> {
    let l = g.layer(id)?;
    if l.src == 0 {
        let v = values[0].clone();
        let pass = vec![true; v.len()];
        return Ok((v, pass));
    }
    Ok(values[l.src]
        .iter()
        .map(|&s| quantize_activation(s, l.act_fmt, mode))
        .unzip())
}

/// Forward a batch of raw images through the quantized model using the
/// running BN statistics and the stored weight formats.
pub fn simulate(g: &ModelGraph, raw: &[Real], mode: QuantMode) -> Result<SimOutput, GraphError> {
    g.validate()?;
    let batch = check_batch(g, raw)?;
    let shapes = g.shapes()?;
    let mut values: Vec<Vec<Real>> = Vec::with_capacity(g.nodes.len());
    let mut traces = Vec::with_capacity(g.nodes.len());
    for (id, node) in g.nodes.iter().enumerate() {
        let (v, t) = match &node.kind {
            NodeKind::Input => (g.input.prepare(raw), None),
            NodeKind::Layer(l) => {
                let (input, input_pass) = layer_input(g, id, &values, mode)?;
                let geom = l.op.geometry(shapes[l.src]).expect("validated");
                let fused =
                    FusedLayer::build(l, g.scales(id)?, mode, true, g.word_length, &node.name)?;
                let out = fused.forward(&input, batch, &geom);
                (
                    out,
                    Some(LayerTrace {
                        id,
                        input,
                        input_pass,
                        fused,
                    }),
                )
            }
            NodeKind::Add { lhs, rhs } => (
                values[*lhs]
                    .iter()
                    .zip(&values[*rhs])
                    .map(|(a, b)| a + b)
                    .collect(),
                None,
            ),
        };
        values.push(v);
        traces.push(t);
    }
    Ok(SimOutput {
        batch,
        values,
        traces,
        shapes,
        output: g.output,
    })
}
