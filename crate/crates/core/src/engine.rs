//! Integer-only execution of a frozen model.
//!
//! Compilation turns every layer's quantized effective weight into `i8`
//! mantissas and its effective bias into an `i32` at the accumulator
//! fractional length `FL_in + FL_w`. Execution multiplies 8-bit activation
//! mantissas by 8-bit weight mantissas, accumulates in `i32`, and moves a
//! value into a consumer's input format with one rounding right shift.
//! Residual sums align their operands with left shifts. The logits stay at
//! accumulator precision.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::fixnum::{operand_width, rescale_shift, FixError, FixFormat, FixTensor, Signedness};
use crate::graph::{simulate, FusedLayer, GraphError, ModelGraph, NodeId, NodeKind, QuantMode};
use crate::tensor::{ConvGeom, Shape};
use crate::Real;

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("input format {got} does not match the program's {expected}")]
    InputFormat { expected: FixFormat, got: FixFormat },
    #[error("input has {got} values, expected a multiple of {per_sample}")]
    InputSize { got: usize, per_sample: usize },
    #[error("32-bit accumulator overflow in `{0}`")]
    Overflow(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Fix(#[from] FixError),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerProgram {
    pub src: NodeId,
    pub geom: ConvGeom,
    pub weight: Vec<i8>,
    pub weight_fmt: FixFormat,
    /// Bias mantissas at `acc_fl`.
    pub bias: Vec<i32>,
    /// Format of the layer's input mantissas.
    pub in_fmt: FixFormat,
}

impl LayerProgram {
    pub fn acc_fl(&self) -> u8 {
        self.in_fmt.frac_length() + self.weight_fmt.frac_length()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ProgramOp {
    Input,
    Layer(LayerProgram),
    Add { lhs: NodeId, rhs: NodeId },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramNode {
    pub name: String,
    pub op: ProgramOp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QuantProgram {
    pub input_shape: Shape,
    pub input_fmt: FixFormat,
    pub nodes: Vec<ProgramNode>,
    pub output: NodeId,
    /// Worst-case accumulator bounds above `i32::MAX` found at compile time.
    pub warnings: Vec<String>,
}

/// Fractional length of each node's integer value (the input's FL for the
/// image, the accumulator FL for layers, the aligned FL for sums).
pub fn value_fls(p: &QuantProgram) -> Vec<u8> {
    let mut fls: Vec<u8> = Vec::with_capacity(p.nodes.len());
    for n in &p.nodes {
        let fl = match &n.op {
            ProgramOp::Input => p.input_fmt.frac_length(),
            ProgramOp::Layer(l) => l.acc_fl(),
            ProgramOp::Add { lhs, rhs } => fls[*lhs].max(fls[*rhs]),
        };
        fls.push(fl);
    }
    fls
}

impl QuantProgram {
    pub fn classes(&self) -> usize {
        match &self.nodes[self.output].op {
            ProgramOp::Layer(l) => l.geom.output.len(),
            _ => 0,
        }
    }

    /// Structural checks shared by `compile` and the program reader.
    pub fn validate(&self) -> Result<(), EngineError> {
        let bad = |m: String| Err(EngineError::Contract(m));
        if !matches!(self.nodes.first().map(|n| &n.op), Some(ProgramOp::Input)) {
            return bad("node 0 must be the input".into());
        }
        if self.input_fmt.word_length() > 8 || self.input_shape.is_empty() {
            return bad("input must be a non-empty tensor of at most 8-bit mantissas".into());
        }
        let mut shapes = Vec::with_capacity(self.nodes.len());
        let fls = value_fls_checked(self)?;
        for (id, n) in self.nodes.iter().enumerate() {
            let s = match &n.op {
                ProgramOp::Input if id == 0 => self.input_shape,
                ProgramOp::Input => {
                    return bad(format!("`{}`: only node 0 may be an input", n.name))
                }
                ProgramOp::Layer(l) => {
                    if l.src >= id {
                        return bad(format!("`{}` reads a later node", n.name));
                    }
                    let src = shapes[l.src];
                    if l.geom.input != src && l.geom.input != Shape::flat(src.len()) {
                        return bad(format!("`{}` geometry does not match its input", n.name));
                    }
                    if l.weight.len() != l.geom.weight_len() || l.bias.len() != l.geom.output.c {
                        return bad(format!(
                            "`{}` parameter sizes do not match its geometry",
                            n.name
                        ));
                    }
                    if l.in_fmt.word_length() > 8
                        || l.weight_fmt.word_length() > 8
                        || !l.weight_fmt.is_signed()
                    {
                        return bad(format!("`{}` operands must be 8-bit", n.name));
                    }
                    if l.src == 0 && l.in_fmt != self.input_fmt {
                        return bad(format!(
                            "`{}` input format differs from the image format",
                            n.name
                        ));
                    }
                    if (fls[l.src] as i32 - l.in_fmt.frac_length() as i32).abs() > 31
                        || l.acc_fl() > 31
                    {
                        return bad(format!("`{}` shift out of range", n.name));
                    }
                    l.geom.output
                }
                ProgramOp::Add { lhs, rhs } => {
                    if *lhs >= id || *rhs >= id || *lhs == 0 || *rhs == 0 {
                        return bad(format!("`{}` has invalid operands", n.name));
                    }
                    if shapes[*lhs] != shapes[*rhs] {
                        return bad(format!("`{}` adds mismatched shapes", n.name));
                    }
                    shapes[*lhs]
                }
            };
            shapes.push(s);
        }
        if !matches!(
            self.nodes.get(self.output).map(|n| &n.op),
            Some(ProgramOp::Layer(_))
        ) {
            return bad("output must be a layer".into());
        }
        Ok(())
    }
}

fn value_fls_checked(p: &QuantProgram) -> Result<Vec<u8>, EngineError> {
    for (id, n) in p.nodes.iter().enumerate() {
        let ok = match &n.op {
            ProgramOp::Input => true,
            ProgramOp::Layer(l) => l.src < id,
            ProgramOp::Add { lhs, rhs } => *lhs < id && *rhs < id,
        };
        if !ok {
            return Err(EngineError::Contract(format!(
                "`{}` reads a later node",
                n.name
            )));
        }
    }
    Ok(value_fls(p))
}

/// Integerize a frozen graph.
pub fn compile(g: &ModelGraph) -> Result<QuantProgram, EngineError> {
    if !g.frozen {
        return Err(EngineError::Contract(
            "graph must be frozen before compiling".into(),
        ));
    }
    g.validate()?;
    g.check_masters()?;
    if g.word_length > 8 || g.input.format.word_length() > 8 {
        return Err(EngineError::Contract(format!(
            "the integer engine needs 8-bit operands, graph uses WL={}",
            g.word_length
        )));
    }
    let shapes = g.shapes()?;
    let mut nodes = Vec::with_capacity(g.nodes.len());
    let mut warnings = Vec::new();
    for (id, node) in g.nodes.iter().enumerate() {
        let op = match &node.kind {
            NodeKind::Input => ProgramOp::Input,
            NodeKind::Add { lhs, rhs } => ProgramOp::Add {
                lhs: *lhs,
                rhs: *rhs,
            },
            NodeKind::Layer(l) => {
                let geom = l.op.geometry(shapes[l.src]).expect("validated");
                let fused = FusedLayer::build(
                    l,
                    g.scales(id)?,
                    QuantMode::FIXED,
                    true,
                    g.word_length,
                    &node.name,
                )?;
                let wf = fused.weight_fmt;
                let weight = fused
                    .weight_q
                    .iter()
                    .map(|&w| {
                        i8::try_from(crate::fixnum::to_mantissa(w, wf))
                            .expect("signed 8-bit format")
                    })
                    .collect::<Vec<i8>>();
                let acc_fmt = crate::graph::bias_format(l.act_fmt, wf)?;
                let bias = fused
                    .bias_q
                    .iter()
                    .map(|&b| crate::fixnum::to_mantissa(b, acc_fmt) as i32)
                    .collect::<Vec<i32>>();
                let lp = LayerProgram {
                    src: l.src,
                    geom,
                    weight,
                    weight_fmt: wf,
                    bias,
                    in_fmt: l.act_fmt,
                };
                let bound = accumulator_bound(&lp);
                if bound > i32::MAX as i64 {
                    warnings.push(format!(
                        "`{}`: worst-case accumulator {bound} exceeds the 32-bit range",
                        node.name
                    ));
                }
                ProgramOp::Layer(lp)
            }
        };
        nodes.push(ProgramNode {
            name: node.name.clone(),
            op,
        });
    }
    let p = QuantProgram {
        input_shape: g.input.shape,
        input_fmt: g.input.format,
        nodes,
        output: g.output,
        warnings,
    };
    p.validate()?;
    Ok(p)
}

/// `max_c Σ|w|·max|q| + |b|` over output channels.
pub fn accumulator_bound(l: &LayerProgram) -> i64 {
    let qmax = l.in_fmt.max_mantissa().max(-l.in_fmt.min_mantissa());
    let per = l.geom.fan_in();
    (0..l.geom.output.c)
        .map(|c| {
            let s: i64 = l.weight[c * per..(c + 1) * per]
                .iter()
                .map(|&w| (w as i64).abs())
                .sum();
            s * qmax + (l.bias[c] as i64).abs()
        })
        .max()
        .unwrap_or(0)
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ExecTrace {
    /// Multiplication counts keyed by the measured operand widths
    /// `(activation bits, weight bits)`.
    pub multiplies: BTreeMap<(u8, u8), u64>,
    pub wide_multiplies: u64,
    pub max_accumulator: i64,
    pub shifts: u64,
    pub overflows: u64,
    /// Per-node integer values when dumping is requested: layer inputs and
    /// node outputs.
    pub layer_inputs: Vec<Option<Vec<i32>>>,
    pub node_values: Vec<Option<Vec<i32>>>,
}

impl ExecTrace {
    pub fn total_multiplies(&self) -> u64 {
        self.multiplies.values().sum()
    }

    fn count(&mut self, act_bits: u8, weight_bits: u8, n: u64) {
        if n == 0 {
            return;
        }
        *self.multiplies.entry((act_bits, weight_bits)).or_default() += n;
        if act_bits > 8 || weight_bits > 8 {
            self.wide_multiplies += n;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InferOutput {
    pub batch: usize,
    /// Logit mantissas, `batch × classes`.
    pub logits: Vec<i32>,
    pub logit_fl: u8,
    pub trace: ExecTrace,
}

impl InferOutput {
    pub fn classes(&self) -> usize {
        self.logits.len() / self.batch.max(1)
    }

    pub fn logits_real(&self) -> Vec<Real> {
        let s = 2f64.powi(-(self.logit_fl as i32));
        self.logits.iter().map(|&m| m as Real * s).collect()
    }

    pub fn predictions(&self) -> Vec<usize> {
        self.logits
            .chunks(self.classes().max(1))
            .map(|r| {
                r.iter()
                    .enumerate()
                    .fold(0, |b, (i, v)| if *v > r[b] { i } else { b })
            })
            .collect()
    }
}

fn conv_int(
    x: &[i32],
    batch: usize,
    l: &LayerProgram,
    name: &str,
    trace: &mut ExecTrace,
) -> Result<Vec<i32>, EngineError> {
    let g = &l.geom;
    let (is, os) = (g.input, g.output);
    let width = |lo: i64, hi: i64, sig| operand_width(lo, sig).max(operand_width(hi, sig));
    let (xlo, xhi) = x.iter().fold((0i64, 0i64), |(a, b), &v| {
        (a.min(v as i64), b.max(v as i64))
    });
    let (wlo, whi) = l.weight.iter().fold((0i64, 0i64), |(a, b), &v| {
        (a.min(v as i64), b.max(v as i64))
    });
    let act_bits = width(xlo, xhi, l.in_fmt.signedness());
    let w_bits = width(wlo, whi, Signedness::Signed);

    let overflow = || EngineError::Overflow(name.to_string());
    let mut out = vec![0i32; batch * os.len()];
    let mut macs = 0u64;
    let kk = g.kernel * g.kernel;
    for b in 0..batch {
        let xb = &x[b * is.len()..(b + 1) * is.len()];
        for oc in 0..os.c {
            let ob = &mut out[b * os.len() + oc * os.plane()..b * os.len() + (oc + 1) * os.plane()];
            ob.fill(l.bias[oc]);
            for ic in 0..is.c {
                let xc = &xb[ic * is.plane()..(ic + 1) * is.plane()];
                for ky in 0..g.kernel {
                    let ry = g.valid_range(ky, is.h, os.h);
                    for kx in 0..g.kernel {
                        let rx = g.valid_range(kx, is.w, os.w);
                        let w = l.weight[(oc * is.c + ic) * kk + ky * g.kernel + kx] as i32;
                        macs += (ry.len() * rx.len()) as u64;
                        for oy in ry.clone() {
                            let iy = g.input_index(oy, ky);
                            let row = &xc[iy * is.w..(iy + 1) * is.w];
                            let orow = &mut ob[oy * os.w..(oy + 1) * os.w];
                            for ox in rx.clone() {
                                let p = row[g.input_index(ox, kx)] * w;
                                orow[ox] = orow[ox].checked_add(p).ok_or_else(|| {
                                    trace.overflows += 1;
                                    overflow()
                                })?;
                            }
                        }
                    }
                }
            }
            let m = ob.iter().map(|&v| (v as i64).abs()).max().unwrap_or(0);
            trace.max_accumulator = trace.max_accumulator.max(m);
        }
    }
    trace.count(act_bits, w_bits, macs);
    Ok(out)
}

pub fn infer(p: &QuantProgram, input: &FixTensor) -> Result<InferOutput, EngineError> {
    infer_with(p, input, false)
}

/// Run the program; `dump` keeps every node's integer values in the trace.
pub fn infer_with(
    p: &QuantProgram,
    input: &FixTensor,
    dump: bool,
) -> Result<InferOutput, EngineError> {
    if input.format() != p.input_fmt {
        return Err(EngineError::InputFormat {
            expected: p.input_fmt,
            got: input.format(),
        });
    }
    let per = p.input_shape.len();
    if input.is_empty() || input.len() % per != 0 {
        return Err(EngineError::InputSize {
            got: input.len(),
            per_sample: per,
        });
    }
    let batch = input.len() / per;
    let fls = value_fls(p);
    let mut trace = ExecTrace::default();
    if dump {
        trace.layer_inputs = vec![None; p.nodes.len()];
        trace.node_values = vec![None; p.nodes.len()];
    }
    let mut values: Vec<Vec<i32>> = Vec::with_capacity(p.nodes.len());
    for (id, node) in p.nodes.iter().enumerate() {
        let v = match &node.op {
            ProgramOp::Input => input.mantissas().iter().map(|&m| m as i32).collect(),
            ProgramOp::Layer(l) => {
                let x: Vec<i32> = if l.src == 0 {
                    values[0].clone()
                } else {
                    trace.shifts += values[l.src].len() as u64;
                    values[l.src]
                        .iter()
                        .map(|&a| rescale_shift(a as i64, fls[l.src], l.in_fmt) as i32)
                        .collect()
                };
                let y = conv_int(&x, batch, l, &node.name, &mut trace)?;
                if dump {
                    trace.layer_inputs[id] = Some(x);
                }
                y
            }
            ProgramOp::Add { lhs, rhs } => {
                let fl = fls[id];
                let (sl, sr) = ((fl - fls[*lhs]) as u32, (fl - fls[*rhs]) as u32);
                if sl > 0 || sr > 0 {
                    trace.shifts += values[*lhs].len() as u64;
                }
                let align = |v: i32, s: u32| -> Option<i32> {
                    (v as i64)
                        .checked_shl(s)
                        .and_then(|x| i32::try_from(x).ok())
                };
                let mut out = Vec::with_capacity(values[*lhs].len());
                for (&a, &b) in values[*lhs].iter().zip(&values[*rhs]) {
                    match align(a, sl)
                        .zip(align(b, sr))
                        .and_then(|(a, b)| a.checked_add(b))
                    {
                        Some(s) => {
                            trace.max_accumulator = trace.max_accumulator.max((s as i64).abs());
                            out.push(s)
                        }
                        None => {
                            trace.overflows += 1;
                            return Err(EngineError::Overflow(node.name.clone()));
                        }
                    }
                }
                out
            }
        };
        if dump {
            trace.node_values[id] = Some(v.clone());
        }
        values.push(v);
    }
    Ok(InferOutput {
        batch,
        logits: values.swap_remove(p.output),
        logit_fl: fls[p.output],
        trace,
    })
}

/// Quantize raw images with the graph's input convention.
pub fn quantize_images(g: &ModelGraph, raw: &[Real]) -> FixTensor {
    let per = g.input.shape.len().max(1);
    let prepared = g.input.prepare(raw);
    FixTensor::quantize(&prepared, vec![raw.len() / per, per], g.input.format)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeDiscrepancy {
    pub id: NodeId,
    pub name: String,
    /// Max |engine − simulation| over the layer's input mantissas.
    pub input: u64,
    /// Max |engine − simulation| over the node's output at its value FL.
    pub output: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EquivalenceReport {
    pub nodes: Vec<NodeDiscrepancy>,
    pub trace: ExecTrace,
}

impl EquivalenceReport {
    pub fn is_exact(&self) -> bool {
        self.nodes.iter().all(|n| n.input == 0 && n.output == 0)
    }

    pub fn max_discrepancy(&self) -> u64 {
        self.nodes
            .iter()
            .map(|n| n.input.max(n.output))
            .max()
            .unwrap_or(0)
    }
}

fn max_diff(eng: &[i32], sim: &[Real], fl: u8) -> u64 {
    let scale = 2f64.powi(fl as i32);
    eng.iter()
        .zip(sim)
        .map(|(&e, &s)| {
            let m = s * scale;
            if m.fract() != 0.0 || !m.is_finite() {
                return u64::MAX;
            }
            (e as i64 - m as i64).unsigned_abs()
        })
        .max()
        .unwrap_or(0)
}

/// Compare the program against the real-domain quantized simulation of `g`
/// at every layer input and node output.
pub fn equivalence_report(
    g: &ModelGraph,
    p: &QuantProgram,
    raw: &[Real],
) -> Result<EquivalenceReport, EngineError> {
    let sim = simulate(g, raw, QuantMode::FIXED)?;
    let out = infer_with(p, &quantize_images(g, raw), true)?;
    let fls = value_fls(p);
    let mut nodes = Vec::new();
    for (id, node) in p.nodes.iter().enumerate().skip(1) {
        let input = match (&node.op, sim.trace(id)) {
            (ProgramOp::Layer(l), Some(t)) => max_diff(
                out.trace.layer_inputs[id].as_deref().unwrap_or(&[]),
                &t.input,
                l.in_fmt.frac_length(),
            ),
            _ => 0,
        };
        let output = max_diff(
            out.trace.node_values[id].as_deref().unwrap_or(&[]),
            &sim.values[id],
            fls[id],
        );
        nodes.push(NodeDiscrepancy {
            id,
            name: node.name.clone(),
            input,
            output,
        });
    }
    Ok(EquivalenceReport {
        nodes,
        trace: out.trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{zoo, BatchNorm, InputSpec, LayerOp};

    fn images(n: usize, per: usize, salt: usize) -> Vec<Real> {
        (0..n * per)
            .map(|i| ((i * 131 + salt * 17 + 7) % 256) as Real / 256.0)
            .collect()
    }

    fn frozen(name: &str, seed: u64) -> ModelGraph {
        let mut g = zoo::by_name(name, seed).unwrap();
        g.freeze().unwrap();
        g
    }

    #[test]
    fn identity_layer_compiles_to_weight_mantissas() {
        let mut g = ModelGraph::new(InputSpec::unsigned_image(zoo::IMAGE), 8);
        let fmt = FixFormat::signed(8, 5).unwrap();
        let m: Vec<i64> = (0..640).map(|i| (i % 41) as i64 - 20).collect();
        let w: Vec<Real> = m
            .iter()
            .map(|&v| crate::fixnum::from_mantissa(v, fmt))
            .collect();
        let id = g
            .push_layer(
                "head",
                0,
                LayerOp::Linear { out_features: 10 },
                w,
                BatchNorm::bias_only(10),
            )
            .unwrap();
        g.layer_mut(id).unwrap().weight_fl_fixed = true;
        g.layer_mut(id).unwrap().weight_fmt = fmt;
        g.freeze().unwrap();
        let p = compile(&g).unwrap();
        let ProgramOp::Layer(l) = &p.nodes[id].op else {
            panic!()
        };
        assert_eq!(l.weight.iter().map(|&v| v as i64).collect::<Vec<_>>(), m);
    }

    #[test]
    fn unfrozen_graph_is_rejected() {
        let g = zoo::mlp(0).unwrap();
        assert!(matches!(compile(&g), Err(EngineError::Contract(_))));
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_logits() {
        let mut g = zoo::plain_cnn(1).unwrap();
        for id in g.layer_ids() {
            let l = g.layer_mut(id).unwrap();
            l.bn.beta.iter_mut().for_each(|b| *b = 0.0);
            l.bn.running_mean.iter_mut().for_each(|m| *m = 0.0);
        }
        g.freeze().unwrap();
        let p = compile(&g).unwrap();
        let x = FixTensor::new(vec![0; 2 * 64], vec![2, 64], g.input.format).unwrap();
        let out = infer(&p, &x).unwrap();
        assert!(out.logits.iter().all(|&v| v == 0));
    }

    #[test]
    fn engine_matches_simulation_on_all_toys() {
        for name in zoo::ARCHITECTURES {
            let g = frozen(name, 3);
            let p = compile(&g).unwrap();
            let raw = images(20, g.input.shape.len(), 1);
            let rep = equivalence_report(&g, &p, &raw).unwrap();
            assert!(rep.is_exact(), "{name}: {:?}", rep.nodes);
            assert_eq!(rep.trace.wide_multiplies, 0);
            assert!(rep.trace.total_multiplies() > 0);
            let sim = simulate(&g, &raw, QuantMode::FIXED).unwrap();
            let out = infer(&p, &quantize_images(&g, &raw)).unwrap();
            assert_eq!(out.logits_real(), sim.logits());
        }
    }

    #[test]
    fn corrupted_weight_is_localized() {
        let g = frozen("residual_cnn", 4);
        let mut p = compile(&g).unwrap();
        let target = g
            .nodes
            .iter()
            .position(|n| n.name == "block2.conv2")
            .unwrap();
        let raw = images(8, 64, 2);
        let clean = infer_with(&p, &quantize_images(&g, &raw), true).unwrap();
        let x = clean.trace.layer_inputs[target].as_ref().unwrap();
        if let ProgramOp::Layer(l) = &mut p.nodes[target].op {
            // centre tap of an input channel that carries signal
            let plane = l.geom.input.plane();
            let ic = (0..l.geom.input.c)
                .find(|&c| x[c * plane..(c + 1) * plane].iter().any(|&v| v != 0))
                .unwrap();
            let k = (ic * l.geom.kernel + l.geom.kernel / 2) * l.geom.kernel + l.geom.kernel / 2;
            l.weight[k] = l.weight[k].wrapping_add(40);
        }
        let rep = equivalence_report(&g, &p, &raw).unwrap();
        for n in &rep.nodes {
            let downstream = n.id >= target;
            assert_eq!(
                n.output > 0 || n.input > 0,
                downstream && (n.output > 0 || n.input > 0)
            );
            if n.id < target {
                assert_eq!((n.input, n.output), (0, 0), "{}", n.name);
            }
        }
        assert!(rep.nodes.iter().find(|n| n.id == target).unwrap().output > 0);
        assert_eq!(rep, equivalence_report(&g, &p, &raw).unwrap());
    }

    #[test]
    fn replay_is_bit_exact_and_formats_are_checked() {
        let g = frozen("residual_cnn", 5);
        let p = compile(&g).unwrap();
        assert_eq!(p, compile(&g).unwrap());
        let x = quantize_images(&g, &images(4, 64, 3));
        assert_eq!(infer(&p, &x).unwrap(), infer(&p, &x).unwrap());
        let wrong =
            FixTensor::new(vec![0; 64], vec![1, 64], FixFormat::unsigned(8, 7).unwrap()).unwrap();
        assert!(matches!(
            infer(&p, &wrong),
            Err(EngineError::InputFormat { .. })
        ));
    }
}
