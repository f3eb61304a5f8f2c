//! Binary containers. All integers and floats are little-endian.
//!
//! Model file (`FXQMODEL`, version 1):
//!
//! ```text
//! magic[8] "FXQMODEL"   version u32
//! word_length u8  act_momentum f64  frozen u8
//! input: c u32 h u32 w u32  format fmt  has_norm u8  mean f64  std f64
//! output u32  node_count u32
//! node*: name str  kind u8 (0 input, 1 layer, 2 add)
//!   layer: op u8 (0 conv, 1 linear)  out u32 kernel u32 stride u32 padding u32
//!          src u32  weight vec<f64>
//!          bn: enabled u8 momentum f64 eps f64 gamma vec<f64> beta vec<f64>
//!              running_mean vec<f64> running_var vec<f64>
//!          alpha f64 clip_scale f64  act_fmt fmt  weight_fmt fmt  act_sigma f64
//!          master u32 (0xFFFFFFFF = none)  act_fl_fixed u8  weight_fl_fixed u8
//!   add:   lhs u32 rhs u32
//! fmt = word_length u8, frac_length u8, signed u8
//! str = len u32, UTF-8 bytes;  vec<T> = len u64, elements
//! ```
//!
//! Program file (`FXQPROG\0`, version 1): after magic and version, a sequence
//! of sections `tag u8, dtype u8, byte_len u64, payload`. Dtype codes:
//! 0 = u8, 1 = i8, 2 = i32, 3 = u32, 4 = f32, 5 = f64 (never emitted).
//!
//! ```text
//! tag 1 HEADER u32[8]: in_c in_h in_w in_wl in_fl in_signed output node_count
//! then per node: tag 2 NAME u8[], followed by one of
//!   tag 3 INPUT  u32[0]
//!   tag 4 LAYER  u32[15]: src in_c in_h in_w out_c out_h out_w kernel stride
//!                         padding w_wl w_fl in_wl in_fl in_signed
//!                then tag 5 WEIGHTS i8[], tag 6 BIAS i32[]
//!   tag 7 ADD    u32[2]: lhs rhs
//! ```
//!
//! Tensor file (`FXQT`, version 1):
//!
//! ```text
//! magic[4] "FXQT"  version u32  dtype u8  word_length u8  frac_length u8
//! signed u8  rank u32  dims u64[rank]  data (dtype, row-major)
//! ```

use std::io::{Read, Write};

use thiserror::Error;

use crate::engine::{EngineError, LayerProgram, ProgramNode, ProgramOp, QuantProgram};
use crate::fixnum::{FixError, FixFormat, FixTensor, Signedness};
use crate::graph::{
    BatchNorm, ConvBNLayer, GraphError, InputSpec, LayerOp, ModelGraph, Node, NodeKind,
};
use crate::pact::{ClipParam, PactError};
use crate::tensor::{ConvGeom, Shape};

pub const MODEL_MAGIC: &[u8; 8] = b"FXQMODEL";
pub const PROGRAM_MAGIC: &[u8; 8] = b"FXQPROG\0";
pub const TENSOR_MAGIC: &[u8; 4] = b"FXQT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a {0} file (bad magic)")]
    BadMagic(&'static str),
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("malformed file: {0}")]
    Malformed(String),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Engine(#[from] EngineError),
    #[error(transparent)]
    Fix(#[from] FixError),
    #[error(transparent)]
    Pact(#[from] PactError),
}

fn malformed<T>(m: impl Into<String>) -> Result<T, IoError> {
    Err(IoError::Malformed(m.into()))
}

#[derive(Default)]
struct Out(Vec<u8>);

impl Out {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u32(v as u32);
    }
    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.0.extend_from_slice(s.as_bytes());
    }
    fn f64s(&mut self, v: &[f64]) {
        self.u64(v.len() as u64);
        for &x in v {
            self.f64(x);
        }
    }
    fn fmt(&mut self, f: FixFormat) {
        self.u8(f.word_length());
        self.u8(f.frac_length());
        self.bool(f.is_signed());
    }
}

struct In<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> In<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8], IoError> {
        if self.buf.len() - self.pos < n {
            return malformed("unexpected end of file");
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8, IoError> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32, IoError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64, IoError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f64(&mut self) -> Result<f64, IoError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn usize(&mut self) -> Result<usize, IoError> {
        Ok(self.u32()? as usize)
    }
    fn bool(&mut self) -> Result<bool, IoError> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            b => malformed(format!("bad flag byte {b}")),
        }
    }
    fn len(&mut self, elem: usize) -> Result<usize, IoError> {
        let n = self.u64()?;
        if n.saturating_mul(elem as u64) > (self.buf.len() - self.pos) as u64 {
            return malformed("length exceeds file size");
        }
        Ok(n as usize)
    }
    fn str(&mut self) -> Result<String, IoError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).or_else(|_| malformed("name is not UTF-8"))
    }
    fn f64s(&mut self) -> Result<Vec<f64>, IoError> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn fmt(&mut self) -> Result<FixFormat, IoError> {
        let (wl, fl, s) = (self.u8()?, self.u8()?, self.bool()?);
        Ok(FixFormat::new(
            wl,
            fl as i32,
            if s {
                Signedness::Signed
            } else {
                Signedness::Unsigned
            },
        )?)
    }
    fn magic(&mut self, m: &[u8], what: &'static str) -> Result<(), IoError> {
        if self.buf.len() < m.len() || &self.buf[..m.len()] != m {
            return Err(IoError::BadMagic(what));
        }
        self.pos = m.len();
        match self.u32()? {
            VERSION => Ok(()),
            v => Err(IoError::Version(v)),
        }
    }
    fn end(&self) -> Result<(), IoError> {
        if self.pos != self.buf.len() {
            return malformed("trailing bytes");
        }
        Ok(())
    }
}

const NO_MASTER: u32 = u32::MAX;

pub fn model_to_bytes(g: &ModelGraph) -> Vec<u8> {
    let mut o = Out::default();
    o.0.extend_from_slice(MODEL_MAGIC);
    o.u32(VERSION);
    o.u8(g.word_length);
    o.f64(g.act_momentum);
    o.bool(g.frozen);
    let s = g.input.shape;
    o.usize(s.c);
    o.usize(s.h);
    o.usize(s.w);
    o.fmt(g.input.format);
    let (mean, std) = g.input.normalize.unwrap_or((0.0, 1.0));
    o.bool(g.input.normalize.is_some());
    o.f64(mean);
    o.f64(std);
    o.usize(g.output);
    o.usize(g.nodes.len());
    for n in &g.nodes {
        o.str(&n.name);
        match &n.kind {
            NodeKind::Input => o.u8(0),
            NodeKind::Layer(l) => {
                o.u8(1);
                match l.op {
                    LayerOp::Conv2d {
                        out_channels,
                        kernel,
                        stride,
                        padding,
                    } => {
                        o.u8(0);
                        o.usize(out_channels);
                        o.usize(kernel);
                        o.usize(stride);
                        o.usize(padding);
                    }
                    LayerOp::Linear { out_features } => {
                        o.u8(1);
                        o.usize(out_features);
                        o.usize(1);
                        o.usize(1);
                        o.usize(0);
                    }
                }
                o.usize(l.src);
                o.f64s(&l.weight);
                o.bool(l.bn.enabled);
                o.f64(l.bn.momentum);
                o.f64(l.bn.eps);
                o.f64s(&l.bn.gamma);
                o.f64s(&l.bn.beta);
                o.f64s(&l.bn.running_mean);
                o.f64s(&l.bn.running_var);
                o.f64(l.clip.alpha());
                o.f64(l.clip.scale());
                o.fmt(l.act_fmt);
                o.fmt(l.weight_fmt);
                o.f64(l.act_sigma);
                o.u32(l.master.map_or(NO_MASTER, |m| m as u32));
                o.bool(l.act_fl_fixed);
                o.bool(l.weight_fl_fixed);
            }
            NodeKind::Add { lhs, rhs } => {
                o.u8(2);
                o.usize(*lhs);
                o.usize(*rhs);
            }
        }
    }
    o.0
}

pub fn model_from_bytes(buf: &[u8]) -> Result<ModelGraph, IoError> {
    let mut r = In::new(buf);
    r.magic(MODEL_MAGIC, "model")?;
    let word_length = r.u8()?;
    let act_momentum = r.f64()?;
    let frozen = r.bool()?;
    let shape = Shape::new(r.usize()?, r.usize()?, r.usize()?);
    let format = r.fmt()?;
    let has_norm = r.bool()?;
    let (mean, std) = (r.f64()?, r.f64()?);
    let input = InputSpec {
        shape,
        format,
        normalize: has_norm.then_some((mean, std)),
    };
    let output = r.usize()?;
    let count = r.usize()?;
    let mut nodes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = r.str()?;
        let kind = match r.u8()? {
            0 => NodeKind::Input,
            1 => {
                let op_code = r.u8()?;
                let (out, kernel, stride, padding) =
                    (r.usize()?, r.usize()?, r.usize()?, r.usize()?);
                let op = match op_code {
                    0 => LayerOp::Conv2d {
                        out_channels: out,
                        kernel,
                        stride,
                        padding,
                    },
                    1 => LayerOp::Linear { out_features: out },
                    c => return malformed(format!("unknown layer op {c}")),
                };
                let src = r.usize()?;
                let weight = r.f64s()?;
                let bn = BatchNorm {
                    enabled: r.bool()?,
                    momentum: r.f64()?,
                    eps: r.f64()?,
                    gamma: r.f64s()?,
                    beta: r.f64s()?,
                    running_mean: r.f64s()?,
                    running_var: r.f64s()?,
                };
                let (alpha, scale) = (r.f64()?, r.f64()?);
                let clip = ClipParam::with_scale(alpha, scale)?;
                let act_fmt = r.fmt()?;
                let weight_fmt = r.fmt()?;
                let act_sigma = r.f64()?;
                let master = match r.u32()? {
                    NO_MASTER => None,
                    m => Some(m as usize),
                };
                NodeKind::Layer(ConvBNLayer {
                    op,
                    src,
                    weight,
                    bn,
                    clip,
                    act_fmt,
                    weight_fmt,
                    act_sigma,
                    master,
                    act_fl_fixed: r.bool()?,
                    weight_fl_fixed: r.bool()?,
                })
            }
            2 => NodeKind::Add {
                lhs: r.usize()?,
                rhs: r.usize()?,
            },
            k => return malformed(format!("unknown node kind {k}")),
        };
        nodes.push(Node { name, kind });
    }
    r.end()?;
    let g = ModelGraph {
        input,
        nodes,
        output,
        word_length,
        act_momentum,
        frozen,
    };
    g.validate()?;
    g.check_masters()?;
    Ok(g)
}

pub fn write_model<W: Write>(g: &ModelGraph, mut w: W) -> Result<(), IoError> {
    w.write_all(&model_to_bytes(g))?;
    Ok(())
}

pub fn read_model<R: Read>(mut r: R) -> Result<ModelGraph, IoError> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    model_from_bytes(&buf)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    U8 = 0,
    I8 = 1,
    I32 = 2,
    U32 = 3,
    F32 = 4,
    F64 = 5,
}

impl DType {
    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => Self::U8,
            1 => Self::I8,
            2 => Self::I32,
            3 => Self::U32,
            4 => Self::F32,
            5 => Self::F64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            Self::U8 | Self::I8 => 1,
            Self::I32 | Self::U32 | Self::F32 => 4,
            Self::F64 => 8,
        }
    }

    pub fn is_float(self) -> bool {
        matches!(self, Self::F32 | Self::F64)
    }
}

mod tag {
    pub const HEADER: u8 = 1;
    pub const NAME: u8 = 2;
    pub const INPUT: u8 = 3;
    pub const LAYER: u8 = 4;
    pub const WEIGHTS: u8 = 5;
    pub const BIAS: u8 = 6;
    pub const ADD: u8 = 7;
}

/// One raw section of a program file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Section {
    pub tag: u8,
    pub dtype: DType,
    pub payload: Vec<u8>,
}

fn section(o: &mut Out, tag: u8, dtype: DType, payload: &[u8]) {
    o.u8(tag);
    o.u8(dtype as u8);
    o.u64(payload.len() as u64);
    o.0.extend_from_slice(payload);
}

fn u32s(v: &[u32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn fmt_u32(f: FixFormat) -> [u32; 3] {
    [
        f.word_length() as u32,
        f.frac_length() as u32,
        f.is_signed() as u32,
    ]
}

pub fn program_to_bytes(p: &QuantProgram) -> Vec<u8> {
    let mut o = Out::default();
    o.0.extend_from_slice(PROGRAM_MAGIC);
    o.u32(VERSION);
    let s = p.input_shape;
    let [iw, ifl, isg] = fmt_u32(p.input_fmt);
    let header = [
        s.c as u32,
        s.h as u32,
        s.w as u32,
        iw,
        ifl,
        isg,
        p.output as u32,
        p.nodes.len() as u32,
    ];
    section(&mut o, tag::HEADER, DType::U32, &u32s(&header));
    for n in &p.nodes {
        section(&mut o, tag::NAME, DType::U8, n.name.as_bytes());
        match &n.op {
            ProgramOp::Input => section(&mut o, tag::INPUT, DType::U32, &[]),
            ProgramOp::Layer(l) => {
                let g = l.geom;
                let [ww, wfl, _] = fmt_u32(l.weight_fmt);
                let [aw, afl, asg] = fmt_u32(l.in_fmt);
                let meta = [
                    l.src as u32,
                    g.input.c as u32,
                    g.input.h as u32,
                    g.input.w as u32,
                    g.output.c as u32,
                    g.output.h as u32,
                    g.output.w as u32,
                    g.kernel as u32,
                    g.stride as u32,
                    g.padding as u32,
                    ww,
                    wfl,
                    aw,
                    afl,
                    asg,
                ];
                section(&mut o, tag::LAYER, DType::U32, &u32s(&meta));
                let w: Vec<u8> = l.weight.iter().map(|&v| v as u8).collect();
                section(&mut o, tag::WEIGHTS, DType::I8, &w);
                let b: Vec<u8> = l.bias.iter().flat_map(|v| v.to_le_bytes()).collect();
                section(&mut o, tag::BIAS, DType::I32, &b);
            }
            ProgramOp::Add { lhs, rhs } => section(
                &mut o,
                tag::ADD,
                DType::U32,
                &u32s(&[*lhs as u32, *rhs as u32]),
            ),
        }
    }
    o.0
}

/// Split a program file into its sections without interpreting them.
pub fn program_sections(buf: &[u8]) -> Result<Vec<Section>, IoError> {
    let mut r = In::new(buf);
    r.magic(PROGRAM_MAGIC, "program")?;
    let mut out = Vec::new();
    while r.pos < buf.len() {
        let tag = r.u8()?;
        let code = r.u8()?;
        let dtype = DType::from_code(code)
            .map_or_else(|| malformed(format!("unknown dtype {code}")), Ok)?;
        let n = r.u64()? as usize;
        if n > buf.len() - r.pos || n % dtype.size() != 0 {
            return malformed("section length");
        }
        out.push(Section {
            tag,
            dtype,
            payload: r.take(n)?.to_vec(),
        });
    }
    Ok(out)
}

fn as_u32s(s: &Section, tag: u8, n: usize) -> Result<Vec<u32>, IoError> {
    if s.tag != tag || s.dtype != DType::U32 || s.payload.len() != 4 * n {
        return malformed(format!(
            "expected section {tag} with {n} u32 values, found tag {}",
            s.tag
        ));
    }
    Ok(s.payload
        .chunks(4)
        .map(|c| u32::from_le_bytes(c.try_into().expect("4")))
        .collect())
}

fn fmt_from(wl: u32, fl: u32, signed: u32) -> Result<FixFormat, IoError> {
    let s = match signed {
        0 => Signedness::Unsigned,
        1 => Signedness::Signed,
        _ => return malformed("bad signedness"),
    };
    Ok(FixFormat::new(wl.min(255) as u8, fl.min(255) as i32, s)?)
}

pub fn program_from_bytes(buf: &[u8]) -> Result<QuantProgram, IoError> {
    let secs = program_sections(buf)?;
    if let Some(s) = secs.iter().find(|s| s.dtype.is_float()) {
        return malformed(format!(
            "float section (tag {}) in an integer program",
            s.tag
        ));
    }
    let mut it = secs.into_iter();
    let mut next = || it.next().map_or_else(|| malformed("missing section"), Ok);
    let h = as_u32s(&next()?, tag::HEADER, 8)?;
    let input_shape = Shape::new(h[0] as usize, h[1] as usize, h[2] as usize);
    let input_fmt = fmt_from(h[3], h[4], h[5])?;
    let (output, count) = (h[6] as usize, h[7] as usize);
    let mut nodes = Vec::new();
    for _ in 0..count {
        let name_sec = next()?;
        if name_sec.tag != tag::NAME || name_sec.dtype != DType::U8 {
            return malformed("expected node name");
        }
        let name =
            String::from_utf8(name_sec.payload).or_else(|_| malformed("name is not UTF-8"))?;
        let s = next()?;
        let op = match s.tag {
            tag::INPUT => ProgramOp::Input,
            tag::ADD => {
                let v = as_u32s(&s, tag::ADD, 2)?;
                ProgramOp::Add {
                    lhs: v[0] as usize,
                    rhs: v[1] as usize,
                }
            }
            tag::LAYER => {
                let m = as_u32s(&s, tag::LAYER, 15)?;
                let u = |i: usize| m[i] as usize;
                let geom = ConvGeom {
                    input: Shape::new(u(1), u(2), u(3)),
                    output: Shape::new(u(4), u(5), u(6)),
                    kernel: u(7),
                    stride: u(8),
                    padding: u(9),
                };
                let weight_fmt = fmt_from(m[10], m[11], 1)?;
                let in_fmt = fmt_from(m[12], m[13], m[14])?;
                let w = next()?;
                if w.tag != tag::WEIGHTS || w.dtype != DType::I8 {
                    return malformed("expected weights");
                }
                let b = next()?;
                if b.tag != tag::BIAS || b.dtype != DType::I32 {
                    return malformed("expected bias");
                }
                ProgramOp::Layer(LayerProgram {
                    src: u(0),
                    geom,
                    weight: w.payload.iter().map(|&v| v as i8).collect(),
                    weight_fmt,
                    bias: b
                        .payload
                        .chunks(4)
                        .map(|c| i32::from_le_bytes(c.try_into().expect("4")))
                        .collect(),
                    in_fmt,
                })
            }
            t => return malformed(format!("unexpected section tag {t}")),
        };
        nodes.push(ProgramNode { name, op });
    }
    if next().is_ok() {
        return malformed("trailing sections");
    }
    let p = QuantProgram {
        input_shape,
        input_fmt,
        nodes,
        output,
        warnings: Vec::new(),
    };
    p.validate()?;
    Ok(p)
}

fn tensor_dtype(fmt: FixFormat) -> Result<DType, IoError> {
    Ok(match (fmt.word_length(), fmt.is_signed()) {
        (1..=8, false) => DType::U8,
        (1..=8, true) => DType::I8,
        (9..=32, _) => DType::I32,
        (wl, _) => return malformed(format!("no tensor dtype for WL={wl}")),
    })
}

pub fn tensor_to_bytes(t: &FixTensor) -> Result<Vec<u8>, IoError> {
    let fmt = t.format();
    let dtype = tensor_dtype(fmt)?;
    let mut o = Out::default();
    o.0.extend_from_slice(TENSOR_MAGIC);
    o.u32(VERSION);
    o.u8(dtype as u8);
    o.fmt(fmt);
    o.u32(t.shape().len() as u32);
    for &d in t.shape() {
        o.u64(d as u64);
    }
    for &m in t.mantissas() {
        match dtype {
            DType::U8 => o.u8(m as u8),
            DType::I8 => o.u8(m as i8 as u8),
            _ => o.0.extend_from_slice(&(m as i32).to_le_bytes()),
        }
    }
    Ok(o.0)
}

pub fn tensor_from_bytes(buf: &[u8]) -> Result<FixTensor, IoError> {
    let mut r = In::new(buf);
    r.magic(TENSOR_MAGIC, "tensor")?;
    let code = r.u8()?;
    let dtype =
        DType::from_code(code).map_or_else(|| malformed(format!("unknown dtype {code}")), Ok)?;
    let fmt = r.fmt()?;
    if tensor_dtype(fmt)? != dtype {
        return malformed(format!("dtype {dtype:?} does not match format {fmt}"));
    }
    let rank = r.u32()? as usize;
    if rank > 8 {
        return malformed("rank above 8");
    }
    let shape: Vec<usize> = (0..rank)
        .map(|_| r.u64().map(|d| d as usize))
        .collect::<Result<_, _>>()?;
    let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    let n = match n {
        Some(n) if n.saturating_mul(dtype.size()) == buf.len() - r.pos => n,
        _ => return malformed("data size does not match the shape"),
    };
    let mut m = Vec::with_capacity(n);
    for _ in 0..n {
        m.push(match dtype {
            DType::U8 => r.u8()? as i64,
            DType::I8 => r.u8()? as i8 as i64,
            _ => i32::from_le_bytes(r.take(4)?.try_into().expect("4")) as i64,
        });
    }
    r.end()?;
    Ok(FixTensor::new(m, shape, fmt)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::compile;
    use crate::graph::zoo;

    #[test]
    fn model_round_trip_is_bit_exact() {
        for name in zoo::ARCHITECTURES {
            let mut g = zoo::by_name(name, 7).unwrap();
            g.layer_mut(1).unwrap().clip.set_alpha(3.25).unwrap();
            g.freeze().unwrap();
            let bytes = model_to_bytes(&g);
            let back = model_from_bytes(&bytes).unwrap();
            assert_eq!(back, g);
            assert_eq!(model_to_bytes(&back), bytes);
        }
    }

    #[test]
    fn program_has_no_float_sections_and_round_trips() {
        let mut g = zoo::residual_cnn(1).unwrap();
        g.freeze().unwrap();
        let p = compile(&g).unwrap();
        let bytes = program_to_bytes(&p);
        assert!(program_sections(&bytes)
            .unwrap()
            .iter()
            .all(|s| !s.dtype.is_float()));
        assert_eq!(program_from_bytes(&bytes).unwrap(), p);
        assert_eq!(program_to_bytes(&compile(&g).unwrap()), bytes);
    }

    #[test]
    fn float_section_is_rejected() {
        let mut g = zoo::mlp(1).unwrap();
        g.freeze().unwrap();
        let mut bytes = program_to_bytes(&compile(&g).unwrap());
        let mut o = Out::default();
        section(&mut o, 9, DType::F64, &1.0f64.to_le_bytes());
        bytes.extend_from_slice(&o.0);
        assert!(matches!(
            program_from_bytes(&bytes),
            Err(IoError::Malformed(_))
        ));
    }

    #[test]
    fn tensor_round_trip_and_errors() {
        let fmt = FixFormat::signed(8, 3).unwrap();
        let t = FixTensor::new(vec![-127, 0, 5, 127, -1, 2], vec![2, 3], fmt).unwrap();
        let b = tensor_to_bytes(&t).unwrap();
        assert_eq!(&b[..4], TENSOR_MAGIC);
        assert_eq!(tensor_from_bytes(&b).unwrap(), t);
        assert!(matches!(
            tensor_from_bytes(&b[..b.len() - 1]),
            Err(IoError::Malformed(_))
        ));
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(tensor_from_bytes(&bad), Err(IoError::BadMagic(_))));
        let mut v = b;
        v[4] = 9;
        assert!(matches!(tensor_from_bytes(&v), Err(IoError::Version(9))));

        let acc =
            FixTensor::new(vec![-70000, 3], vec![2], FixFormat::signed(32, 12).unwrap()).unwrap();
        assert_eq!(
            tensor_from_bytes(&tensor_to_bytes(&acc).unwrap()).unwrap(),
            acc
        );
    }

    #[test]
    fn truncated_model_is_malformed() {
        let g = zoo::mlp(2).unwrap();
        let b = model_to_bytes(&g);
        for cut in [9, 40, b.len() / 2, b.len() - 1] {
            assert!(model_from_bytes(&b[..cut]).is_err());
        }
    }
}
