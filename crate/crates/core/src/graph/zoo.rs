//! Small models for 1×8×8 unsigned images and 10 classes.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::Shape;
use crate::Real;

use super::{BatchNorm, GraphError, InputSpec, LayerOp, ModelGraph, NodeId};

pub const IMAGE: Shape = Shape::new(1, 8, 8);
pub const CLASSES: usize = 10;
pub const WORD_LENGTH: u8 = 8;

pub const ARCHITECTURES: [&str; 3] = ["mlp", "plain_cnn", "residual_cnn"];

struct Builder {
    g: ModelGraph,
    rng: ChaCha8Rng,
}

impl Builder {
    fn new(seed: u64) -> Self {
        Self {
            g: ModelGraph::new(InputSpec::unsigned_image(IMAGE), WORD_LENGTH),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn init(&mut self, n: usize, fan_in: usize, gain: Real) -> Vec<Real> {
        let d = Normal::new(0.0, (gain / fan_in as Real).sqrt()).expect("positive std");
        (0..n).map(|_| d.sample(&mut self.rng)).collect()
    }

    fn conv(
        &mut self,
        name: &str,
        src: NodeId,
        out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<NodeId, GraphError> {
        let op = LayerOp::Conv2d {
            out_channels: out,
            kernel,
            stride,
            padding: kernel / 2,
        };
        self.layer(name, src, op, BatchNorm::new(out), 2.0)
    }

    fn linear(
        &mut self,
        name: &str,
        src: NodeId,
        out: usize,
        bn: bool,
    ) -> Result<NodeId, GraphError> {
        let (bn, gain) = if bn {
            (BatchNorm::new(out), 2.0)
        } else {
            (BatchNorm::bias_only(out), 1.0)
        };
        self.layer(name, src, LayerOp::Linear { out_features: out }, bn, gain)
    }

    fn layer(
        &mut self,
        name: &str,
        src: NodeId,
        op: LayerOp,
        bn: BatchNorm,
        gain: Real,
    ) -> Result<NodeId, GraphError> {
        let shapes = self.g.shapes()?;
        let geom = op
            .geometry(shapes[src])
            .ok_or_else(|| GraphError::Invalid(format!("`{name}` does not fit its input")))?;
        let w = self.init(geom.weight_len(), geom.fan_in(), gain);
        self.g.push_layer(name, src, op, w, bn)
    }

    fn finish(mut self, output: NodeId) -> Result<ModelGraph, GraphError> {
        self.g.output = output;
        self.g.validate()?;
        self.g.assign_masters();
        Ok(self.g)
    }
}

/// 64 → 32 → 10.
pub fn mlp(seed: u64) -> Result<ModelGraph, GraphError> {
    let mut b = Builder::new(seed);
    let h = b.linear("fc1", 0, 32, true)?;
    let out = b.linear("head", h, CLASSES, false)?;
    b.finish(out)
}

/// Three 3×3 convolutions (the last two with stride 2) and a linear head.
pub fn plain_cnn(seed: u64) -> Result<ModelGraph, GraphError> {
    let mut b = Builder::new(seed);
    let c1 = b.conv("conv1", 0, 8, 3, 1)?;
    let c2 = b.conv("conv2", c1, 16, 3, 2)?;
    let c3 = b.conv("conv3", c2, 16, 3, 2)?;
    let out = b.linear("head", c3, CLASSES, false)?;
    b.finish(out)
}

/// Stem, an identity-shortcut block, a downsampling block with a 1×1 stride-2
/// shortcut, and a linear head.
pub fn residual_cnn(seed: u64) -> Result<ModelGraph, GraphError> {
    let mut b = Builder::new(seed);
    let stem = b.conv("stem", 0, 8, 3, 1)?;
    let a1 = b.conv("block1.conv1", stem, 8, 3, 1)?;
    let a2 = b.conv("block1.conv2", a1, 8, 3, 1)?;
    let sum1 = b.g.push_add("block1.add", stem, a2);
    let c1 = b.conv("block2.conv1", sum1, 16, 3, 2)?;
    let c2 = b.conv("block2.conv2", c1, 16, 3, 1)?;
    let ds = b.conv("block2.downsample", sum1, 16, 1, 2)?;
    let sum2 = b.g.push_add("block2.add", c2, ds);
    let out = b.linear("head", sum2, CLASSES, false)?;
    b.finish(out)
}

pub fn by_name(name: &str, seed: u64) -> Result<ModelGraph, GraphError> {
    match name {
        "mlp" => mlp(seed),
        "plain_cnn" => plain_cnn(seed),
        "residual_cnn" => residual_cnn(seed),
        other => Err(GraphError::Config(format!(
            "unknown architecture `{other}` (expected one of {})",
            ARCHITECTURES.join(", ")
        ))),
    }
}
