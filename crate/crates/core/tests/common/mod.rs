#![allow(dead_code)]

use fxq_core::graph::{BatchNorm, InputSpec, LayerOp, ModelGraph};
use fxq_core::tensor::Shape;
use fxq_core::train::calibrate;
use fxq_core::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// 8-bit pixel images in `[0, 1)`.
pub fn images(n: usize, shape: Shape, rng: &mut ChaCha8Rng) -> Vec<Real> {
    (0..n * shape.len())
        .map(|_| rng.gen_range(0..256) as Real / 256.0)
        .collect()
}

/// A frozen chain of `depth` Conv-BN layers with random geometry, weights and
/// BN statistics; clipping levels and formats come from calibration.
pub fn random_chain(seed: u64, depth: usize) -> ModelGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(rng.gen_range(1..=3), 8, 8);
    let mut g = ModelGraph::new(InputSpec::unsigned_image(shape), 8);
    let mut src = 0;
    for k in 0..depth {
        let shapes = g.shapes().unwrap();
        let out = rng.gen_range(1..=16);
        let kernel = if rng.gen_bool(0.5) { 3 } else { 1 };
        let stride = if shapes[src].h > 2 && rng.gen_bool(0.3) {
            2
        } else {
            1
        };
        let op = LayerOp::Conv2d {
            out_channels: out,
            kernel,
            stride,
            padding: kernel / 2,
        };
        let geom = op.geometry(shapes[src]).unwrap();
        let d = Normal::new(0.0, (2.0 / geom.fan_in() as Real).sqrt()).unwrap();
        let w = (0..geom.weight_len()).map(|_| d.sample(&mut rng)).collect();
        src = g
            .push_layer(&format!("conv{k}"), src, op, w, BatchNorm::new(out))
            .unwrap();
    }
    g.output = src;
    let x = images(64, shape, &mut rng);
    calibrate(&mut g, &x, true).unwrap();
    for id in g.layer_ids() {
        let bn = &mut g.layer_mut(id).unwrap().bn;
        for c in 0..bn.channels() {
            bn.gamma[c] = rng.gen_range(0.5..1.5);
            bn.beta[c] = rng.gen_range(-0.3..0.3);
            bn.running_mean[c] += rng.gen_range(-0.1..0.1);
            bn.running_var[c] *= rng.gen_range(0.8..1.25);
        }
    }
    g.freeze().unwrap();
    g
}
