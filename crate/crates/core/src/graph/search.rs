//! Fractional-length assignment by calibration loss.
//!
//! Coordinate descent: sweeps over the layers in topological order, first
//! the layer's input FL, then its weight FL, each chosen from the search space
//! by the cross-entropy of the simulated quantized model on a calibration
//! batch. Ties go to the larger FL. A standardized (signed) image format is
//! searched first. Sweeps repeat until one changes nothing, so an early
//! choice made against still-uncalibrated downstream formats can be revisited.
//! Chosen formats are pinned.

use rayon::prelude::*;

use crate::fixnum::FixFormat;
use crate::tensor::cross_entropy;
use crate::Real;

use super::fusion::QuantMode;
use super::sim::simulate;
use super::{GraphError, ModelGraph, NodeId};

/// Upper bound on coordinate sweeps; the loss is non-increasing, so this
/// only guards against long plateaus.
const MAX_SWEEPS: usize = 6;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SearchSpace {
    fls: Vec<u8>,
}

impl SearchSpace {
    pub fn new(mut fls: Vec<u8>) -> Result<Self, GraphError> {
        fls.sort_unstable();
        fls.dedup();
        if fls.is_empty() {
            return Err(GraphError::Config(
                "empty fractional-length search space".into(),
            ));
        }
        Ok(Self { fls })
    }

    /// `{0, …, 8}`.
    pub fn full() -> Self {
        Self {
            fls: (0..=8).collect(),
        }
    }

    pub fn range(lo: u8, hi: u8) -> Result<Self, GraphError> {
        Self::new((lo..=hi).collect())
    }

    pub fn fls(&self) -> &[u8] {
        &self.fls
    }

    fn candidates(&self, like: FixFormat) -> Vec<FixFormat> {
        self.fls
            .iter()
            .filter_map(|&fl| like.with_frac_length(fl as i32).ok())
            .collect()
    }
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self::full()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coordinate {
    Input,
    Activation(NodeId),
    Weight(NodeId),
}

#[derive(Debug, Clone, PartialEq)]
pub struct GridSearchReport {
    pub loss_before: Real,
    pub loss_after: Real,
    pub choices: Vec<(Coordinate, u8)>,
    pub evaluations: usize,
}

fn calib_loss(g: &ModelGraph, images: &[Real], labels: &[usize]) -> Result<Real, GraphError> {
    let out = simulate(g, images, QuantMode::FIXED)?;
    let (loss, _) = cross_entropy(out.logits(), labels, g.classes());
    Ok(if loss.is_finite() {
        loss
    } else {
        Real::INFINITY
    })
}

fn format_at(g: &ModelGraph, c: Coordinate) -> Result<FixFormat, GraphError> {
    Ok(match c {
        Coordinate::Input => g.input.format,
        Coordinate::Activation(id) => g.layer(id)?.act_fmt,
        Coordinate::Weight(id) => g.layer(id)?.weight_fmt,
    })
}

fn set_format(g: &mut ModelGraph, c: Coordinate, fmt: FixFormat) -> Result<(), GraphError> {
    match c {
        Coordinate::Input => {
            g.input.format = fmt;
            for id in g.layer_ids() {
                let l = g.layer_mut(id)?;
                if l.src == 0 {
                    l.act_fmt = fmt;
                }
            }
        }
        Coordinate::Activation(id) => g.layer_mut(id)?.act_fmt = fmt,
        Coordinate::Weight(id) => g.layer_mut(id)?.weight_fmt = fmt,
    }
    Ok(())
}

/// Search per-layer fractional lengths in `space`. The graph must hold
/// trained weights and BN statistics; its current formats are the start point.
pub fn grid_search_fl(
    g: &mut ModelGraph,
    images: &[Real],
    labels: &[usize],
    space: &SearchSpace,
) -> Result<GridSearchReport, GraphError> {
    if space.fls.is_empty() {
        return Err(GraphError::Config(
            "empty fractional-length search space".into(),
        ));
    }
    g.validate()?;
    g.assign_masters();
    if !g.frozen {
        g.freeze()?;
    }

    let mut coords = Vec::new();
    if g.input.normalize.is_some() {
        coords.push(Coordinate::Input);
    }
    for id in g.layer_ids() {
        if g.layer(id)?.src != 0 {
            coords.push(Coordinate::Activation(id));
        }
        coords.push(Coordinate::Weight(id));
    }

    let loss_before = calib_loss(g, images, labels)?;
    let mut best_loss = loss_before;
    let mut evaluations = 1;
    for _ in 0..MAX_SWEEPS {
        let mut changed = false;
        for &c in &coords {
            let current = format_at(g, c)?;
            let cands = space.candidates(current);
            if cands.is_empty() {
                continue;
            }
            let losses: Vec<Result<Real, GraphError>> = cands
                .par_iter()
                .map(|&f| {
                    let mut trial = g.clone();
                    set_format(&mut trial, c, f)?;
                    calib_loss(&trial, images, labels)
                })
                .collect();
            evaluations += cands.len();
            let mut best: Option<(Real, FixFormat)> = None;
            for (f, l) in cands.iter().zip(losses) {
                let l = l?;
                // candidates ascend in FL, so `<=` keeps the larger FL on ties
                if best.map_or(true, |(bl, _)| l <= bl) {
                    best = Some((l, *f));
                }
            }
            let (l, f) = best.expect("non-empty candidates");
            // a tie with the current format is not a change
            if f != current && l < best_loss {
                set_format(g, c, f)?;
                best_loss = l;
                changed = true;
            } else if !space
                .fls
                .iter()
                .any(|&fl| fl as i32 == current.frac_length() as i32)
            {
                // the start point lies outside the space: move in regardless
                set_format(g, c, f)?;
                best_loss = l;
                changed = true;
            }
        }
        if !changed {
            break;
        }
    }
    let choices = coords
        .iter()
        .map(|&c| format_at(g, c).map(|f| (c, f.frac_length())))
        .collect::<Result<Vec<_>, _>>()?;

    for id in g.layer_ids() {
        let l = g.layer_mut(id)?;
        l.act_fl_fixed = true;
        l.weight_fl_fixed = true;
    }
    g.frozen = true;
    Ok(GridSearchReport {
        loss_before,
        loss_after: best_loss,
        choices,
        evaluations,
    })
}

#[cfg(test)]
mod tests {
    use super::super::zoo;
    use super::*;

    fn batch(g: &ModelGraph, n: usize) -> (Vec<Real>, Vec<usize>) {
        let x = (0..n * g.input.shape.len())
            .map(|i| ((i * 97 + 5) % 256) as Real / 256.0)
            .collect();
        (x, (0..n).map(|i| i % g.classes()).collect())
    }

    #[test]
    fn empty_space_is_rejected() {
        assert!(matches!(
            SearchSpace::new(vec![]),
            Err(GraphError::Config(_))
        ));
    }

    #[test]
    fn single_layer_matches_brute_force() {
        let mut g =
            super::super::ModelGraph::new(super::super::InputSpec::unsigned_image(zoo::IMAGE), 8);
        let w: Vec<Real> = (0..640)
            .map(|i| (((i * 31) % 17) as Real - 8.0) * 0.05)
            .collect();
        let out = g
            .push_layer(
                "head",
                0,
                super::super::LayerOp::Linear { out_features: 10 },
                w,
                super::super::BatchNorm::bias_only(10),
            )
            .unwrap();
        g.output = out;
        let (x, y) = batch(&g, 64);
        let mut brute = (Real::INFINITY, 0);
        for fl in 0..=7u8 {
            let mut t = g.clone();
            t.freeze().unwrap();
            t.layer_mut(out).unwrap().weight_fmt = FixFormat::signed(8, fl as i32).unwrap();
            let l = calib_loss(&t, &x, &y).unwrap();
            if l <= brute.0 {
                brute = (l, fl);
            }
        }
        let rep = grid_search_fl(&mut g, &x, &y, &SearchSpace::full()).unwrap();
        assert_eq!(g.layer(out).unwrap().weight_fmt.frac_length(), brute.1);
        assert_eq!(rep.loss_after, brute.0);
    }

    #[test]
    fn search_never_increases_loss_and_pins_formats() {
        let mut g = zoo::residual_cnn(2).unwrap();
        let mut r = g.clone();
        let (x, y) = batch(&g, 32);
        // the start point is in the full space, so each coordinate step can only help
        let rep = grid_search_fl(&mut g, &x, &y, &SearchSpace::full()).unwrap();
        assert!(rep.loss_after <= rep.loss_before);
        assert_eq!(rep.loss_after, calib_loss(&g, &x, &y).unwrap());
        grid_search_fl(&mut r, &x, &y, &SearchSpace::range(6, 8).unwrap()).unwrap();
        for (_, l) in r.layers() {
            assert!(l.act_fl_fixed && l.weight_fl_fixed);
            assert!(l.weight_fmt.frac_length() >= 6);
        }
    }

    #[test]
    fn result_is_a_coordinate_wise_optimum() {
        let mut g = zoo::mlp(4).unwrap();
        let (x, y) = batch(&g, 32);
        let space = SearchSpace::range(3, 8).unwrap();
        let rep = grid_search_fl(&mut g, &x, &y, &space).unwrap();
        for &(c, _) in &rep.choices {
            for f in space.candidates(format_at(&g, c).unwrap()) {
                let mut t = g.clone();
                set_format(&mut t, c, f).unwrap();
                assert!(
                    calib_loss(&t, &x, &y).unwrap() >= rep.loss_after,
                    "{c:?} -> {f}"
                );
            }
        }
    }
}
