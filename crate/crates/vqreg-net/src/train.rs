//! The full training objective as a graph: warped-image SSD, soft Dice on
//! the warped mask, bending energy of the field, and the quantization
//! losses, combined with the configured weights.

use vqreg_core::losses::{LossWeights, DICE_EPS};
use vqreg_core::volume::RegistrationSample;
use vqreg_core::Scalar;
use vqreg_nn::graph::{Graph, NodeId, Shape};
use vqreg_nn::Gemm;

use crate::regnet::{RegForward, RegFrozen, RegModel};

/// A sample converted to network scalars once, reused across epochs.
#[derive(Debug, Clone)]
pub struct TrainSample<T> {
    pub dims: [usize; 3],
    pub moving: Vec<T>,
    pub fixed: Vec<T>,
    pub moving_mask: Vec<T>,
    pub fixed_mask: Vec<T>,
}

impl<T: Scalar> TrainSample<T> {
    pub fn from_sample(s: &RegistrationSample) -> Self {
        let conv = |d: &[f64]| d.iter().map(|&v| T::from_f64(v)).collect();
        Self {
            dims: s.dims(),
            moving: conv(s.moving.data()),
            fixed: conv(s.fixed.data()),
            moving_mask: conv(s.moving_mask.data()),
            fixed_mask: conv(s.fixed_mask.data()),
        }
    }
}

/// Loss nodes of one sample's forward pass.
pub struct LossNodes<T> {
    pub total: NodeId,
    pub ssd: NodeId,
    pub dice: NodeId,
    pub bending: NodeId,
    /// (vanilla, hierarchical, collaborative); `None` when disabled.
    pub quant: [Option<NodeId>; 3],
    pub forward: RegForward<T>,
}

/// Values of the loss components, read back from a built graph.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossValues {
    pub total: f64,
    pub ssd: f64,
    pub dice: f64,
    pub bending: f64,
    pub quant: [Option<f64>; 3],
}

impl LossValues {
    pub fn read<T: Gemm>(g: &Graph<T>, nodes: &LossNodes<T>) -> Self {
        Self {
            total: g.value(nodes.total)[0].to_f64(),
            ssd: g.value(nodes.ssd)[0].to_f64(),
            dice: g.value(nodes.dice)[0].to_f64(),
            bending: g.value(nodes.bending)[0].to_f64(),
            quant: nodes.quant.map(|q| q.map(|id| g.value(id)[0].to_f64())),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite()
            && self.ssd.is_finite()
            && self.dice.is_finite()
            && self.bending.is_finite()
            && self.quant.iter().flatten().all(|v| v.is_finite())
    }
}

/// Build the full training loss for one sample.
pub fn training_loss<T: Gemm>(
    model: &RegModel<T>,
    g: &mut Graph<T>,
    leaves: &[NodeId],
    sample: &TrainSample<T>,
    weights: &LossWeights,
    frozen: Option<&RegFrozen<T>>,
) -> LossNodes<T> {
    let dims = sample.dims;
    let n: usize = dims.iter().product();
    let fwd = model.forward(
        g,
        leaves,
        &sample.moving,
        &sample.fixed,
        T::from_f64(weights.beta),
        frozen,
    );
    let map1 = Shape::Map { channels: 1, dims };

    // SSD: mean squared difference between warped moving and fixed
    let moving_leaf = g.leaf(sample.moving.clone(), map1.clone(), false);
    let warped = g.warp(moving_leaf, fwd.ddf);
    let fixed_leaf = g.leaf(sample.fixed.clone(), map1.clone(), false);
    let diff = g.sub(warped, fixed_leaf);
    let ssd_sum = g.dot(diff, diff);
    let ssd = g.scale(ssd_sum, T::from_f64(1.0 / n as f64));

    // soft Dice on the warped (soft) mask vs the fixed mask
    let moving_mask_leaf = g.leaf(sample.moving_mask.clone(), map1.clone(), false);
    let warped_mask = g.warp(moving_mask_leaf, fwd.ddf);
    let fixed_mask_leaf = g.leaf(sample.fixed_mask.clone(), map1, false);
    let inter = g.dot(warped_mask, fixed_mask_leaf);
    let sa = g.sum_all(warped_mask);
    let sb = g.sum_all(fixed_mask_leaf);
    let eps = T::from_f64(DICE_EPS);
    let num = g.affine(&[(inter, T::from_f64(2.0))], eps);
    let den = g.affine(&[(sa, T::ONE), (sb, T::ONE)], eps);
    let frac = g.div(num, den);
    let dice = g.scale(frac, T::from_f64(-1.0));

    let bending = g.bending(fwd.ddf);

    let mut terms: Vec<(NodeId, T)> = vec![
        (ssd, T::from_f64(weights.lambda_s)),
        (dice, T::from_f64(weights.lambda_d)),
        (bending, T::from_f64(weights.lambda_b)),
    ];
    for q in fwd.quant_losses.iter().flatten() {
        terms.push((*q, T::from_f64(weights.lambda_q)));
    }
    let total = g.affine(&terms, T::ZERO);

    LossNodes { total, ssd, dice, bending, quant: fwd.quant_losses, forward: fwd }
}
