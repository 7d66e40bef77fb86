//! Parameter and FLOP accounting.
//!
//! FLOPs count two per multiply-accumulate. Per slice:
//!
//! | layer             | FLOPs                                   |
//! |-------------------|-----------------------------------------|
//! | conv k×k          | 2·cin·cout·k²·H·W                       |
//! | instance norm     | 6 per output element                    |
//! | transposed conv   | 2·cin·cout·4·H_in·W_in + cout·H·W bias  |
//! | head 1×1 conv     | 2·cin·4·H·W + 4·H·W bias                |
//! | max pool 2×2      | 3 comparisons per output element        |
//!
//! ReLU, dropout and the output softmax are not counted. Pooling the members
//! of one frame of `V = D·H·W` voxels costs `8·N·V` for the weighted sum
//! plus, in uncertainty mode, `4·N·V` for the depth mean, `12·N·H·W` for the
//! class variance and `3·N·H·W` for the member softmax.

use serde::Serialize;

use crate::ensemble::EnsembleMode;
use crate::error::Result;
use crate::nn::{layer_shapes, ClassifierSpec, LayerKind};
use crate::volume::{Shape3, NUM_CLASSES};

const NORM_FLOPS_PER_ELEMENT: u64 = 6;
const MAXPOOL_FLOPS_PER_ELEMENT: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MemberCost {
    pub arch: String,
    pub seed: u64,
    pub params: usize,
    /// One forward pass over every slice of the frame.
    pub flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub frame_shape: [usize; 3],
    pub mode: String,
    pub members: Vec<MemberCost>,
    pub pooling_flops: u64,
    pub total_params: usize,
    pub total_flops: u64,
}

/// FLOPs of one slice through `spec`.
pub fn slice_flops(spec: &ClassifierSpec, h: usize, w: usize) -> u64 {
    layer_shapes(spec, h, w)
        .iter()
        .map(|l| {
            let macs = 2 * l.macs() as u64;
            let out = l.outputs() as u64;
            match l.kind {
                LayerKind::ConvBlock => macs + NORM_FLOPS_PER_ELEMENT * out,
                LayerKind::UpConv | LayerKind::Head => macs + out,
                LayerKind::MaxPool => MAXPOOL_FLOPS_PER_ELEMENT * out,
            }
        })
        .sum()
}

/// FLOPs of pooling `members` outputs of one frame.
pub fn pooling_flops(members: usize, mode: EnsembleMode, frame: Shape3) -> u64 {
    let n = members as u64;
    let v = frame.len() as u64;
    let hw = frame.slice_len() as u64;
    let weighted_sum = 2 * n * NUM_CLASSES as u64 * v;
    match mode {
        EnsembleMode::Uncertainty => weighted_sum + 4 * n * v + 12 * n * hw + 3 * n * hw,
        _ => weighted_sum,
    }
}

pub fn cost_report(members: &[ClassifierSpec], mode: EnsembleMode, frame: Shape3) -> Result<CostReport> {
    let mut costs = Vec::with_capacity(members.len());
    for spec in members {
        spec.validate()?;
        let params = layer_shapes(spec, frame.height, frame.width).iter().map(|l| l.params()).sum();
        costs.push(MemberCost {
            arch: spec.arch.name().to_string(),
            seed: spec.seed,
            params,
            flops: frame.depth as u64 * slice_flops(spec, frame.height, frame.width),
        });
    }
    let pool = pooling_flops(members.len(), mode, frame);
    Ok(CostReport {
        frame_shape: [frame.depth, frame.height, frame.width],
        mode: mode.name().to_string(),
        total_params: costs.iter().map(|c| c.params).sum(),
        total_flops: costs.iter().map(|c| c.flops).sum::<u64>() + pool,
        members: costs,
        pooling_flops: pool,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Convolution weights of unet_lite with base `b`, three levels and
    /// bottleneck `8b`, written out per layer.
    fn unet_conv_weights(b: usize) -> usize {
        let enc = (1 * b + b * b) * 9 + (b * 2 * b + 4 * b * b) * 9 + (2 * b * 4 * b + 16 * b * b) * 9;
        let mid = (4 * b * 8 * b + 64 * b * b) * 9;
        let up = (8 * b * 4 * b + 4 * b * 2 * b + 2 * b * b) * 4;
        let dec = (8 * b * 4 * b + 16 * b * b) * 9 + (4 * b * 2 * b + 4 * b * b) * 9 + (2 * b * b + b * b) * 9;
        enc + mid + up + dec + b * 4
    }

    fn conv_weights(spec: &ClassifierSpec) -> usize {
        layer_shapes(spec, 64, 64).iter().filter(|l| l.kind != LayerKind::MaxPool).map(|l| l.cin * l.cout * l.kernel * l.kernel).sum()
    }

    #[test]
    fn doubling_base_about_quadruples_weights() {
        let spec = |b| ClassifierSpec { base_channels: b, bottleneck_channels: 8 * b, ..ClassifierSpec::unet_lite(0) };
        assert_eq!(conv_weights(&spec(8)), unet_conv_weights(8));
        assert_eq!(conv_weights(&spec(16)), unet_conv_weights(16));
        assert_eq!(unet_conv_weights(8), 120_296);
        assert_eq!(unet_conv_weights(16), 480_976);
        let ratio = unet_conv_weights(16) as f64 / unet_conv_weights(8) as f64;
        assert!((ratio - 4.0).abs() < 0.01);
    }

    #[test]
    fn totals_are_member_sums() {
        let frame = Shape3::new(10, 64, 64);
        let specs = vec![ClassifierSpec::unet_lite(0), ClassifierSpec::dilated_lite(1)];
        let r = cost_report(&specs, EnsembleMode::Fixed, frame).unwrap();
        assert_eq!(r.total_params, r.members.iter().map(|m| m.params).sum::<usize>());
        assert_eq!(r.total_flops, r.members.iter().map(|m| m.flops).sum::<u64>() + r.pooling_flops);
        let one = cost_report(&specs[..1], EnsembleMode::Fixed, frame).unwrap();
        assert_eq!(one.total_params, one.members[0].params);
    }

    #[test]
    fn pooling_is_linear_in_members() {
        let frame = Shape3::new(10, 64, 64);
        for mode in [EnsembleMode::Fixed, EnsembleMode::Uncertainty] {
            let one = pooling_flops(1, mode, frame);
            for n in 2..=4 {
                assert_eq!(pooling_flops(n, mode, frame), n as u64 * one);
            }
        }
    }

    #[test]
    fn head_flops_hand_count() {
        // head on 64×64 from 8 channels: 2·8·4·4096 + 4·4096
        let l = layer_shapes(&ClassifierSpec::unet_lite(0), 64, 64).pop().unwrap();
        assert_eq!(2 * l.macs() + l.outputs(), 2 * 8 * 4 * 4096 + 4 * 4096);
    }
}
