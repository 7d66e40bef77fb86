use serde::Serialize;

use super::{Arch, ClassifierSpec, DILATION_RATES, OUTPUT_CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    /// Convolution followed by instance norm and ReLU.
    ConvBlock,
    /// Transposed 2×2 stride-2 convolution with bias.
    UpConv,
    /// 1×1 output convolution with bias.
    Head,
    /// 2×2 max pooling.
    MaxPool,
}

/// One layer of a classifier applied to an `h`×`w` slice.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerShape {
    pub name: String,
    pub kind: LayerKind,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl LayerShape {
    pub fn params(&self) -> usize {
        match self.kind {
            LayerKind::ConvBlock => self.cin * self.cout * self.kernel * self.kernel + 2 * self.cout,
            LayerKind::UpConv | LayerKind::Head => self.cin * self.cout * self.kernel * self.kernel + self.cout,
            LayerKind::MaxPool => 0,
        }
    }

    /// Multiply-accumulates of the weighted layer on one slice.
    pub fn macs(&self) -> usize {
        match self.kind {
            LayerKind::ConvBlock | LayerKind::Head => self.cin * self.cout * self.kernel * self.kernel * self.out_h * self.out_w,
            // every input pixel scatters into a 2×2 output patch
            LayerKind::UpConv => self.cin * self.cout * 4 * (self.out_h / 2) * (self.out_w / 2),
            LayerKind::MaxPool => 0,
        }
    }

    pub fn outputs(&self) -> usize {
        self.cout * self.out_h * self.out_w
    }
}

/// Every layer of `spec` in execution order.
pub fn layer_shapes(spec: &ClassifierSpec, h: usize, w: usize) -> Vec<LayerShape> {
    let mut out = Vec::new();
    let mut push = |name: String, kind, cin, cout, kernel, dilation, oh, ow| {
        out.push(LayerShape { name, kind, cin, cout, kernel, dilation, out_h: oh, out_w: ow })
    };
    let levels = spec.depth_levels;
    let (mut hh, mut ww) = (h, w);
    let mut cin = 1;
    for k in 0..levels {
        let c = spec.level_channels(k);
        push(format!("enc{k}.conv0"), LayerKind::ConvBlock, cin, c, 3, 1, hh, ww);
        push(format!("enc{k}.conv1"), LayerKind::ConvBlock, c, c, 3, 1, hh, ww);
        hh /= 2;
        ww /= 2;
        push(format!("enc{k}.pool"), LayerKind::MaxPool, c, c, 2, 1, hh, ww);
        cin = c;
    }
    let b = spec.bottleneck_channels;
    match spec.arch {
        Arch::UnetLite => {
            push("mid.conv0".into(), LayerKind::ConvBlock, cin, b, 3, 1, hh, ww);
            push("mid.conv1".into(), LayerKind::ConvBlock, b, b, 3, 1, hh, ww);
        }
        Arch::DilatedLite => {
            for r in DILATION_RATES {
                push(format!("mid.branch{r}"), LayerKind::ConvBlock, cin, b, 3, r, hh, ww);
            }
            push("mid.fuse".into(), LayerKind::ConvBlock, b * DILATION_RATES.len(), b, 1, 1, hh, ww);
        }
    }
    let mut prev = b;
    for k in (0..levels).rev() {
        let c = spec.level_channels(k);
        hh *= 2;
        ww *= 2;
        push(format!("dec{k}.up"), LayerKind::UpConv, prev, c, 2, 1, hh, ww);
        push(format!("dec{k}.conv0"), LayerKind::ConvBlock, 2 * c, c, 3, 1, hh, ww);
        push(format!("dec{k}.conv1"), LayerKind::ConvBlock, c, c, 3, 1, hh, ww);
        prev = c;
    }
    push("head".into(), LayerKind::Head, prev, OUTPUT_CHANNELS, 1, 1, hh, ww);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::init_classifier;

    #[test]
    fn parameter_totals_agree_with_layout() {
        for spec in [ClassifierSpec::unet_lite(0), ClassifierSpec::dilated_lite(0)] {
            let from_shapes: usize = layer_shapes(&spec, 64, 64).iter().map(LayerShape::params).sum();
            assert_eq!(from_shapes, init_classifier(&spec).unwrap().param_count());
        }
    }

    #[test]
    fn spatial_sizes_return_to_input() {
        let layers = layer_shapes(&ClassifierSpec::unet_lite(0), 64, 48);
        let head = layers.last().unwrap();
        assert_eq!((head.out_h, head.out_w), (64, 48));
        assert_eq!(layers.iter().filter(|l| l.kind == LayerKind::MaxPool).count(), 3);
        assert_eq!(layers.iter().map(|l| l.out_h).min(), Some(8));
    }
}
