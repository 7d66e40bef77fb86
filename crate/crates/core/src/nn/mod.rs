//! Encoder–decoder slice classifiers.
//!
//! Two architectures share one encoder and decoder:
//!
//! * `unet_lite`: `depth_levels` encoder stages of two conv3×3–norm–ReLU
//!   blocks followed by 2×2 max pooling, a two-block bottleneck, and a
//!   mirrored decoder (transposed 2×2 conv, skip concatenation, two blocks).
//! * `dilated_lite`: the bottleneck is replaced by three parallel dilated
//!   conv3×3 branches (rates 1, 2, 4) fused by a 1×1 block.
//!
//! Dropout sits on the bottleneck output, between encoder and decoder. A
//! final 1×1 conv maps to four logits and a channel softmax yields per-pixel
//! class probabilities.

pub mod checkpoint;
pub(crate) mod layers;
mod model;
mod shapes;

pub use layers::FeatureMap;
pub use model::{forward_slice, forward_slice_cached, forward_volume, SliceTape};
pub use shapes::{layer_shapes, LayerKind, LayerShape};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::NUM_CLASSES;

/// Largest allowed bottleneck width.
pub const MAX_BOTTLENECK_CHANNELS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    UnetLite,
    DilatedLite,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::UnetLite => "unet_lite",
            Arch::DilatedLite => "dilated_lite",
        }
    }
}

/// Dilation rates of the `dilated_lite` bottleneck branches.
pub const DILATION_RATES: [usize; 3] = [1, 2, 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierSpec {
    pub arch: Arch,
    #[serde(default = "defaults::base_channels")]
    pub base_channels: usize,
    #[serde(default = "defaults::depth_levels")]
    pub depth_levels: usize,
    #[serde(default = "defaults::bottleneck_channels")]
    pub bottleneck_channels: usize,
    #[serde(default = "defaults::dropout_p")]
    pub dropout_p: f64,
    #[serde(default)]
    pub seed: u64,
}

mod defaults {
    pub fn base_channels() -> usize {
        8
    }
    pub fn depth_levels() -> usize {
        3
    }
    pub fn bottleneck_channels() -> usize {
        64
    }
    pub fn dropout_p() -> f64 {
        0.5
    }
}

impl ClassifierSpec {
    pub fn unet_lite(seed: u64) -> Self {
        ClassifierSpec {
            arch: Arch::UnetLite,
            base_channels: defaults::base_channels(),
            depth_levels: defaults::depth_levels(),
            bottleneck_channels: defaults::bottleneck_channels(),
            dropout_p: defaults::dropout_p(),
            seed,
        }
    }

    pub fn dilated_lite(seed: u64) -> Self {
        ClassifierSpec { arch: Arch::DilatedLite, ..Self::unet_lite(seed) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.depth_levels == 0 || self.bottleneck_channels == 0 {
            return Err(Error::config("classifier channels and levels must be positive"));
        }
        if self.bottleneck_channels > MAX_BOTTLENECK_CHANNELS {
            return Err(Error::config(format!(
                "bottleneck_channels {} exceeds {MAX_BOTTLENECK_CHANNELS}",
                self.bottleneck_channels
            )));
        }
        if self.level_channels(self.depth_levels - 1) > MAX_BOTTLENECK_CHANNELS {
            return Err(Error::config("encoder width exceeds the bottleneck cap"));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::config(format!("dropout_p {} outside [0, 1)", self.dropout_p)));
        }
        Ok(())
    }

    /// Channels of encoder/decoder stage `level` (`base · 2^level`).
    pub fn level_channels(&self, level: usize) -> usize {
        self.base_channels << level
    }

    /// Slices must have height and width divisible by this.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth_levels
    }
}

/// One named parameter array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// How a tensor is initialized.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum Init {
    /// Normal with std `sqrt(gain / fan_in)`.
    Normal { fan_in: usize, gain: f64 },
    Ones,
    Zeros,
}

/// Parameter store Θ of one classifier, in a fixed order.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    pub spec: ClassifierSpec,
    pub tensors: Vec<ParamTensor>,
}

impl ClassifierParams {
    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Same layout with every value zero.
    pub fn zeros_like(&self) -> ClassifierParams {
        let tensors = self
            .tensors
            .iter()
            .map(|t| ParamTensor { name: t.name.clone(), shape: t.shape.clone(), data: vec![0.0; t.data.len()] })
            .collect();
        ClassifierParams { spec: self.spec.clone(), tensors }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Flat view `(tensor index, element index)` → value, for gradient checks.
    pub fn value(&self, tensor: usize, element: usize) -> f64 {
        self.tensors[tensor].data[element]
    }
}

/// Gradient buffers with the same layout as [`ClassifierParams`].
pub type ParamGrads = Vec<Vec<f64>>;

pub fn zero_grads(params: &ClassifierParams) -> ParamGrads {
    params.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect()
}

/// Deterministically initializes parameters from `spec.seed`.
pub fn init_classifier(spec: &ClassifierSpec) -> Result<ClassifierParams> {
    spec.validate()?;
    let topo = model::Topology::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let tensors = topo
        .layout
        .iter()
        .map(|entry| {
            let len: usize = entry.shape.iter().product();
            let data = match entry.init {
                Init::Normal { fan_in, gain } => {
                    let normal = Normal::new(0.0, (gain / fan_in as f64).sqrt()).expect("positive std");
                    (0..len).map(|_| normal.sample(&mut rng)).collect()
                }
                Init::Ones => vec![1.0; len],
                Init::Zeros => vec![0.0; len],
            };
            ParamTensor { name: entry.name.clone(), shape: entry.shape.clone(), data }
        })
        .collect();
    Ok(ClassifierParams { spec: spec.clone(), tensors })
}

/// Names and shapes of every parameter tensor, in storage order.
pub fn parameter_layout(spec: &ClassifierSpec) -> Vec<(String, Vec<usize>)> {
    model::Topology::new(spec).layout.into_iter().map(|e| (e.name, e.shape)).collect()
}

/// Forward mode of a classifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Deterministic inference; dropout inactive.
    Eval,
    /// Dropout active with a mask drawn from `dropout_seed`.
    Train { dropout_seed: u64 },
}

pub(crate) const OUTPUT_CHANNELS: usize = NUM_CLASSES;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic() {
        let spec = ClassifierSpec::unet_lite(42);
        assert_eq!(init_classifier(&spec).unwrap(), init_classifier(&spec).unwrap());
        let other = init_classifier(&ClassifierSpec::unet_lite(43)).unwrap();
        assert_ne!(init_classifier(&spec).unwrap(), other);
    }

    #[test]
    fn bottleneck_cap_enforced() {
        let spec = ClassifierSpec { bottleneck_channels: 512, ..ClassifierSpec::unet_lite(0) };
        assert!(matches!(init_classifier(&spec), Err(Error::Config(_))));
        let spec = ClassifierSpec { dropout_p: 1.0, ..ClassifierSpec::unet_lite(0) };
        assert!(spec.validate().is_err());
    }

    #[test]
    fn dropout_rate_is_stored() {
        let p = init_classifier(&ClassifierSpec::unet_lite(1)).unwrap();
        assert_eq!(p.spec.dropout_p, 0.5);
    }

    /// Hand count for unet_lite(base=8, levels=3, bottleneck=64).
    ///
    /// | block        | conv weights        | norm  |
    /// |--------------|---------------------|-------|
    /// | enc0         | 1·8·9 + 8·8·9       | 2·16  |
    /// | enc1         | 8·16·9 + 16·16·9    | 2·32  |
    /// | enc2         | 16·32·9 + 32·32·9   | 2·64  |
    /// | mid          | 32·64·9 + 64·64·9   | 2·128 |
    /// | dec2 up      | 64·32·4 + 32        |       |
    /// | dec2         | 64·32·9 + 32·32·9   | 2·64  |
    /// | dec1 up      | 32·16·4 + 16        |       |
    /// | dec1         | 32·16·9 + 16·16·9   | 2·32  |
    /// | dec0 up      | 16·8·4 + 8          |       |
    /// | dec0         | 16·8·9 + 8·8·9      | 2·16  |
    /// | head         | 8·4 + 4             |       |
    #[test]
    fn unet_param_count_matches_hand_count() {
        let enc = (72 + 576 + 32) + (1152 + 2304 + 64) + (4608 + 9216 + 128);
        let mid = 18432 + 36864 + 256;
        let dec = (8192 + 32) + (18432 + 9216 + 128) + (2048 + 16) + (4608 + 2304 + 64) + (512 + 8) + (1152 + 576 + 32);
        let head = 32 + 4;
        let expected = enc + mid + dec + head;
        assert_eq!(expected, 121_060);
        let p = init_classifier(&ClassifierSpec::unet_lite(0)).unwrap();
        assert_eq!(p.param_count(), expected);
        let summed: usize = parameter_layout(&p.spec).iter().map(|(_, s)| s.iter().product::<usize>()).sum();
        assert_eq!(summed, expected);
    }

    #[test]
    fn dilated_param_count_matches_hand_count() {
        // bottleneck: three 32→64 dilated branches, 192→64 fuse, four norms
        let enc = (72 + 576 + 32) + (1152 + 2304 + 64) + (4608 + 9216 + 128);
        let mid = 3 * (18432 + 128) + (192 * 64 + 128);
        let dec = (8192 + 32) + (18432 + 9216 + 128) + (2048 + 16) + (4608 + 2304 + 64) + (512 + 8) + (1152 + 576 + 32);
        let p = init_classifier(&ClassifierSpec::dilated_lite(0)).unwrap();
        assert_eq!(p.param_count(), enc + mid + dec + 36);
    }
}
