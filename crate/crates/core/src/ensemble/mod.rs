//! Ensemble pooling.
//!
//! Member classifiers each produce a [`ProbVolume`] for a frame. They are
//! combined either with fixed scalar weights or with a pixelwise weight
//! field derived from each member's per-frame uncertainty memory:
//!
//! ```text
//! μ_i  = mean over depth of ŷ_i                 (4 × H × W)
//! σ_i  = population variance of μ_i over class  (H × W)
//! ω̄_i  = exp(σ_i) / Σ_k exp(σ_k)                (H × W, Σ_i ω̄_i = 1)
//! ŷ    = softmax_class(Σ_i ω̄_i ⊙ ŷ_i)
//! ```
//!
//! The pooled output is re-normalized by a channel softmax in both modes.

mod memory;
mod pooling;
mod predict;
mod strategy;

pub use memory::{compute_memory, uncertainty_weights, PixelWeightField, UncertaintyMemory, SIGMA_MAX};
pub use pooling::{pool_backward, pool_fixed, pool_uncertainty, PoolGradient};
pub use predict::{predict_ensemble, EnsemblePrediction};
pub use strategy::{bootstrap_indices, bootstrap_seed_for, run_strategy, StrategySetup};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ClassifierSpec;
use crate::volume::{AugmentationSpec, LabelMask, Shape3, NUM_CLASSES};

/// Tolerance on `Σ ω_i = 1` for fixed weights.
pub const WEIGHT_SUM_TOL: f64 = 1e-6;

/// Per-pixel class probabilities of one frame, laid out `[D][4][H][W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVolume {
    /// Producing member; `None` for pooled outputs.
    pub classifier_id: Option<usize>,
    pub frame_id: String,
    shape: Shape3,
    data: Vec<f64>,
}

impl ProbVolume {
    pub fn new(classifier_id: usize, shape: Shape3, data: Vec<f64>) -> Result<Self> {
        Self::with_id(Some(classifier_id), shape, data)
    }

    pub(crate) fn with_id(classifier_id: Option<usize>, shape: Shape3, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() * NUM_CLASSES {
            return Err(Error::shape(format!(
                "probability volume {shape}x{NUM_CLASSES} needs {} values, got {}",
                shape.len() * NUM_CLASSES,
                data.len()
            )));
        }
        Ok(ProbVolume { classifier_id, frame_id: String::new(), shape, data })
    }

    /// Every pixel 0.25 in every class.
    pub fn uniform(shape: Shape3) -> Self {
        ProbVolume { classifier_id: None, frame_id: String::new(), shape, data: vec![0.25; shape.len() * NUM_CLASSES] }
    }

    /// One-hot encoding of a mask.
    pub fn one_hot(mask: &LabelMask) -> Self {
        let shape = mask.shape();
        let hw = shape.slice_len();
        let mut data = vec![0.0; shape.len() * NUM_CLASSES];
        for d in 0..shape.depth {
            for (p, &l) in mask.slice(d).iter().enumerate() {
                data[(d * NUM_CLASSES + l as usize) * hw + p] = 1.0;
            }
        }
        ProbVolume { classifier_id: None, frame_id: String::new(), shape, data }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// The `4 × H × W` block of slice `d`.
    pub fn slice(&self, d: usize) -> &[f64] {
        let n = NUM_CLASSES * self.shape.slice_len();
        &self.data[d * n..(d + 1) * n]
    }

    pub fn get(&self, d: usize, c: usize, y: usize, x: usize) -> f64 {
        let s = self.shape;
        self.data[((d * NUM_CLASSES + c) * s.height + y) * s.width + x]
    }

    /// Hard labels by per-pixel argmax; ties go to the lowest class index.
    pub fn argmax(&self) -> LabelMask {
        let s = self.shape;
        let hw = s.slice_len();
        let mut labels = Vec::with_capacity(s.len());
        for d in 0..s.depth {
            let block = self.slice(d);
            for p in 0..hw {
                let mut best = 0;
                for c in 1..NUM_CLASSES {
                    if block[c * hw + p] > block[best * hw + p] {
                        best = c;
                    }
                }
                labels.push(best as u8);
            }
        }
        LabelMask::new(s, labels).expect("argmax labels are in range")
    }

    /// Largest deviation of a per-pixel channel sum from one.
    pub fn max_normalization_error(&self) -> f64 {
        let hw = self.shape.slice_len();
        let mut worst: f64 = 0.0;
        for d in 0..self.shape.depth {
            let block = self.slice(d);
            for p in 0..hw {
                let s: f64 = (0..NUM_CLASSES).map(|c| block[c * hw + p]).sum();
                worst = worst.max((s - 1.0).abs());
            }
        }
        worst
    }
}

/// Ensemble strategy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EnsembleMode {
    /// End-to-end members pooled with constant weights.
    Fixed,
    /// End-to-end members pooled with memory-based pixelwise weights.
    Uncertainty,
    /// Heterogeneous members trained separately on one trainset.
    Stacking,
    /// Homogeneous members trained separately on bootstrap resamples.
    Bagging,
    /// One member applied to augmented test inputs.
    Augmenting,
}

impl EnsembleMode {
    pub fn name(self) -> &'static str {
        match self {
            EnsembleMode::Fixed => "fixed",
            EnsembleMode::Uncertainty => "uncertainty",
            EnsembleMode::Stacking => "stacking",
            EnsembleMode::Bagging => "bagging",
            EnsembleMode::Augmenting => "augmenting",
        }
    }

    /// Whether members are trained jointly through the pooling layer.
    pub fn is_end_to_end(self) -> bool {
        matches!(self, EnsembleMode::Fixed | EnsembleMode::Uncertainty)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleConfig {
    pub mode: EnsembleMode,
    /// ω_i for fixed pooling; also used by stacking and bagging.
    #[serde(default)]
    pub fixed_weights: Vec<f64>,
    pub members: Vec<ClassifierSpec>,
    #[serde(default)]
    pub bootstrap_seed: u64,
    #[serde(default)]
    pub test_augmentations: AugmentationSpec,
}

impl EnsembleConfig {
    /// Uniform fixed weights over `members`.
    pub fn fixed(members: Vec<ClassifierSpec>) -> Self {
        let n = members.len();
        EnsembleConfig {
            mode: EnsembleMode::Fixed,
            fixed_weights: vec![1.0 / n as f64; n],
            members,
            bootstrap_seed: 0,
            test_augmentations: AugmentationSpec::default(),
        }
    }

    pub fn uncertainty(members: Vec<ClassifierSpec>) -> Self {
        EnsembleConfig { mode: EnsembleMode::Uncertainty, ..Self::fixed(members) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.members.is_empty() {
            return Err(Error::config("ensemble needs at least one member"));
        }
        for m in &self.members {
            m.validate()?;
        }
        match self.mode {
            EnsembleMode::Fixed | EnsembleMode::Stacking | EnsembleMode::Bagging => {
                if self.fixed_weights.len() != self.members.len() {
                    return Err(Error::config(format!(
                        "{} fixed weights for {} members",
                        self.fixed_weights.len(),
                        self.members.len()
                    )));
                }
                check_fixed_weights(&self.fixed_weights)?;
            }
            EnsembleMode::Uncertainty => {}
            EnsembleMode::Augmenting => {
                if self.members.len() != 1 {
                    return Err(Error::config("augmenting uses exactly one member"));
                }
                self.test_augmentations.validate()?;
            }
        }
        Ok(())
    }
}

pub(crate) fn check_fixed_weights(weights: &[f64]) -> Result<()> {
    if weights.is_empty() {
        return Err(Error::config("no pooling weights"));
    }
    if let Some(w) = weights.iter().find(|&&w| !(w > 0.0)) {
        return Err(Error::config(format!("pooling weight {w} is not positive")));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
        return Err(Error::config(format!("pooling weights sum to {sum}, expected 1")));
    }
    Ok(())
}
