//! Volumes, label masks and the preprocessing applied before training.
//!
//! A [`CineVolume`] is one 3D frame (depth × height × width) of a cine
//! sequence. Its [`LabelMask`] carries one of the four [`Class`] labels per
//! voxel. Both are stored row-major with depth as the slowest axis.

pub(crate) mod augment;
mod io;
mod phantom;
mod resize;

pub use augment::{augment, rotate_slice_quarter, AugmentationSpec, Flip, SpatialTransform};
pub use io::{load_volume, save_volume, VolumeFormat};
pub use phantom::{generate_phantom, PhantomSpec, Range};
pub use resize::{resize_mask, resize_volume};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of segmentation classes (BG, RV, MYO, LV).
pub const NUM_CLASSES: usize = 4;

/// Segmentation classes, indexed by their label value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[repr(u8)]
pub enum Class {
    Background = 0,
    Rv = 1,
    Myo = 2,
    Lv = 3,
}

impl Class {
    pub const ALL: [Class; 4] = [Class::Background, Class::Rv, Class::Myo, Class::Lv];
    /// Classes averaged by the "Average DSC" metric.
    pub const FOREGROUND: [Class; 3] = [Class::Rv, Class::Myo, Class::Lv];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Background => "bg",
            Class::Rv => "rv",
            Class::Myo => "myo",
            Class::Lv => "lv",
        }
    }
}

/// Cardiac phase the frame was taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ed,
    Es,
    #[default]
    Synthetic,
}

/// Depth × height × width extent of a volume.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape3 {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape3 {
    pub fn new(depth: usize, height: usize, width: usize) -> Self {
        Shape3 { depth, height, width }
    }

    pub fn len(&self) -> usize {
        self.depth * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_len(&self) -> usize {
        self.height * self.width
    }

    pub fn index(&self, d: usize, y: usize, x: usize) -> usize {
        (d * self.height + y) * self.width + x
    }
}

impl std::fmt::Display for Shape3 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.depth, self.height, self.width)
    }
}

/// One 3D grayscale frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CineVolume {
    pub frame_id: String,
    pub phase: Phase,
    shape: Shape3,
    voxels: Vec<f32>,
}

impl CineVolume {
    pub fn new(frame_id: impl Into<String>, phase: Phase, shape: Shape3, voxels: Vec<f32>) -> Result<Self> {
        if shape.depth == 0 || shape.height == 0 || shape.width == 0 {
            return Err(Error::shape(format!("volume dimensions must be positive, got {shape}")));
        }
        if voxels.len() != shape.len() {
            return Err(Error::shape(format!(
                "volume {shape} needs {} voxels, got {}",
                shape.len(),
                voxels.len()
            )));
        }
        Ok(CineVolume { frame_id: frame_id.into(), phase, shape, voxels })
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn voxels_mut(&mut self) -> &mut [f32] {
        &mut self.voxels
    }

    pub fn slice(&self, d: usize) -> &[f32] {
        let n = self.shape.slice_len();
        &self.voxels[d * n..(d + 1) * n]
    }

    pub fn get(&self, d: usize, y: usize, x: usize) -> f32 {
        self.voxels[self.shape.index(d, y, x)]
    }

    /// Builds a new volume from the given depth indices, in that order.
    pub fn select_slices(&self, indices: &[usize]) -> CineVolume {
        let n = self.shape.slice_len();
        let mut voxels = Vec::with_capacity(indices.len() * n);
        for &d in indices {
            voxels.extend_from_slice(self.slice(d));
        }
        CineVolume {
            frame_id: self.frame_id.clone(),
            phase: self.phase,
            shape: Shape3::new(indices.len(), self.shape.height, self.shape.width),
            voxels,
        }
    }

    /// Min-max scales the frame into `[0, 1]`.
    ///
    /// A constant frame maps to all zeros.
    pub fn normalize(&self) -> CineVolume {
        let (lo, hi) = self
            .voxels
            .iter()
            .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        let range = hi - lo;
        let voxels = if range > 0.0 {
            self.voxels.iter().map(|&v| ((v - lo) / range).clamp(0.0, 1.0)).collect()
        } else {
            vec![0.0; self.voxels.len()]
        };
        CineVolume { voxels, ..self.clone() }
    }
}

/// Per-voxel class labels paired with a [`CineVolume`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMask {
    shape: Shape3,
    labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(shape: Shape3, labels: Vec<u8>) -> Result<Self> {
        if shape.depth == 0 || shape.height == 0 || shape.width == 0 {
            return Err(Error::shape(format!("mask dimensions must be positive, got {shape}")));
        }
        if labels.len() != shape.len() {
            return Err(Error::shape(format!(
                "mask {shape} needs {} labels, got {}",
                shape.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l as usize >= NUM_CLASSES) {
            return Err(Error::Data(format!("label {bad} outside {{0,1,2,3}}")));
        }
        Ok(LabelMask { shape, labels })
    }

    pub fn zeros(shape: Shape3) -> Self {
        LabelMask { shape, labels: vec![0; shape.len()] }
    }

    pub fn shape(&self) -> Shape3 {
        self.shape
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn slice(&self, d: usize) -> &[u8] {
        let n = self.shape.slice_len();
        &self.labels[d * n..(d + 1) * n]
    }

    pub fn get(&self, d: usize, y: usize, x: usize) -> u8 {
        self.labels[self.shape.index(d, y, x)]
    }

    pub fn set(&mut self, d: usize, y: usize, x: usize, label: Class) {
        let i = self.shape.index(d, y, x);
        self.labels[i] = label as u8;
    }

    pub fn select_slices(&self, indices: &[usize]) -> LabelMask {
        let n = self.shape.slice_len();
        let mut labels = Vec::with_capacity(indices.len() * n);
        for &d in indices {
            labels.extend_from_slice(self.slice(d));
        }
        LabelMask { shape: Shape3::new(indices.len(), self.shape.height, self.shape.width), labels }
    }

    /// Sorted set of labels present in the mask.
    pub fn label_set(&self) -> Vec<u8> {
        let mut seen = [false; NUM_CLASSES];
        for &l in &self.labels {
            seen[l as usize] = true;
        }
        (0..NUM_CLASSES as u8).filter(|&l| seen[l as usize]).collect()
    }

    pub fn count(&self, class: Class) -> usize {
        self.labels.iter().filter(|&&l| l == class as u8).count()
    }
}

pub(crate) fn check_same_shape(a: Shape3, b: Shape3, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("{what}: {a} vs {b}")));
    }
    Ok(())
}
