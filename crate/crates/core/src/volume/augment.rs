//! Spatial augmentation: in-plane rotations and flips applied identically
//! to a volume and its mask.

use serde::{Deserialize, Serialize};

use super::{CineVolume, LabelMask, Shape3};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flip {
    /// Mirror left-right (columns).
    Horizontal,
    /// Mirror top-bottom (rows).
    Vertical,
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    /// Counterclockwise angles in degrees, each in (-180, 180].
    #[serde(default)]
    pub rotations: Vec<f64>,
    #[serde(default)]
    pub flips: Vec<Flip>,
    #[serde(default = "default_true")]
    pub enabled: bool,
}

fn default_true() -> bool {
    true
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        AugmentationSpec { rotations: Vec::new(), flips: Vec::new(), enabled: true }
    }
}

impl AugmentationSpec {
    pub fn validate(&self) -> Result<()> {
        for &a in &self.rotations {
            if !(a > -180.0 && a <= 180.0) {
                return Err(Error::config(format!("rotation angle {a} outside (-180, 180]")));
            }
        }
        Ok(())
    }

    /// Transforms in output order, excluding the identity.
    pub fn transforms(&self) -> Vec<SpatialTransform> {
        if !self.enabled {
            return Vec::new();
        }
        let rotations = self.rotations.iter().map(|&a| SpatialTransform::Rotate(a));
        let flips = self.flips.iter().filter(|&&f| f != Flip::None).map(|&f| SpatialTransform::Flip(f));
        rotations.chain(flips).collect()
    }
}

/// A single in-plane transform applied to every slice.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SpatialTransform {
    Identity,
    Rotate(f64),
    Flip(Flip),
}

impl SpatialTransform {
    fn quarter_turns(angle: f64) -> Option<usize> {
        let q = angle / 90.0;
        (q == q.round()).then(|| q.rem_euclid(4.0) as usize)
    }

    /// Whether the transform can be undone exactly on an `h`×`w` slice.
    pub fn is_invertible(&self, h: usize, w: usize) -> bool {
        match *self {
            SpatialTransform::Identity | SpatialTransform::Flip(_) => true,
            SpatialTransform::Rotate(a) => match Self::quarter_turns(a) {
                Some(k) => k % 2 == 0 || h == w,
                None => false,
            },
        }
    }

    pub fn inverse(&self) -> Option<SpatialTransform> {
        match *self {
            SpatialTransform::Identity | SpatialTransform::Flip(_) => Some(*self),
            SpatialTransform::Rotate(a) => Self::quarter_turns(a).map(|_| SpatialTransform::Rotate(-a)),
        }
    }

    /// Applies the transform to one row-major slice. `interpolate` selects
    /// bilinear sampling for non-quarter rotations; otherwise nearest.
    pub fn apply_slice<T: Copy + Default + Into<f64> + FromF64>(
        &self,
        src: &[T],
        h: usize,
        w: usize,
        interpolate: bool,
    ) -> Vec<T> {
        match *self {
            SpatialTransform::Identity => src.to_vec(),
            SpatialTransform::Flip(Flip::None) => src.to_vec(),
            SpatialTransform::Flip(Flip::Horizontal) => {
                (0..h * w).map(|k| src[(k / w) * w + (w - 1 - k % w)]).collect()
            }
            SpatialTransform::Flip(Flip::Vertical) => {
                (0..h * w).map(|k| src[(h - 1 - k / w) * w + k % w]).collect()
            }
            SpatialTransform::Rotate(angle) => match Self::quarter_turns(angle) {
                Some(k) if k % 2 == 0 || h == w => {
                    let mut out = src.to_vec();
                    for _ in 0..k {
                        out = rotate_slice_quarter(&out, h);
                    }
                    out
                }
                _ => rotate_resample(src, h, w, angle, interpolate),
            },
        }
    }
}

/// Conversion back from the interpolation domain; labels round to nearest.
pub trait FromF64 {
    fn from_f64(v: f64) -> Self;
}

impl FromF64 for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
}

impl FromF64 for u8 {
    fn from_f64(v: f64) -> Self {
        v.round() as u8
    }
}

impl FromF64 for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
}

/// One counterclockwise quarter turn of an `n`×`n` slice:
/// pixel `(r, c)` moves to `(n - 1 - c, r)`.
pub fn rotate_slice_quarter<T: Copy>(src: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            out.push(src[j * n + (n - 1 - i)]);
        }
    }
    out
}

fn rotate_resample<T: Copy + Default + Into<f64> + FromF64>(
    src: &[T],
    h: usize,
    w: usize,
    angle: f64,
    interpolate: bool,
) -> Vec<T> {
    let (sin, cos) = angle.to_radians().sin_cos();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let mut out = Vec::with_capacity(h * w);
    for i in 0..h {
        for j in 0..w {
            let (u, v) = (i as f64 - cy, j as f64 - cx);
            let sy = u * cos + v * sin + cy;
            let sx = v * cos - u * sin + cx;
            out.push(sample(src, h, w, sy, sx, interpolate));
        }
    }
    out
}

fn sample<T: Copy + Default + Into<f64> + FromF64>(
    src: &[T],
    h: usize,
    w: usize,
    y: f64,
    x: f64,
    interpolate: bool,
) -> T {
    let inside = |y: f64, x: f64| y >= 0.0 && x >= 0.0 && y <= (h - 1) as f64 && x <= (w - 1) as f64;
    if !interpolate {
        let (ry, rx) = (y.round(), x.round());
        return if inside(ry, rx) { src[ry as usize * w + rx as usize] } else { T::default() };
    }
    if !inside(y, x) {
        return T::default();
    }
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let p = |yy: usize, xx: usize| -> f64 { src[yy * w + xx].into() };
    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
    let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
    T::from_f64(top * (1.0 - fy) + bottom * fy)
}

pub(crate) fn transform_volume(v: &CineVolume, t: SpatialTransform) -> CineVolume {
    let s = v.shape();
    let mut voxels = Vec::with_capacity(s.len());
    for d in 0..s.depth {
        voxels.extend(t.apply_slice(v.slice(d), s.height, s.width, true));
    }
    CineVolume::new(v.frame_id.clone(), v.phase, s, voxels).expect("shape preserved")
}

pub(crate) fn transform_mask(m: &LabelMask, t: SpatialTransform) -> LabelMask {
    let s: Shape3 = m.shape();
    let mut labels = Vec::with_capacity(s.len());
    for d in 0..s.depth {
        labels.extend(t.apply_slice(m.slice(d), s.height, s.width, false));
    }
    LabelMask::new(s, labels).expect("shape preserved")
}

/// Returns the original pair followed by one transformed copy per rotation
/// and per non-`None` flip.
pub fn augment(pair: &(CineVolume, LabelMask), spec: &AugmentationSpec) -> Result<Vec<(CineVolume, LabelMask)>> {
    spec.validate()?;
    super::check_same_shape(pair.0.shape(), pair.1.shape(), "augment image/mask")?;
    let mut out = vec![pair.clone()];
    for t in spec.transforms() {
        out.push((transform_volume(&pair.0, t), transform_mask(&pair.1, t)));
    }
    Ok(out)
}
