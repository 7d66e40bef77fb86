//! In-plane resizing ("zooming") of volumes and masks.
//!
//! Sample positions use the corner-aligned convention: output pixel `i` of
//! `out` maps to input coordinate `i * (in - 1) / (out - 1)`, so the corner
//! pixels of input and output coincide. Intensities are interpolated
//! bilinearly; labels take the nearest input pixel and are never blended.

use super::{CineVolume, LabelMask, Shape3};
use crate::error::{Error, Result};

const MIN_TARGET: usize = 8;

fn check_target(target: (usize, usize)) -> Result<()> {
    if target.0 < MIN_TARGET || target.1 < MIN_TARGET {
        return Err(Error::config(format!(
            "resize target {}x{} below minimum {MIN_TARGET}x{MIN_TARGET}",
            target.0, target.1
        )));
    }
    Ok(())
}

fn source_coord(i: usize, input: usize, output: usize) -> f64 {
    if input == 1 || output == 1 {
        return 0.0;
    }
    (i * (input - 1)) as f64 / (output - 1) as f64
}

/// Bilinearly resizes every slice to `target` = (height, width). Depth is kept.
pub fn resize_volume(v: &CineVolume, target: (usize, usize)) -> Result<CineVolume> {
    check_target(target)?;
    let s = v.shape();
    let (th, tw) = target;
    if (s.height, s.width) == target {
        return Ok(v.clone());
    }
    let rows: Vec<(usize, usize, f64)> = (0..th).map(|y| lerp_taps(y, s.height, th)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..tw).map(|x| lerp_taps(x, s.width, tw)).collect();

    let mut out = Vec::with_capacity(s.depth * th * tw);
    for d in 0..s.depth {
        let src = v.slice(d);
        for &(y0, y1, fy) in &rows {
            for &(x0, x1, fx) in &cols {
                let p = |y: usize, x: usize| src[y * s.width + x] as f64;
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push((top * (1.0 - fy) + bottom * fy) as f32);
            }
        }
    }
    CineVolume::new(v.frame_id.clone(), v.phase, Shape3::new(s.depth, th, tw), out)
}

fn lerp_taps(i: usize, input: usize, output: usize) -> (usize, usize, f64) {
    let c = source_coord(i, input, output);
    let lo = (c.floor() as usize).min(input - 1);
    let hi = (lo + 1).min(input - 1);
    (lo, hi, c - lo as f64)
}

/// Nearest-neighbor resize of a label mask to `target` = (height, width).
pub fn resize_mask(m: &LabelMask, target: (usize, usize)) -> Result<LabelMask> {
    check_target(target)?;
    let s = m.shape();
    let (th, tw) = target;
    if (s.height, s.width) == target {
        return Ok(m.clone());
    }
    let nearest = |i: usize, input: usize, output: usize| {
        (source_coord(i, input, output).round() as usize).min(input - 1)
    };
    let rows: Vec<usize> = (0..th).map(|y| nearest(y, s.height, th)).collect();
    let cols: Vec<usize> = (0..tw).map(|x| nearest(x, s.width, tw)).collect();
    let mut out = Vec::with_capacity(s.depth * th * tw);
    for d in 0..s.depth {
        let src = m.slice(d);
        for &y in &rows {
            for &x in &cols {
                out.push(src[y * s.width + x]);
            }
        }
    }
    LabelMask::new(Shape3::new(s.depth, th, tw), out)
}
