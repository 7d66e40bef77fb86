//! Hausdorff distance via exact Euclidean distance transforms.
//!
//! The squared distance to the nearest voxel of a set is computed separably
//! along width, height and depth with the lower-envelope-of-parabolas
//! transform. All squared distances are sums of squared integer offsets
//! (depth offsets scaled by the slice spacing), so the result equals a
//! brute-force all-pairs minimum.

use crate::error::Result;
use crate::volume::{check_same_shape, Class, LabelMask, Shape3};

/// One-dimensional squared distance transform of `f` with axis weight `w`:
/// `out[q] = min_p f[p] + w (q − p)²`. Infinite entries are not sites.
fn dt_1d(f: &[f64], w: f64, out: &mut [f64], sites: &mut Vec<usize>, bounds: &mut Vec<f64>) {
    sites.clear();
    bounds.clear();
    let key = |p: usize| f[p] + w * (p * p) as f64;
    for p in (0..f.len()).filter(|&p| f[p].is_finite()) {
        loop {
            let Some(&v) = sites.last() else {
                sites.push(p);
                bounds.push(f64::NEG_INFINITY);
                break;
            };
            let s = (key(p) - key(v)) / (2.0 * w * (p - v) as f64);
            if s <= *bounds.last().expect("bounds mirror sites") {
                sites.pop();
                bounds.pop();
            } else {
                sites.push(p);
                bounds.push(s);
                break;
            }
        }
    }
    if sites.is_empty() {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < sites.len() && bounds[k + 1] < q as f64 {
            k += 1;
        }
        let p = sites[k];
        let d = q as f64 - p as f64;
        *o = f[p] + w * d * d;
    }
}

/// Squared distance from every voxel to the nearest member of `set`.
fn squared_edt(set: &[bool], shape: Shape3, spacing: f64) -> Vec<f64> {
    let (dd, hh, ww) = (shape.depth, shape.height, shape.width);
    let mut g: Vec<f64> = set.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let (mut sites, mut bounds) = (Vec::new(), Vec::new());
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut pass = |g: &mut Vec<f64>, len: usize, stride: usize, starts: Vec<usize>, w: f64| {
        line.resize(len, 0.0);
        out.resize(len, 0.0);
        for start in starts {
            for i in 0..len {
                line[i] = g[start + i * stride];
            }
            dt_1d(&line, w, &mut out, &mut sites, &mut bounds);
            for i in 0..len {
                g[start + i * stride] = out[i];
            }
        }
    };
    let rows: Vec<usize> = (0..dd * hh).map(|r| r * ww).collect();
    pass(&mut g, ww, 1, rows, 1.0);
    let cols: Vec<usize> = (0..dd).flat_map(|d| (0..ww).map(move |x| d * hh * ww + x)).collect();
    pass(&mut g, hh, ww, cols, 1.0);
    let piles: Vec<usize> = (0..hh * ww).collect();
    pass(&mut g, dd, hh * ww, piles, spacing * spacing);
    g
}

/// `max_{a∈A} min_{b∈B} |a − b|`; `None` when either set is empty.
pub fn directed_hausdorff(a: &[bool], b: &[bool], shape: Shape3, spacing: f64) -> Option<f64> {
    if !a.iter().any(|&x| x) || !b.iter().any(|&x| x) {
        return None;
    }
    let edt = squared_edt(b, shape, spacing);
    let worst = a.iter().zip(&edt).filter(|(&x, _)| x).map(|(_, &d)| d).fold(0.0, f64::max);
    Some(worst.sqrt())
}

/// Symmetric Hausdorff distance between the `class` voxels of two masks, in
/// pixels with depth scaled by `spacing`. Both sets empty gives 0; exactly
/// one empty gives `None`.
pub fn hausdorff(pred: &LabelMask, truth: &LabelMask, class: Class, spacing: f64) -> Result<Option<f64>> {
    check_same_shape(pred.shape(), truth.shape(), "hausdorff prediction/truth")?;
    let c = class as u8;
    let a: Vec<bool> = pred.labels().iter().map(|&l| l == c).collect();
    let b: Vec<bool> = truth.labels().iter().map(|&l| l == c).collect();
    let (ea, eb) = (!a.contains(&true), !b.contains(&true));
    if ea && eb {
        return Ok(Some(0.0));
    }
    if ea || eb {
        return Ok(None);
    }
    let ab = directed_hausdorff(&a, &b, pred.shape(), spacing).expect("non-empty");
    let ba = directed_hausdorff(&b, &a, pred.shape(), spacing).expect("non-empty");
    Ok(Some(ab.max(ba)))
}
