//! PNG figures of one frame.
//!
//! * `overlay_<label>.png` per slice: the image with the truth overlay on the
//!   left and the prediction overlay on the right (prediction only when no
//!   mask is given). End slices are labelled `0`, `1`, `-2`, `-1`; the others
//!   by their index.
//! * `sigma_member<i>.png`: σ_i scaled from its own minimum to maximum.
//! * `weight_member<i>.png`: ω̄_i on the fixed scale `[0, 1]`.
//! * `sigma_member<i>.pvol`, `weight_member<i>.pvol`: the same maps as
//!   one-slice portable volumes.
//! * `render.json`: file list and the value range of every heatmap.

use std::path::Path;

use image::{GrayImage, Luma, Rgb, RgbImage};
use serde::Serialize;

use crate::ensemble::{PixelWeightField, UncertaintyMemory};
use crate::error::{Error, Result};
use crate::volume::{save_volume, CineVolume, LabelMask, Phase, Shape3, VolumeFormat};

/// Overlay colours for BG, RV, MYO and LV. BG leaves the image visible.
pub const PALETTE: [Option<[u8; 3]>; 4] = [None, Some([230, 60, 60]), Some([60, 200, 90]), Some([70, 110, 240])];

/// Pixels per voxel in the written images.
pub const SCALE: u32 = 4;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HeatmapInfo {
    pub member: usize,
    pub png: String,
    pub pvol: String,
    /// Smallest and largest value of the map.
    pub min: f64,
    pub max: f64,
    /// Values mapped to black and white.
    pub scale: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SliceImage {
    pub slice: usize,
    pub label: String,
    pub file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RenderSummary {
    pub frame_id: String,
    pub has_truth: bool,
    pub slices: Vec<SliceImage>,
    pub sigma: Vec<HeatmapInfo>,
    pub weights: Vec<HeatmapInfo>,
}

/// Label of slice `d`: negative indices for the trailing end slices.
pub fn slice_label(d: usize, depth: usize, end_count: usize) -> String {
    if d >= end_count && d + end_count >= depth {
        format!("-{}", depth - d)
    } else {
        d.to_string()
    }
}

fn gray(v: f32) -> [u8; 3] {
    let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    [g, g, g]
}

fn blend(base: [u8; 3], over: [u8; 3]) -> [u8; 3] {
    [0, 1, 2].map(|i| ((base[i] as u16 + over[i] as u16) / 2) as u8)
}

/// One overlay panel of slice `d` at scale 1.
pub fn overlay_panel(v: &CineVolume, mask: &LabelMask, d: usize) -> RgbImage {
    let s = v.shape();
    RgbImage::from_fn(s.width as u32, s.height as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        let base = gray(v.get(d, y, x));
        Rgb(match PALETTE[mask.get(d, y, x) as usize] {
            Some(c) => blend(base, c),
            None => base,
        })
    })
}

fn upscale_rgb(img: &RgbImage) -> RgbImage {
    RgbImage::from_fn(img.width() * SCALE, img.height() * SCALE, |x, y| *img.get_pixel(x / SCALE, y / SCALE))
}

/// Grayscale heatmap of an `h`×`w` map with `scale[0]` black and `scale[1]` white.
pub fn heatmap(values: &[f64], h: usize, w: usize, scale: [f64; 2]) -> GrayImage {
    let span = scale[1] - scale[0];
    GrayImage::from_fn((w as u32) * SCALE, (h as u32) * SCALE, |x, y| {
        let v = values[(y / SCALE) as usize * w + (x / SCALE) as usize];
        let t = if span > 0.0 { (v - scale[0]) / span } else { 0.5 };
        Luma([(t.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn save_png<P, C>(img: &image::ImageBuffer<P, C>, path: &Path) -> Result<()>
where
    P: image::Pixel + image::PixelWithColorType,
    [P::Subpixel]: image::EncodableLayout,
    C: std::ops::Deref<Target = [P::Subpixel]>,
{
    img.save(path).map_err(|e| Error::Data(format!("writing {}: {e}", path.display())))
}

fn export_map(values: &[f64], h: usize, w: usize, id: String, path: &Path) -> Result<()> {
    let v = CineVolume::new(id, Phase::Synthetic, Shape3::new(1, h, w), values.iter().map(|&x| x as f32).collect())?;
    save_volume(path, &v, None, VolumeFormat::PortableVolume)
}

fn range(values: &[f64]) -> (f64, f64) {
    values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
}

/// Writes every figure of one frame into `out` and returns the summary that
/// is also written as `render.json`.
pub fn render_frame(
    v: &CineVolume,
    truth: Option<&LabelMask>,
    prediction: &LabelMask,
    memories: Option<&[UncertaintyMemory]>,
    weights: Option<&PixelWeightField>,
    end_count: usize,
    out: &Path,
) -> Result<RenderSummary> {
    let s = v.shape();
    crate::volume::check_same_shape(s, prediction.shape(), "render volume/prediction")?;
    if let Some(t) = truth {
        crate::volume::check_same_shape(s, t.shape(), "render volume/truth")?;
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let mut slices = Vec::new();
    for d in 0..s.depth {
        let pred = overlay_panel(v, prediction, d);
        let panel = match truth {
            Some(t) => {
                let left = overlay_panel(v, t, d);
                let mut both = RgbImage::new(2 * s.width as u32 + 1, s.height as u32);
                image::imageops::replace(&mut both, &left, 0, 0);
                image::imageops::replace(&mut both, &pred, s.width as i64 + 1, 0);
                both
            }
            None => pred,
        };
        let label = slice_label(d, s.depth, end_count);
        let file = format!("overlay_{label}.png");
        save_png(&upscale_rgb(&panel), &out.join(&file))?;
        slices.push(SliceImage { slice: d, label, file });
    }
    let mut sigma = Vec::new();
    for (i, m) in memories.unwrap_or_default().iter().enumerate() {
        let (lo, hi) = range(&m.sigma);
        let (png, pvol) = (format!("sigma_member{i}.png"), format!("sigma_member{i}.pvol"));
        save_png(&heatmap(&m.sigma, m.height, m.width, [lo, hi]), &out.join(&png))?;
        export_map(&m.sigma, m.height, m.width, format!("{}_sigma{i}", v.frame_id), &out.join(&pvol))?;
        sigma.push(HeatmapInfo { member: i, png, pvol, min: lo, max: hi, scale: [lo, hi] });
    }
    let mut weight_maps = Vec::new();
    if let Some(wf) = weights {
        for i in 0..wf.members {
            let map = wf.member(i);
            let (lo, hi) = range(map);
            let (png, pvol) = (format!("weight_member{i}.png"), format!("weight_member{i}.pvol"));
            save_png(&heatmap(map, wf.height, wf.width, [0.0, 1.0]), &out.join(&png))?;
            export_map(map, wf.height, wf.width, format!("{}_weight{i}", v.frame_id), &out.join(&pvol))?;
            weight_maps.push(HeatmapInfo { member: i, png, pvol, min: lo, max: hi, scale: [0.0, 1.0] });
        }
    }
    let summary =
        RenderSummary { frame_id: v.frame_id.clone(), has_truth: truth.is_some(), slices, sigma, weights: weight_maps };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes");
    std::fs::write(out.join("render.json"), json).map_err(|e| Error::io("writing render.json", e))?;
    Ok(summary)
}
