//! Volume file formats.
//!
//! `portable-volume` (`.pvol`), all integers little-endian:
//!
//! | offset | size | field                     |
//! |--------|------|---------------------------|
//! | 0      | 4    | magic `b"PVOL"`           |
//! | 4      | 2    | version (`1`)             |
//! | 6      | 4    | D (u32)                   |
//! | 10     | 4    | H (u32)                   |
//! | 14     | 4    | W (u32)                   |
//! | 18     | 1    | has_mask (0 or 1)         |
//! | 19     | 4·DHW| voxels, f32, row-major    |
//! |        | DHW  | labels, u8 (if has_mask)  |
//!
//! `raw-f32` is a bare 12-byte `D, H, W` (u32) header followed by the f32
//! voxels; it never carries a mask.

use std::path::Path;
use std::str::FromStr;

use super::{CineVolume, LabelMask, Phase, Shape3};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"PVOL";
pub const VERSION: u16 = 1;
const PVOL_HEADER_LEN: usize = 19;
const RAW_HEADER_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VolumeFormat {
    RawF32,
    PortableVolume,
}

impl FromStr for VolumeFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "raw-f32" => Ok(VolumeFormat::RawF32),
            "portable-volume" | "pvol" => Ok(VolumeFormat::PortableVolume),
            other => Err(Error::UnknownFormat(other.to_string())),
        }
    }
}

/// Serializes a volume (and optional mask) in the given format.
pub fn encode_volume(v: &CineVolume, mask: Option<&LabelMask>, format: VolumeFormat) -> Result<Vec<u8>> {
    let s = v.shape();
    let dims = [s.depth, s.height, s.width].map(|d| d as u32);
    let mut buf = Vec::with_capacity(PVOL_HEADER_LEN + s.len() * 5);
    match format {
        VolumeFormat::PortableVolume => {
            if let Some(m) = mask {
                super::check_same_shape(s, m.shape(), "volume/mask")?;
            }
            buf.extend_from_slice(MAGIC);
            buf.extend_from_slice(&VERSION.to_le_bytes());
            for d in dims {
                buf.extend_from_slice(&d.to_le_bytes());
            }
            buf.push(mask.is_some() as u8);
        }
        VolumeFormat::RawF32 => {
            if mask.is_some() {
                return Err(Error::config("raw-f32 cannot carry a mask"));
            }
            for d in dims {
                buf.extend_from_slice(&d.to_le_bytes());
            }
        }
    }
    for &x in v.voxels() {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(m) = mask {
        buf.extend_from_slice(m.labels());
    }
    Ok(buf)
}

pub fn save_volume(path: &Path, v: &CineVolume, mask: Option<&LabelMask>, format: VolumeFormat) -> Result<()> {
    let bytes = encode_volume(v, mask, format)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

pub fn load_volume(path: &Path, format: VolumeFormat) -> Result<(CineVolume, Option<LabelMask>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let frame_id = path.file_stem().and_then(|s| s.to_str()).unwrap_or("volume").to_string();
    decode_volume(&bytes, format, &frame_id).map_err(|e| match e {
        Error::MalformedHeader { reason, .. } => Error::MalformedHeader { path: path.to_path_buf(), reason },
        other => other,
    })
}

fn malformed(reason: impl Into<String>) -> Error {
    Error::MalformedHeader { path: Default::default(), reason: reason.into() }
}

fn read_u32(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

pub fn decode_volume(bytes: &[u8], format: VolumeFormat, frame_id: &str) -> Result<(CineVolume, Option<LabelMask>)> {
    let (header_len, dims_at, has_mask) = match format {
        VolumeFormat::PortableVolume => {
            if bytes.len() < PVOL_HEADER_LEN {
                return Err(malformed(format!("header needs {PVOL_HEADER_LEN} bytes, file has {}", bytes.len())));
            }
            if &bytes[0..4] != MAGIC {
                return Err(malformed("bad magic"));
            }
            let version = u16::from_le_bytes([bytes[4], bytes[5]]);
            if version != VERSION {
                return Err(malformed(format!("unsupported version {version}")));
            }
            let has_mask = match bytes[18] {
                0 => false,
                1 => true,
                f => return Err(malformed(format!("has_mask flag {f}"))),
            };
            (PVOL_HEADER_LEN, 6, has_mask)
        }
        VolumeFormat::RawF32 => {
            if bytes.len() < RAW_HEADER_LEN {
                return Err(malformed("raw-f32 header truncated"));
            }
            (RAW_HEADER_LEN, 0, false)
        }
    };
    let [d, h, w] = [0, 4, 8].map(|o| read_u32(bytes, dims_at + o) as usize);
    if d == 0 || h == 0 || w == 0 {
        return Err(malformed(format!("zero dimension in {d}x{h}x{w}")));
    }
    let shape = Shape3::new(d, h, w);
    let n = shape.len();
    let expected = header_len + 4 * n + if has_mask { n } else { 0 };
    if bytes.len() != expected {
        return Err(Error::shape(format!(
            "header declares {shape} (expects {expected} bytes), file has {}",
            bytes.len()
        )));
    }
    let body = &bytes[header_len..header_len + 4 * n];
    let voxels = body.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    let volume = CineVolume::new(frame_id, Phase::Synthetic, shape, voxels)?;
    let mask = if has_mask {
        Some(LabelMask::new(shape, bytes[header_len + 4 * n..].to_vec())?)
    } else {
        None
    };
    Ok((volume, mask))
}
