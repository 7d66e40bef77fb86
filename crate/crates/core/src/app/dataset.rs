//! Dataset directories: one volume file per frame plus `index.json`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{load_volume, save_volume, CineVolume, LabelMask, Phase, Shape3, VolumeFormat};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FileFormat {
    PortableVolume,
    RawF32,
}

impl From<FileFormat> for VolumeFormat {
    fn from(f: FileFormat) -> Self {
        match f {
            FileFormat::PortableVolume => VolumeFormat::PortableVolume,
            FileFormat::RawF32 => VolumeFormat::RawF32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub frame_id: String,
    /// Path relative to the dataset directory.
    pub file: String,
    pub shape: [usize; 3],
    pub has_mask: bool,
    #[serde(default)]
    pub phase: Phase,
    #[serde(default = "default_format")]
    pub format: FileFormat,
}

fn default_format() -> FileFormat {
    FileFormat::PortableVolume
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetIndex {
    pub frames: Vec<IndexEntry>,
}

/// A loaded dataset in index order.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub index: DatasetIndex,
    pub frames: Vec<(CineVolume, Option<LabelMask>)>,
}

impl Dataset {
    /// Frames that carry a mask; errors if any frame lacks one.
    pub fn labelled(&self) -> Result<Vec<(CineVolume, LabelMask)>> {
        self.frames
            .iter()
            .map(|(v, m)| match m {
                Some(m) => Ok((v.clone(), m.clone())),
                None => Err(Error::Data(format!("frame {} has no mask", v.frame_id))),
            })
            .collect()
    }

    /// Files read, as `(name, bytes)` pairs in index order, for hashing.
    pub fn input_files(&self) -> Result<Vec<(String, Vec<u8>)>> {
        let mut out = vec![(INDEX_FILE.to_string(), read(&self.dir.join(INDEX_FILE))?)];
        for e in &self.index.frames {
            out.push((e.file.clone(), read(&self.dir.join(&e.file))?));
        }
        Ok(out)
    }

    pub fn find(&self, frame_id: &str) -> Option<&(CineVolume, Option<LabelMask>)> {
        self.frames.iter().find(|(v, _)| v.frame_id == frame_id)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))
}

/// Writes each frame as `<frame_id>.pvol` plus the index, returning the
/// written file names.
pub fn write_dataset(dir: &Path, frames: &[(CineVolume, Option<LabelMask>)]) -> Result<Vec<String>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let mut entries = Vec::with_capacity(frames.len());
    for (v, m) in frames {
        let file = format!("{}.pvol", v.frame_id);
        save_volume(&dir.join(&file), v, m.as_ref(), VolumeFormat::PortableVolume)?;
        let s = v.shape();
        entries.push(IndexEntry {
            frame_id: v.frame_id.clone(),
            file,
            shape: [s.depth, s.height, s.width],
            has_mask: m.is_some(),
            phase: v.phase,
            format: FileFormat::PortableVolume,
        });
    }
    let mut files: Vec<String> = entries.iter().map(|e| e.file.clone()).collect();
    let json = serde_json::to_string_pretty(&DatasetIndex { frames: entries }).expect("index serializes");
    let path = dir.join(INDEX_FILE);
    std::fs::write(&path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    files.push(INDEX_FILE.to_string());
    Ok(files)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let index: DatasetIndex =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if index.frames.is_empty() {
        return Err(Error::Data(format!("{} lists no frames", path.display())));
    }
    let mut frames = Vec::with_capacity(index.frames.len());
    for e in &index.frames {
        let (mut v, m) = load_volume(&dir.join(&e.file), e.format.into())?;
        let declared = Shape3::new(e.shape[0], e.shape[1], e.shape[2]);
        if v.shape() != declared {
            return Err(Error::shape(format!("{}: index says {declared}, file holds {}", e.file, v.shape())));
        }
        if m.is_some() != e.has_mask {
            return Err(Error::Data(format!("{}: has_mask disagrees with the file", e.file)));
        }
        v.frame_id = e.frame_id.clone();
        v.phase = e.phase;
        frames.push((v, m));
    }
    Ok(Dataset { dir: dir.to_path_buf(), index, frames })
}
