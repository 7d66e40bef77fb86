//! Run manifests, cost accounting and figures.

mod cost;
mod render;

pub use cost::{cost_report, pooling_flops, slice_flops, CostReport, MemberCost};
pub use render::{heatmap, overlay_panel, render_frame, slice_label, HeatmapInfo, RenderSummary, SliceImage, PALETTE, SCALE};

use std::path::Path;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Content hash of one blob, framed like a git object.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// Hash over named blobs. Order-sensitive, names included.
pub fn tree_hash<'a>(entries: impl IntoIterator<Item = (&'a str, &'a [u8])>) -> String {
    let mut h = Sha256::new();
    for (name, bytes) in entries {
        h.update(format!("{} {}\n", blob_hash(bytes), name).as_bytes());
    }
    hex::encode(h.finalize())
}

/// Record of one command invocation, written as `manifest.json` next to its
/// outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: serde_json::Value,
    pub seed: u64,
    /// [`tree_hash`] of every input file.
    pub input_hash: String,
    /// Hash of command, config, seed and inputs. Equal keys produce equal
    /// outputs.
    pub run_key: String,
    /// Written files, relative to the output directory.
    pub outputs: Vec<String>,
    pub wall_clock_secs: f64,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value, seed: u64, input_hash: String) -> Self {
        let key_src = format!("{command}\n{config}\n{seed}\n{input_hash}");
        RunManifest {
            command: command.to_string(),
            config,
            seed,
            input_hash,
            run_key: blob_hash(key_src.as_bytes()),
            outputs: Vec::new(),
            wall_clock_secs: 0.0,
        }
    }

    pub fn finish(mut self, mut outputs: Vec<String>, elapsed: Duration) -> Self {
        outputs.sort();
        outputs.dedup();
        self.outputs = outputs;
        self.wall_clock_secs = elapsed.as_secs_f64();
        self
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).expect("manifest serializes");
        let path = dir.join("manifest.json");
        std::fs::write(&path, json).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn blob_hash_frames_length() {
        assert_ne!(blob_hash(b"ab"), blob_hash(b"ab\0"));
        assert_eq!(blob_hash(b""), blob_hash(b""));
        assert_eq!(blob_hash(b"x").len(), 64);
    }

    #[test]
    fn tree_hash_sees_names_and_order() {
        let a = tree_hash([("a", &b"1"[..]), ("b", &b"2"[..])]);
        assert_ne!(a, tree_hash([("b", &b"2"[..]), ("a", &b"1"[..])]));
        assert_ne!(a, tree_hash([("a", &b"1"[..]), ("c", &b"2"[..])]));
        assert_eq!(a, tree_hash([("a", &b"1"[..]), ("b", &b"2"[..])]));
    }

    #[test]
    fn run_key_ignores_duration() {
        let m = RunManifest::new("train", serde_json::json!({"x": 1}), 3, "h".into());
        let a = m.clone().finish(vec!["b".into(), "a".into()], Duration::from_secs(1));
        let b = m.finish(vec!["a".into(), "b".into()], Duration::from_secs(9));
        assert_eq!(a.run_key, b.run_key);
        assert_eq!(a.outputs, b.outputs);
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        assert_eq!(RunManifest::read(&dir.path().join("manifest.json")).unwrap(), a);
    }
}
