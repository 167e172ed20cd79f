use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::IoError;

/// One dataset frame. Relative paths resolve against the manifest's directory.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub frame_id: String,
    pub points: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub predictions: Option<PathBuf>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Manifest {
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Reads a `frame_id,points,labels,predictions` CSV; paths come back
    /// resolved against the manifest's own directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, IoError> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        let mut reader = csv::Reader::from_path(path)?;
        let mut entries = Vec::new();
        for rec in reader.deserialize::<ManifestEntry>() {
            let mut e = rec?;
            for p in [&mut e.points, &mut e.labels, &mut e.predictions] {
                if let Some(rel) = p.take() {
                    *p = (!rel.as_os_str().is_empty()).then(|| base.join(rel));
                }
            }
            entries.push(e);
        }
        Ok(Self { entries })
    }

    /// Writes the manifest, storing paths relative to its directory when possible.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), IoError> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(Path::new(""));
        if !base.as_os_str().is_empty() {
            std::fs::create_dir_all(base).map_err(|e| IoError::io(base, e))?;
        }
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            let rel = |p: &Option<PathBuf>| p.as_ref().map(|p| p.strip_prefix(base).unwrap_or(p).to_path_buf());
            w.serialize(ManifestEntry {
                frame_id: e.frame_id.clone(),
                points: rel(&e.points),
                labels: rel(&e.labels),
                predictions: rel(&e.predictions),
            })?;
        }
        w.flush().map_err(|e| IoError::io(path, e))
    }
}
