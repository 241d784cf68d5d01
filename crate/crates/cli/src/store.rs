//! Subject directories: `<root>/<id>/{volume.mgrid, labels.mgrid, landmarks.json}`.

use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use shaperefine::volgrid::{read_labels, read_volume, write_labels, write_volume};
use shaperefine::{Atlas, LabelGrid, LandmarkSet, VolumeGrid};

pub const VOLUME: &str = "volume.mgrid";
pub const LABELS: &str = "labels.mgrid";
pub const LANDMARKS: &str = "landmarks.json";

/// Subject ids under `root`, sorted: every subdirectory holding a volume or labels file.
pub fn subject_ids(root: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in std::fs::read_dir(root).with_context(|| format!("listing {}", root.display()))? {
        let entry = entry?;
        let p = entry.path();
        if p.is_dir() && (p.join(VOLUME).is_file() || p.join(LABELS).is_file()) {
            ids.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    ids.sort();
    Ok(ids)
}

pub struct SubjectDir {
    pub id: String,
    pub path: PathBuf,
}

impl SubjectDir {
    pub fn new(root: &Path, id: &str) -> Self {
        SubjectDir {
            id: id.to_string(),
            path: root.join(id),
        }
    }

    pub fn volume(&self) -> Result<VolumeGrid> {
        read_volume(self.path.join(VOLUME)).with_context(|| format!("{}: reading {VOLUME}", self.id))
    }

    pub fn labels(&self) -> Result<LabelGrid> {
        read_labels(self.path.join(LABELS)).with_context(|| format!("{}: reading {LABELS}", self.id))
    }

    pub fn has_landmarks(&self) -> bool {
        self.path.join(LANDMARKS).is_file()
    }

    pub fn landmarks(&self) -> Result<LandmarkSet> {
        LandmarkSet::read(self.path.join(LANDMARKS)).with_context(|| format!("{}: reading {LANDMARKS}", self.id))
    }

    pub fn atlas(&self) -> Result<Atlas> {
        Ok(Atlas::new(self.id.clone(), self.volume()?, self.labels()?, self.landmarks()?)?)
    }
}

/// Collects written files relative to the output root.
pub struct Writer {
    root: PathBuf,
}

impl Writer {
    pub fn new(root: &Path) -> Result<Self> {
        std::fs::create_dir_all(root).with_context(|| format!("creating {}", root.display()))?;
        Ok(Writer { root: root.to_path_buf() })
    }

    fn target(&self, rel: &str) -> Result<PathBuf> {
        let p = self.root.join(rel);
        if let Some(parent) = p.parent() {
            std::fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
        }
        Ok(p)
    }

    pub fn volume(&self, rel: &str, v: &VolumeGrid) -> Result<String> {
        write_volume(self.target(rel)?, v)?;
        Ok(rel.to_string())
    }

    pub fn labels(&self, rel: &str, l: &LabelGrid) -> Result<String> {
        write_labels(self.target(rel)?, l)?;
        Ok(rel.to_string())
    }

    pub fn text(&self, rel: &str, s: &str) -> Result<String> {
        let p = self.target(rel)?;
        std::fs::write(&p, s).with_context(|| format!("writing {}", p.display()))?;
        Ok(rel.to_string())
    }

    pub fn json<T: serde::Serialize>(&self, rel: &str, v: &T) -> Result<String> {
        self.text(rel, &(serde_json::to_string_pretty(v)? + "\n"))
    }

    pub fn landmarks(&self, rel: &str, l: &LandmarkSet) -> Result<String> {
        l.write(self.target(rel)?)?;
        Ok(rel.to_string())
    }

    pub fn path(&self, rel: &str) -> Result<PathBuf> {
        self.target(rel)
    }
}
