use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NORMAL_LABEL: &str = "normal";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VideoRecord {
    pub id: String,
    pub feature_path: PathBuf,
    /// `"normal"` or an anomaly category name from the class catalog.
    pub label: String,
    pub split: Split,
    /// 0/1 per sampled frame.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_gt: Option<Vec<u8>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub original_frame_count: Option<usize>,
}

impl VideoRecord {
    pub fn is_normal(&self) -> bool {
        self.label == NORMAL_LABEL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub videos: Vec<VideoRecord>,
    pub feature_dim: usize,
    pub class_catalog_path: PathBuf,
    pub knowledge_bank_path: PathBuf,
    /// Directory relative paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut manifest: Manifest = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        manifest.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        manifest.validate(path)?;
        Ok(manifest)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_json(path, self)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    fn validate(&self, path: &Path) -> Result<()> {
        let mut seen = BTreeSet::new();
        for v in &self.videos {
            if !seen.insert(v.id.as_str()) {
                return Err(Error::load(path, format!("duplicate video id `{}`", v.id)));
            }
            if let Some(gt) = &v.frame_gt {
                if gt.iter().any(|&g| g > 1) {
                    return Err(Error::load(path, format!("frame_gt of `{}` is not 0/1", v.id)));
                }
                if v.is_normal() && gt.contains(&1) {
                    return Err(Error::load(
                        path,
                        format!("normal video `{}` has positive frames", v.id),
                    ));
                }
            }
            if v.stride == Some(0) {
                return Err(Error::load(path, format!("video `{}` has stride 0", v.id)));
            }
            let fp = self.resolve(&v.feature_path);
            if !fp.is_file() {
                return Err(Error::load(
                    path,
                    format!("feature file {} does not exist", fp.display()),
                ));
            }
        }
        for p in [&self.class_catalog_path, &self.knowledge_bank_path] {
            let full = self.resolve(p);
            if !full.is_file() {
                return Err(Error::load(path, format!("sidecar {} does not exist", full.display())));
            }
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &VideoRecord> {
        self.videos.iter().filter(move |v| v.split == split)
    }
}

pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}
