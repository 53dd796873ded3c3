use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::ovff::{read_matrix, write_matrix};
use crate::data::{read_json, write_json};
use crate::error::{Error, Result};
use crate::numkernel::Matrix;

/// Contrastive temperature 0.07, applied as a multiplier.
pub const LOGIT_SCALE: f64 = 1.0 / 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum KnowledgeGroup {
    Normal,
    Abnormal,
}

/// Phrase embeddings injected into frame features. The embeddings here are
/// the initial values; the trained copy lives in [`super::ModelParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct KnowledgeBank {
    pub embeddings: Matrix,
    pub groups: Vec<KnowledgeGroup>,
    pub phrases: Vec<String>,
}

#[derive(Serialize, Deserialize)]
struct KnowledgeBankFile {
    phrases: Vec<String>,
    groups: Vec<KnowledgeGroup>,
    embeddings_path: PathBuf,
}

impl KnowledgeBank {
    pub fn new(embeddings: Matrix, groups: Vec<KnowledgeGroup>, phrases: Vec<String>) -> Result<Self> {
        if groups.len() != embeddings.rows() || phrases.len() != embeddings.rows() {
            return Err(Error::shape(
                "KnowledgeBank",
                format!(
                    "{} embeddings, {} groups, {} phrases",
                    embeddings.rows(),
                    groups.len(),
                    phrases.len()
                ),
            ));
        }
        let bank = Self {
            embeddings,
            groups,
            phrases,
        };
        if bank.embeddings.rows() < 2
            || bank.indices(KnowledgeGroup::Normal).is_empty()
            || bank.indices(KnowledgeGroup::Abnormal).is_empty()
        {
            return Err(Error::Config(
                "knowledge bank needs both normal and abnormal entries".into(),
            ));
        }
        Ok(bank)
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn indices(&self, group: KnowledgeGroup) -> Vec<usize> {
        self.groups
            .iter()
            .enumerate()
            .filter_map(|(i, g)| (*g == group).then_some(i))
            .collect()
    }

    pub fn load(json_path: impl AsRef<Path>) -> Result<Self> {
        let json_path = json_path.as_ref();
        let file: KnowledgeBankFile = read_json(json_path)?;
        let embeddings = read_matrix(sibling(json_path, &file.embeddings_path))?;
        Self::new(embeddings, file.groups, file.phrases).map_err(|e| Error::load(json_path, e.to_string()))
    }

    /// Writes `<stem>.json` and the embeddings as `<stem>.ovff` next to it.
    pub fn save(&self, json_path: impl AsRef<Path>) -> Result<()> {
        let json_path = json_path.as_ref();
        let ovff = json_path.with_extension("ovff");
        write_matrix(&self.embeddings, &ovff)?;
        write_json(
            json_path,
            &KnowledgeBankFile {
                phrases: self.phrases.clone(),
                groups: self.groups.clone(),
                embeddings_path: file_name(&ovff),
            },
        )
    }
}

/// Frozen category text embeddings with base/novel flags.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassCatalog {
    pub class_names: Vec<String>,
    /// k×c, unit-norm rows.
    pub embeddings: Matrix,
    pub is_base: Vec<bool>,
    pub logit_scale: f64,
}

fn default_logit_scale() -> f64 {
    LOGIT_SCALE
}

#[derive(Serialize, Deserialize)]
struct ClassCatalogFile {
    class_names: Vec<String>,
    is_base: Vec<bool>,
    embeddings_path: PathBuf,
    #[serde(default = "default_logit_scale")]
    logit_scale: f64,
}

impl ClassCatalog {
    /// Rows are re-normalized; they must already be unit-norm to within 1e-4
    /// (f32 storage).
    pub fn new(class_names: Vec<String>, embeddings: Matrix, is_base: Vec<bool>) -> Result<Self> {
        let k = class_names.len();
        if embeddings.rows() != k || is_base.len() != k {
            return Err(Error::shape(
                "ClassCatalog",
                format!("{k} names, {} embeddings, {} flags", embeddings.rows(), is_base.len()),
            ));
        }
        if !is_base.iter().any(|&b| b) {
            return Err(Error::Config("class catalog needs at least one base class".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for name in &class_names {
            if name == crate::data::NORMAL_LABEL || !seen.insert(name.as_str()) {
                return Err(Error::Config(format!("invalid or duplicate class name `{name}`")));
            }
        }
        let norms = embeddings.l2_norm_rows();
        if let Some(r) = norms.iter().position(|n| (n - 1.0).abs() > 1e-4) {
            return Err(Error::Config(format!(
                "class embedding `{}` has norm {}, expected 1",
                class_names[r], norms[r]
            )));
        }
        let mut data = embeddings.into_data();
        let c = data.len() / k.max(1);
        for (r, n) in norms.iter().enumerate() {
            for v in &mut data[r * c..(r + 1) * c] {
                *v /= n;
            }
        }
        Ok(Self {
            class_names,
            embeddings: Matrix::new(k, c, data)?,
            is_base,
            logit_scale: LOGIT_SCALE,
        })
    }

    pub fn len(&self) -> usize {
        self.class_names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.class_names.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|n| n == name)
    }

    pub fn base_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.is_base[i]).collect()
    }

    pub fn novel_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.is_base[i]).collect()
    }

    pub fn all_indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    pub fn load(json_path: impl AsRef<Path>) -> Result<Self> {
        let json_path = json_path.as_ref();
        let file: ClassCatalogFile = read_json(json_path)?;
        let embeddings = read_matrix(sibling(json_path, &file.embeddings_path))?;
        let mut catalog =
            Self::new(file.class_names, embeddings, file.is_base).map_err(|e| Error::load(json_path, e.to_string()))?;
        catalog.logit_scale = file.logit_scale;
        Ok(catalog)
    }

    pub fn save(&self, json_path: impl AsRef<Path>) -> Result<()> {
        let json_path = json_path.as_ref();
        let ovff = json_path.with_extension("ovff");
        write_matrix(&self.embeddings, &ovff)?;
        write_json(
            json_path,
            &ClassCatalogFile {
                class_names: self.class_names.clone(),
                is_base: self.is_base.clone(),
                embeddings_path: file_name(&ovff),
                logit_scale: self.logit_scale,
            },
        )
    }
}

fn sibling(json_path: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        json_path.parent().unwrap_or(Path::new("")).join(p)
    }
}

fn file_name(p: &Path) -> PathBuf {
    PathBuf::from(p.file_name().expect("path with file name"))
}
