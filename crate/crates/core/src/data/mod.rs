//! Feature files, manifests, frame sampling, batching, and the synthetic
//! corpus generator.

mod manifest;
pub mod ovff;
mod sampling;
mod synthetic;

use std::path::Path;

use rayon::prelude::*;

pub use manifest::{read_json, write_json};
pub use manifest::{Manifest, Split, VideoRecord, NORMAL_LABEL};
pub use ovff::{read_features, write_features, FeatureSequence, DEFAULT_STRIDE};
pub use sampling::{epoch_batches, make_batch, sample_frames, sample_indices, MAX_TRAIN_LEN};
pub use synthetic::{gen_synthetic, SyntheticConfig, SyntheticCorpus};

use crate::error::{Error, Result};
use crate::model::{ClassCatalog, KnowledgeBank};

/// A manifest entry with its features loaded and its label resolved.
#[derive(Clone, Debug)]
pub struct Video {
    pub record: VideoRecord,
    pub features: FeatureSequence,
    /// Catalog index of the anomaly category; `None` for normal videos.
    pub class_index: Option<usize>,
}

impl Video {
    pub fn new(record: VideoRecord, mut features: FeatureSequence, catalog: &ClassCatalog) -> Result<Self> {
        let class_index = if record.is_normal() {
            None
        } else {
            Some(catalog.index_of(&record.label).ok_or_else(|| {
                Error::Label(format!("video `{}` has unknown category `{}`", record.id, record.label))
            })?)
        };
        if let Some(gt) = &record.frame_gt {
            if gt.len() != features.len() {
                return Err(Error::Label(format!(
                    "video `{}` has {} frames but {} ground-truth labels",
                    record.id,
                    features.len(),
                    gt.len()
                )));
            }
        }
        if let Some(stride) = record.stride {
            features.stride = stride;
        }
        features.original_frame_count = record.original_frame_count.unwrap_or(features.len() * features.stride);
        Ok(Self {
            record,
            features,
            class_index,
        })
    }

    pub fn is_normal(&self) -> bool {
        self.class_index.is_none()
    }
}

/// Everything a training or evaluation run reads, held in memory.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: Manifest,
    pub videos: Vec<Video>,
    pub catalog: ClassCatalog,
    pub bank: KnowledgeBank,
}

impl Corpus {
    pub fn load(manifest_path: impl AsRef<Path>) -> Result<Self> {
        Self::from_manifest(Manifest::load(manifest_path)?)
    }

    /// Loads the catalog, knowledge bank, and features a manifest points to.
    pub fn from_manifest(manifest: Manifest) -> Result<Self> {
        let catalog = ClassCatalog::load(manifest.resolve(&manifest.class_catalog_path))?;
        let bank = KnowledgeBank::load(manifest.resolve(&manifest.knowledge_bank_path))?;
        let videos = manifest
            .videos
            .par_iter()
            .map(|record| {
                let features = read_features(manifest.resolve(&record.feature_path))?;
                Video::new(record.clone(), features, &catalog)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_parts(manifest, videos, catalog, bank)
    }

    pub fn from_parts(
        manifest: Manifest,
        videos: Vec<Video>,
        catalog: ClassCatalog,
        bank: KnowledgeBank,
    ) -> Result<Self> {
        let c = manifest.feature_dim;
        let check = |what: &str, got: usize| {
            if got == c {
                Ok(())
            } else {
                Err(Error::shape(
                    "Corpus",
                    format!("{what} has dimension {got}, manifest says {c}"),
                ))
            }
        };
        check("class catalog", catalog.embeddings.cols())?;
        check("knowledge bank", bank.embeddings.cols())?;
        for v in &videos {
            check(&format!("video `{}`", v.record.id), v.features.dim())?;
        }
        Ok(Self {
            manifest,
            videos,
            catalog,
            bank,
        })
    }

    pub fn dim(&self) -> usize {
        self.manifest.feature_dim
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Video> {
        self.videos.iter().filter(move |v| v.record.split == split)
    }

    /// Indices of train-split abnormal videos.
    pub fn train_abnormal(&self) -> Vec<usize> {
        (0..self.videos.len())
            .filter(|&i| self.videos[i].record.split == Split::Train && !self.videos[i].is_normal())
            .collect()
    }

    pub fn train_normal(&self) -> Vec<(String, FeatureSequence)> {
        self.split(Split::Train)
            .filter(|v| v.is_normal())
            .map(|v| (v.record.id.clone(), v.features.clone()))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn written_corpus_loads_identically() {
        let cfg = SyntheticConfig {
            dim: 12,
            train_videos_per_class: 2,
            test_videos_per_class: 1,
            train_normal_videos: 3,
            test_normal_videos: 2,
            video_len: (10, 20),
            segment_len: (2, 5),
            ..Default::default()
        };
        let synth = gen_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = synth.write(dir.path()).unwrap();
        let loaded = Corpus::load(&manifest_path).unwrap();
        let memory = synth.to_corpus().unwrap();
        assert_eq!(loaded.catalog, memory.catalog);
        assert_eq!(loaded.bank, memory.bank);
        assert_eq!(loaded.videos.len(), memory.videos.len());
        for (a, b) in loaded.videos.iter().zip(&memory.videos) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.record, b.record);
            assert_eq!(a.class_index, b.class_index);
        }
    }

    #[test]
    fn unknown_label_rejected() {
        let synth = gen_synthetic(&SyntheticConfig {
            dim: 8,
            train_videos_per_class: 1,
            test_videos_per_class: 1,
            train_normal_videos: 1,
            test_normal_videos: 1,
            video_len: (8, 8),
            segment_len: (2, 2),
            ..Default::default()
        })
        .unwrap();
        let (mut record, features) = synth.videos.last().unwrap().clone();
        record.label = "Teleportation".into();
        assert!(matches!(
            Video::new(record, features, &synth.catalog),
            Err(Error::Label(_))
        ));
    }
}
