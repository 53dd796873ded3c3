//! Desk-scale stand-in for real feature corpora.
//!
//! Frames are isotropic Gaussian noise around a normal mean. Each anomaly
//! class owns a unit direction orthogonal to the normal mean and to the other
//! classes; an abnormal video is a normal sequence whose frames in one
//! contiguous segment are shifted along that direction by
//! `separation · noise_scale`. Text-side embeddings are unit-normalized noisy
//! copies of the same directions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, Split, VideoRecord, NORMAL_LABEL};
use super::ovff::{write_features, FeatureSequence, DEFAULT_STRIDE};
use super::{Corpus, Video};
use crate::error::{Error, Result};
use crate::model::{ClassCatalog, KnowledgeBank, KnowledgeGroup};
use crate::nas::{Snippet, SnippetSource};
use crate::numkernel::Matrix;

const BASE_NAMES: [&str; 6] = ["Abuse", "Assault", "Burglary", "RoadAccidents", "Robbery", "Stealing"];
const NOVEL_NAMES: [&str; 7] = [
    "Arson",
    "Explosion",
    "Fighting",
    "Shooting",
    "Vandalism",
    "Arrest",
    "Shoplifting",
];
const NORMAL_PHRASES: [&str; 8] = [
    "street",
    "park",
    "shopping hall",
    "office",
    "walking",
    "running",
    "working",
    "talking",
];
const ABNORMAL_PHRASES: [&str; 8] = [
    "explosion",
    "burst",
    "firelight",
    "smoke",
    "falling",
    "chasing",
    "breaking",
    "struggling",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub dim: usize,
    pub base_classes: usize,
    pub novel_classes: usize,
    pub train_videos_per_class: usize,
    pub test_videos_per_class: usize,
    pub train_normal_videos: usize,
    pub test_normal_videos: usize,
    /// Anomaly shift in units of `noise_scale`.
    pub separation: f64,
    /// Per-dimension standard deviation of frame noise.
    pub noise_scale: f64,
    pub normal_mean_norm: f64,
    /// Per-video constant offset (scene appearance), per-dimension std.
    pub scene_scale: f64,
    pub video_len: (usize, usize),
    pub segment_len: (usize, usize),
    /// Norm of the noise added to text directions before normalization.
    pub text_noise: f64,
    pub knowledge_per_group: usize,
    pub snippets_per_novel_class: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            base_classes: 3,
            novel_classes: 2,
            train_videos_per_class: 48,
            test_videos_per_class: 12,
            train_normal_videos: 144,
            test_normal_videos: 36,
            separation: 3.0,
            noise_scale: 0.1,
            normal_mean_norm: 1.0,
            scene_scale: 0.02,
            video_len: (32, 96),
            segment_len: (8, 24),
            text_noise: 1.0,
            knowledge_per_group: 8,
            snippets_per_novel_class: 8,
            seed: 7,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let k = self.base_classes + self.novel_classes;
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.into())) };
        check(self.base_classes >= 1, "at least one base class")?;
        check(self.dim > k, "dim must exceed the number of classes")?;
        check(
            self.separation >= 0.0 && self.separation.is_finite(),
            "separation must be >= 0",
        )?;
        check(self.noise_scale > 0.0, "noise_scale must be positive")?;
        check(self.scene_scale >= 0.0 && self.text_noise >= 0.0, "scales must be >= 0")?;
        check(
            self.video_len.0 >= 1 && self.video_len.0 <= self.video_len.1 && self.video_len.1 <= 256,
            "video_len must satisfy 1 <= min <= max <= 256",
        )?;
        check(
            self.segment_len.0 >= 1 && self.segment_len.0 <= self.segment_len.1,
            "segment_len must satisfy 1 <= min <= max",
        )?;
        check(
            self.segment_len.1 <= self.video_len.0,
            "segments must fit in the shortest video",
        )?;
        check(self.knowledge_per_group >= 1, "knowledge_per_group must be >= 1")?;
        Ok(())
    }
}

/// A generated corpus held in memory, plus the ground-truth geometry.
#[derive(Clone, Debug)]
pub struct SyntheticCorpus {
    pub config: SyntheticConfig,
    pub videos: Vec<(VideoRecord, FeatureSequence)>,
    pub catalog: ClassCatalog,
    pub bank: KnowledgeBank,
    pub snippets: Vec<Snippet>,
    /// k×c unit class directions in catalog order.
    pub directions: Matrix,
    pub normal_mean: Vec<f64>,
}

fn round_f32(v: f64) -> f64 {
    v as f32 as f64
}

fn gaussian(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    for x in v.iter_mut() {
        *x /= n;
    }
}

/// `count` orthonormal vectors via Gram-Schmidt on Gaussian draws.
fn orthonormal(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v = gaussian(rng, dim);
        for b in &basis {
            let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            for (x, y) in v.iter_mut().zip(b) {
                *x -= dot * y;
            }
        }
        if v.iter().map(|x| x * x).sum::<f64>() > 1e-6 {
            normalize(&mut v);
            basis.push(v);
        }
    }
    basis
}

/// Unit-normalized `direction + text_noise · z`, with z drawn uniformly on the sphere.
fn noisy_text(rng: &mut ChaCha8Rng, direction: &[f64], text_noise: f64) -> Vec<f64> {
    let mut z = gaussian(rng, direction.len());
    normalize(&mut z);
    let mut v: Vec<f64> = direction.iter().zip(&z).map(|(d, n)| d + text_noise * n).collect();
    normalize(&mut v);
    v
}

fn class_names(cfg: &SyntheticConfig) -> Vec<String> {
    let pick = |names: &[&str], i: usize, prefix: &str| {
        names
            .get(i)
            .map(|s| s.to_string())
            .unwrap_or_else(|| format!("{prefix}{i}"))
    };
    (0..cfg.base_classes)
        .map(|i| pick(&BASE_NAMES, i, "Base"))
        .chain((0..cfg.novel_classes).map(|i| pick(&NOVEL_NAMES, i, "Novel")))
        .collect()
}

struct FrameSampler<'a> {
    cfg: &'a SyntheticConfig,
    normal_mean: &'a [f64],
}

impl FrameSampler<'_> {
    fn normal_frames(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        let scene: Vec<f64> = gaussian(rng, self.cfg.dim)
            .into_iter()
            .map(|v| v * self.cfg.scene_scale)
            .collect();
        (0..n)
            .map(|_| {
                let noise = gaussian(rng, self.cfg.dim);
                self.normal_mean
                    .iter()
                    .zip(&scene)
                    .zip(noise)
                    .map(|((m, s), z)| m + s + self.cfg.noise_scale * z)
                    .collect()
            })
            .collect()
    }

    fn shift(&self, frame: &mut [f64], direction: &[f64]) {
        let amount = self.cfg.separation * self.cfg.noise_scale;
        for (x, d) in frame.iter_mut().zip(direction) {
            *x += amount * d;
        }
    }
}

fn to_sequence(frames: Vec<Vec<f64>>) -> Result<FeatureSequence> {
    let rows = frames.len();
    let cols = frames.first().map_or(0, Vec::len);
    let data = frames.into_iter().flatten().map(round_f32).collect();
    FeatureSequence::new(Matrix::new(rows, cols, data)?)
}

fn to_matrix(rows: Vec<Vec<f64>>) -> Result<Matrix> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    // rows arrive unit-norm; f32 rounding keeps them within ~1e-7 of that
    Matrix::new(r, c, rows.into_iter().flatten().map(round_f32).collect())
}

pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticCorpus> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let k = cfg.base_classes + cfg.novel_classes;
    let basis = orthonormal(&mut rng, k + 1, cfg.dim);
    let normal_mean: Vec<f64> = basis[0].iter().map(|v| v * cfg.normal_mean_norm).collect();
    let directions = &basis[1..];
    let names = class_names(cfg);
    let is_base: Vec<bool> = (0..k).map(|i| i < cfg.base_classes).collect();

    let class_rows: Vec<Vec<f64>> = directions
        .iter()
        .map(|d| noisy_text(&mut rng, d, cfg.text_noise))
        .collect();
    let catalog = ClassCatalog::new(names.clone(), to_matrix(class_rows)?, is_base.clone())?;

    let mut bank_rows = Vec::new();
    let mut groups = Vec::new();
    let mut phrases = Vec::new();
    for i in 0..cfg.knowledge_per_group {
        bank_rows.push(noisy_text(&mut rng, &basis[0], cfg.text_noise));
        groups.push(KnowledgeGroup::Normal);
        phrases.push(NORMAL_PHRASES[i % NORMAL_PHRASES.len()].to_string());
    }
    for i in 0..cfg.knowledge_per_group {
        bank_rows.push(noisy_text(&mut rng, &directions[i % k], cfg.text_noise));
        groups.push(KnowledgeGroup::Abnormal);
        phrases.push(ABNORMAL_PHRASES[i % ABNORMAL_PHRASES.len()].to_string());
    }
    let bank = KnowledgeBank::new(to_matrix(bank_rows)?, groups, phrases)?;

    let sampler = FrameSampler {
        cfg,
        normal_mean: &normal_mean,
    };
    let mut videos = Vec::new();
    let mut push_video = |rng: &mut ChaCha8Rng, id: String, class: Option<usize>, split: Split| -> Result<()> {
        let n = rng.gen_range(cfg.video_len.0..=cfg.video_len.1);
        let mut frames = sampler.normal_frames(rng, n);
        let mut gt = vec![0u8; n];
        if let Some(c) = class {
            let len = rng.gen_range(cfg.segment_len.0..=cfg.segment_len.1);
            let start = rng.gen_range(0..=n - len);
            for t in start..start + len {
                sampler.shift(&mut frames[t], &directions[c]);
                gt[t] = 1;
            }
        }
        let features = to_sequence(frames)?;
        let record = VideoRecord {
            feature_path: PathBuf::from(format!("features/{id}.ovff")),
            id,
            label: class.map_or(NORMAL_LABEL.to_string(), |c| names[c].clone()),
            split,
            frame_gt: Some(gt),
            stride: Some(DEFAULT_STRIDE),
            original_frame_count: Some(n * DEFAULT_STRIDE),
        };
        videos.push((record, features));
        Ok(())
    };

    for i in 0..cfg.train_normal_videos {
        push_video(&mut rng, format!("normal_train_{i:04}"), None, Split::Train)?;
    }
    for c in 0..cfg.base_classes {
        for i in 0..cfg.train_videos_per_class {
            push_video(&mut rng, format!("{}_train_{i:04}", names[c]), Some(c), Split::Train)?;
        }
    }
    for i in 0..cfg.test_normal_videos {
        push_video(&mut rng, format!("normal_test_{i:04}"), None, Split::Test)?;
    }
    for c in 0..k {
        for i in 0..cfg.test_videos_per_class {
            push_video(&mut rng, format!("{}_test_{i:04}", names[c]), Some(c), Split::Test)?;
        }
    }

    let mut snippets = Vec::new();
    for c in cfg.base_classes..k {
        for i in 0..cfg.snippets_per_novel_class {
            let len = rng.gen_range(cfg.segment_len.0..=cfg.segment_len.1);
            let mut frames = sampler.normal_frames(&mut rng, len);
            for f in &mut frames {
                sampler.shift(f, &directions[c]);
            }
            snippets.push(Snippet {
                id: format!("{}_snippet_{i:03}", names[c]),
                features: to_sequence(frames)?,
                category: names[c].clone(),
                source: SnippetSource::SyntheticFixture,
            });
        }
    }

    let directions = Matrix::new(k, cfg.dim, directions.concat())?;
    Ok(SyntheticCorpus {
        config: cfg.clone(),
        videos,
        catalog,
        bank,
        snippets,
        directions,
        normal_mean,
    })
}

impl SyntheticCorpus {
    /// In-memory corpus identical to what [`Corpus::load`] returns for the
    /// written files (all values are f32-representable).
    pub fn to_corpus(&self) -> Result<Corpus> {
        let manifest = self.manifest(PathBuf::new());
        let videos = self
            .videos
            .iter()
            .map(|(r, f)| Video::new(r.clone(), f.clone(), &self.catalog))
            .collect::<Result<Vec<_>>>()?;
        Corpus::from_parts(manifest, videos, self.catalog.clone(), self.bank.clone())
    }

    fn manifest(&self, base_dir: PathBuf) -> Manifest {
        Manifest {
            videos: self.videos.iter().map(|(r, _)| r.clone()).collect(),
            feature_dim: self.config.dim,
            class_catalog_path: "catalog.json".into(),
            knowledge_bank_path: "knowledge.json".into(),
            base_dir,
        }
    }

    /// Writes the manifest, features, sidecars, and snippet bank under `dir`;
    /// returns the manifest path.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let dir = dir.as_ref();
        let features_dir = dir.join("features");
        fs::create_dir_all(&features_dir).map_err(|e| Error::io(&features_dir, e))?;
        for (record, seq) in &self.videos {
            write_features(seq, dir.join(&record.feature_path))?;
        }
        self.catalog.save(dir.join("catalog.json"))?;
        self.bank.save(dir.join("knowledge.json"))?;
        crate::nas::SnippetBank::new(self.snippets.clone()).save_dir(dir.join("snippets"))?;
        let manifest = self.manifest(dir.to_path_buf());
        let path = dir.join("manifest.json");
        manifest.save(&path)?;
        Ok(path)
    }

    /// Projection-threshold oracle: a frame's score is its largest
    /// projection onto any class direction.
    pub fn projection_score(&self, frame: &[f64]) -> f64 {
        (0..self.directions.rows())
            .map(|k| {
                self.directions
                    .row(k)
                    .iter()
                    .zip(frame)
                    .zip(&self.normal_mean)
                    .map(|((d, x), m)| d * (x - m))
                    .sum::<f64>()
            })
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            dim: 16,
            train_videos_per_class: 4,
            test_videos_per_class: 2,
            train_normal_videos: 6,
            test_normal_videos: 3,
            video_len: (24, 40),
            segment_len: (4, 8),
            ..Default::default()
        }
    }

    #[test]
    fn catalog_and_split_contract() {
        let corpus = gen_synthetic(&small()).unwrap();
        assert_eq!(corpus.catalog.len(), 5);
        assert_eq!(corpus.catalog.base_indices().len(), 3);
        for (r, f) in &corpus.videos {
            let class = corpus.catalog.index_of(&r.label);
            if r.split == Split::Train {
                assert!(r.is_normal() || corpus.catalog.is_base[class.unwrap()]);
            }
            let gt = r.frame_gt.as_ref().unwrap();
            assert_eq!(gt.len(), f.len());
            if r.is_normal() {
                assert!(gt.iter().all(|&g| g == 0));
            } else {
                let ones: Vec<usize> = (0..gt.len()).filter(|&i| gt[i] == 1).collect();
                assert!(!ones.is_empty());
                assert_eq!(ones.last().unwrap() - ones[0] + 1, ones.len(), "contiguous");
            }
        }
        let train_novel = corpus
            .videos
            .iter()
            .filter(|(r, _)| r.split == Split::Train && !r.is_normal())
            .filter(|(r, _)| !corpus.catalog.is_base[corpus.catalog.index_of(&r.label).unwrap()])
            .count();
        assert_eq!(train_novel, 0);
        assert!(corpus
            .snippets
            .iter()
            .all(|s| s.category == "Arson" || s.category == "Explosion"));
    }

    #[test]
    fn directions_are_orthonormal() {
        let corpus = gen_synthetic(&small()).unwrap();
        let d = &corpus.directions;
        for i in 0..d.rows() {
            for j in 0..d.rows() {
                let dot: f64 = d.row(i).iter().zip(d.row(j)).map(|(a, b)| a * b).sum();
                assert!((dot - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
            let dm: f64 = d.row(i).iter().zip(&corpus.normal_mean).map(|(a, b)| a * b).sum();
            assert!(dm.abs() < 1e-12);
        }
        for n in corpus.bank.embeddings.l2_norm_rows() {
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        let a = gen_synthetic(&small()).unwrap();
        let b = gen_synthetic(&small()).unwrap();
        assert_eq!(a.videos, b.videos);
        assert_eq!(a.catalog, b.catalog);
        let c = gen_synthetic(&SyntheticConfig { seed: 8, ..small() }).unwrap();
        assert_ne!(a.videos[0].1, c.videos[0].1);
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(gen_synthetic(&SyntheticConfig {
            noise_scale: 0.0,
            ..small()
        })
        .is_err());
        assert!(gen_synthetic(&SyntheticConfig {
            video_len: (10, 300),
            ..small()
        })
        .is_err());
        assert!(gen_synthetic(&SyntheticConfig {
            segment_len: (4, 30),
            ..small()
        })
        .is_err());
        assert!(gen_synthetic(&SyntheticConfig { dim: 5, ..small() }).is_err());
    }
}
