//! Pseudo novel-anomaly synthesis in feature space.
//!
//! A snippet of anomaly features is spliced into a normal video at a random
//! position. Nothing is overwritten, so the frame labels are exact.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{read_features, read_json, sample_indices, write_features, write_json, FeatureSequence};
use crate::error::{Error, Result};
use crate::model::ClassCatalog;
use crate::numkernel::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SnippetSource {
    GeneratedImage,
    GeneratedVideo,
    SyntheticFixture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Snippet {
    pub id: String,
    pub features: FeatureSequence,
    pub category: String,
    pub source: SnippetSource,
}

#[derive(Serialize, Deserialize)]
struct SnippetSidecar {
    category: String,
    source: SnippetSource,
}

/// Anomaly snippets grouped by category name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SnippetBank {
    pub snippets: Vec<Snippet>,
}

impl SnippetBank {
    pub fn new(snippets: Vec<Snippet>) -> Self {
        Self { snippets }
    }

    /// Every snippet must name a novel class of `catalog` and match its dimension.
    pub fn validate(&self, catalog: &ClassCatalog) -> Result<()> {
        for s in &self.snippets {
            match catalog.index_of(&s.category) {
                Some(i) if !catalog.is_base[i] => {}
                Some(_) => {
                    return Err(Error::Label(format!(
                        "snippet `{}` targets base class `{}`; snippets must be novel",
                        s.id, s.category
                    )))
                }
                None => {
                    return Err(Error::Label(format!(
                        "snippet `{}` has unknown category `{}`",
                        s.id, s.category
                    )))
                }
            }
            if s.features.dim() != catalog.embeddings.cols() {
                return Err(Error::shape(
                    "SnippetBank",
                    format!(
                        "snippet `{}` has dimension {}, catalog {}",
                        s.id,
                        s.features.dim(),
                        catalog.embeddings.cols()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Distinct categories in first-appearance order.
    pub fn categories(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for s in &self.snippets {
            if !out.contains(&s.category) {
                out.push(s.category.clone());
            }
        }
        out
    }

    pub fn for_category(&self, category: &str) -> Vec<&Snippet> {
        self.snippets.iter().filter(|s| s.category == category).collect()
    }

    /// Writes `<id>.ovff` and `<id>.json` per snippet.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for s in &self.snippets {
            write_features(&s.features, dir.join(format!("{}.ovff", s.id)))?;
            write_json(
                dir.join(format!("{}.json", s.id)),
                &SnippetSidecar {
                    category: s.category.clone(),
                    source: s.source,
                },
            )?;
        }
        Ok(())
    }

    /// Reads every `*.json` sidecar with its sibling `.ovff`, ordered by file name.
    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut paths: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(|e| Error::io(dir, e))?
            .map(|entry| entry.map(|e| e.path()).map_err(|e| Error::io(dir, e)))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        let mut snippets = Vec::with_capacity(paths.len());
        for json in paths {
            let sidecar: SnippetSidecar = read_json(&json)?;
            let id = json
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::load(&json, "snippet file name is not UTF-8"))?
                .to_string();
            let features = read_features(json.with_extension("ovff"))?;
            snippets.push(Snippet {
                id,
                features,
                category: sidecar.category,
                source: sidecar.source,
            });
        }
        Ok(Self { snippets })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub normal_id: String,
    pub snippet_id: String,
    /// Row of the spliced sequence where the snippet starts.
    pub insert_at: usize,
    /// Rows of the spliced sequence kept by length capping, if any were dropped.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kept_indices: Option<Vec<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoVideo {
    pub id: String,
    pub features: FeatureSequence,
    pub frame_gt: Vec<u8>,
    pub category: String,
    pub provenance: Provenance,
}

impl PseudoVideo {
    /// The source normal sequence, recovered by dropping the positive rows.
    ///
    /// Only defined before length capping removed rows.
    pub fn remove_inserted(&self) -> Result<Matrix> {
        if self.provenance.kept_indices.is_some() {
            return Err(Error::Degenerate(format!(
                "pseudo video `{}` was sub-sampled; the source cannot be rebuilt",
                self.id
            )));
        }
        let keep: Vec<usize> = (0..self.frame_gt.len()).filter(|&i| self.frame_gt[i] == 0).collect();
        self.features.features.select_rows(&keep)
    }
}

/// `normal[..u] ++ snippet ++ normal[u..]` with labels `0^u 1^m 0^(n−u)`.
pub fn splice_at(normal_id: &str, normal: &FeatureSequence, snippet: &Snippet, u: usize) -> Result<PseudoVideo> {
    let (n, m) = (normal.len(), snippet.features.len());
    if normal.dim() != snippet.features.dim() {
        return Err(Error::shape(
            "splice_insert",
            format!(
                "normal dimension {} vs snippet {}",
                normal.dim(),
                snippet.features.dim()
            ),
        ));
    }
    if u > n {
        return Err(Error::Config(format!("insertion index {u} beyond {n} frames")));
    }
    let c = normal.dim();
    let (src, ins) = (normal.features.data(), snippet.features.features.data());
    let mut data = Vec::with_capacity((n + m) * c);
    data.extend_from_slice(&src[..u * c]);
    data.extend_from_slice(ins);
    data.extend_from_slice(&src[u * c..]);
    let mut frame_gt = vec![0u8; n + m];
    frame_gt[u..u + m].fill(1);
    let features =
        FeatureSequence::with_sampling(Matrix::new(n + m, c, data)?, normal.stride, (n + m) * normal.stride)?;
    Ok(PseudoVideo {
        id: format!("pseudo_{}_{}_{u}", normal_id, snippet.id),
        features,
        frame_gt,
        category: snippet.category.clone(),
        provenance: Provenance {
            normal_id: normal_id.to_string(),
            snippet_id: snippet.id.clone(),
            insert_at: u,
            kept_indices: None,
        },
    })
}

/// [`splice_at`] with `u` uniform over `0..=n`.
pub fn splice_insert(
    normal_id: &str,
    normal: &FeatureSequence,
    snippet: &Snippet,
    rng: &mut impl Rng,
) -> Result<PseudoVideo> {
    let u = rng.gen_range(0..=normal.len());
    splice_at(normal_id, normal, snippet, u)
}

/// Caps a pseudo video at `max_len` rows, keeping features and labels aligned.
pub fn cap_length(mut video: PseudoVideo, max_len: usize, rng: &mut impl Rng) -> Result<PseudoVideo> {
    let idx = sample_indices(video.frame_gt.len(), max_len, rng)?;
    if idx.len() == video.frame_gt.len() {
        return Ok(video);
    }
    video.features.features = video.features.features.select_rows(&idx)?;
    video.frame_gt = idx.iter().map(|&i| video.frame_gt[i]).collect();
    video.provenance.kept_indices = Some(idx);
    Ok(video)
}

/// `per_category` pseudo videos for each requested category, each from an
/// independent (normal, snippet, position) draw.
pub fn build_pseudo_set(
    normals: &[(String, FeatureSequence)],
    bank: &SnippetBank,
    categories: &[String],
    per_category: usize,
    max_len: usize,
    rng: &mut impl Rng,
) -> Result<Vec<PseudoVideo>> {
    if per_category == 0 {
        return Err(Error::Config("per_category must be at least 1".into()));
    }
    if normals.is_empty() {
        return Err(Error::Config("no normal videos to splice into".into()));
    }
    let mut out = Vec::with_capacity(categories.len() * per_category);
    for category in categories {
        let pool = bank.for_category(category);
        if pool.is_empty() {
            return Err(Error::Config(format!(
                "snippet bank has no snippets for category `{category}`"
            )));
        }
        for i in 0..per_category {
            let (normal_id, normal) = normals.choose(rng).expect("non-empty");
            let snippet = pool.choose(rng).expect("non-empty");
            let mut video = splice_insert(normal_id, normal, snippet, rng)?;
            video.id = format!("pseudo_{category}_{i:04}");
            out.push(cap_length(video, max_len, rng)?);
        }
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct PseudoRecord {
    id: String,
    feature_path: PathBuf,
    frame_gt: Vec<u8>,
    category: String,
    provenance: Provenance,
}

pub const PSEUDO_INDEX: &str = "pseudo.json";

/// Writes one OVFF per pseudo video plus a `pseudo.json` index with labels and provenance.
pub fn save_pseudo_set(set: &[PseudoVideo], dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(set.len());
    for v in set {
        let rel = PathBuf::from(format!("{}.ovff", v.id));
        write_features(&v.features, dir.join(&rel))?;
        records.push(PseudoRecord {
            id: v.id.clone(),
            feature_path: rel,
            frame_gt: v.frame_gt.clone(),
            category: v.category.clone(),
            provenance: v.provenance.clone(),
        });
    }
    let index = dir.join(PSEUDO_INDEX);
    write_json(&index, &records)?;
    Ok(index)
}

/// Reads a set written by [`save_pseudo_set`]; accepts the directory or the index file.
pub fn load_pseudo_set(path: impl AsRef<Path>) -> Result<Vec<PseudoVideo>> {
    let path = path.as_ref();
    let (dir, index) = if path.is_dir() {
        (path.to_path_buf(), path.join(PSEUDO_INDEX))
    } else {
        (
            path.parent().unwrap_or(Path::new(".")).to_path_buf(),
            path.to_path_buf(),
        )
    };
    let records: Vec<PseudoRecord> = read_json(&index)?;
    let mut seen = BTreeMap::new();
    records
        .into_iter()
        .map(|r| {
            if seen.insert(r.id.clone(), ()).is_some() {
                return Err(Error::load(&index, format!("duplicate pseudo id `{}`", r.id)));
            }
            let features = read_features(dir.join(&r.feature_path))?;
            if r.frame_gt.len() != features.len() || r.frame_gt.iter().any(|&g| g > 1) {
                return Err(Error::load(
                    &index,
                    format!("pseudo video `{}` has invalid frame labels", r.id),
                ));
            }
            if !r.frame_gt.contains(&1) {
                return Err(Error::load(
                    &index,
                    format!("pseudo video `{}` has no positive frame", r.id),
                ));
            }
            Ok(PseudoVideo {
                id: r.id,
                features,
                frame_gt: r.frame_gt,
                category: r.category,
                provenance: r.provenance,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn seq(n: usize, offset: f64) -> FeatureSequence {
        let data = (0..n * 3).map(|i| offset + i as f64).collect();
        FeatureSequence::new(Matrix::new(n, 3, data).unwrap()).unwrap()
    }

    fn snippet(id: &str, m: usize, category: &str) -> Snippet {
        Snippet {
            id: id.into(),
            features: seq(m, 1000.0),
            category: category.into(),
            source: SnippetSource::SyntheticFixture,
        }
    }

    #[test]
    fn boundaries() {
        let normal = seq(3, 0.0);
        let s = snippet("s", 2, "Arson");
        let head = splice_at("n", &normal, &s, 0).unwrap();
        assert_eq!(head.frame_gt, vec![1, 1, 0, 0, 0]);
        assert_eq!(head.features.features.row(0), s.features.features.row(0));
        let tail = splice_at("n", &normal, &s, 3).unwrap();
        assert_eq!(tail.frame_gt, vec![0, 0, 0, 1, 1]);
        assert_eq!(tail.features.features.row(4), s.features.features.row(1));
        assert!(splice_at("n", &normal, &s, 4).is_err());
    }

    #[test]
    fn exhaustive_small_splices() {
        for n in 1..=8 {
            for m in 1..=4 {
                let normal = seq(n, 0.0);
                let s = snippet("s", m, "Arson");
                for u in 0..=n {
                    let v = splice_at("n", &normal, &s, u).unwrap();
                    assert_eq!(v.features.len(), n + m);
                    assert_eq!(v.frame_gt.iter().map(|&g| g as usize).sum::<usize>(), m);
                    let first = v.frame_gt.iter().position(|&g| g == 1).unwrap();
                    assert_eq!(first, u);
                    assert!(v.frame_gt[first..first + m].iter().all(|&g| g == 1));
                    assert_eq!(v.remove_inserted().unwrap(), normal.features);
                    let inserted: Vec<usize> = (u..u + m).collect();
                    assert_eq!(v.features.features.select_rows(&inserted).unwrap(), s.features.features);
                }
            }
        }
    }

    #[test]
    fn dim_mismatch_rejected() {
        let normal = FeatureSequence::new(Matrix::zeros(4, 2)).unwrap();
        assert!(matches!(
            splice_at("n", &normal, &snippet("s", 2, "Arson"), 0),
            Err(Error::Shape { .. })
        ));
    }

    fn bank() -> SnippetBank {
        SnippetBank::new(vec![
            snippet("a0", 2, "Arson"),
            snippet("a1", 3, "Arson"),
            snippet("e0", 1, "Explosion"),
        ])
    }

    #[test]
    fn pseudo_set_counts_and_determinism() {
        let normals: Vec<_> = (0..4).map(|i| (format!("n{i}"), seq(5 + i, i as f64))).collect();
        let cats = vec!["Arson".to_string(), "Explosion".to_string()];
        let a = build_pseudo_set(&normals, &bank(), &cats, 3, 256, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = build_pseudo_set(&normals, &bank(), &cats, 3, 256, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        assert_eq!(a.len(), 6);
        assert_eq!(
            a.iter().map(|v| &v.provenance).collect::<Vec<_>>(),
            b.iter().map(|v| &v.provenance).collect::<Vec<_>>()
        );
        assert!(a[..3].iter().all(|v| v.category == "Arson"));
        let err = build_pseudo_set(
            &normals,
            &bank(),
            &["Riot".into()],
            1,
            256,
            &mut ChaCha8Rng::seed_from_u64(4),
        );
        assert!(matches!(err, Err(Error::Config(_))));
        assert!(build_pseudo_set(&normals, &bank(), &cats, 0, 256, &mut ChaCha8Rng::seed_from_u64(4)).is_err());
    }

    #[test]
    fn capping_keeps_labels_aligned() {
        let normal = seq(20, 0.0);
        let s = snippet("s", 4, "Arson");
        let full = splice_at("n", &normal, &s, 7).unwrap();
        let capped = cap_length(full.clone(), 8, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let kept = capped.provenance.kept_indices.clone().unwrap();
        assert_eq!(kept.len(), 8);
        for (i, &src) in kept.iter().enumerate() {
            assert_eq!(capped.frame_gt[i], full.frame_gt[src]);
            assert_eq!(capped.features.features.row(i), full.features.features.row(src));
        }
        assert!(capped.remove_inserted().is_err());
    }

    #[test]
    fn bank_and_set_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let b = bank();
        b.save_dir(dir.path().join("snip")).unwrap();
        let loaded = SnippetBank::load_dir(dir.path().join("snip")).unwrap();
        assert_eq!(loaded.snippets.len(), 3);
        assert_eq!(loaded.snippets[0].id, "a0");
        assert_eq!(loaded.snippets[2].category, "Explosion");
        assert_eq!(loaded.snippets[1].features.features, b.snippets[1].features.features);

        let normals = vec![("n0".to_string(), seq(6, 0.0))];
        let set = build_pseudo_set(
            &normals,
            &b,
            &["Arson".into()],
            2,
            256,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let index = save_pseudo_set(&set, dir.path().join("pseudo")).unwrap();
        let back = load_pseudo_set(&index).unwrap();
        assert_eq!(back, set);
        assert_eq!(load_pseudo_set(dir.path().join("pseudo")).unwrap(), set);
    }
}
