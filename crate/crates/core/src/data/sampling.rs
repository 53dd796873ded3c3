use rand::seq::SliceRandom;
use rand::Rng;

use super::manifest::{Manifest, Split, VideoRecord};
use super::ovff::FeatureSequence;
use crate::error::{Error, Result};

pub const MAX_TRAIN_LEN: usize = 256;

/// Order-preserving subset of at most `max_len` frame indices.
///
/// `[0, n)` is cut into `max_len` equal-width bins and one index is drawn
/// uniformly from each, so late frames stay represented.
pub fn sample_indices(n: usize, max_len: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if max_len == 0 {
        return Err(Error::Config("max_len must be at least 1".into()));
    }
    if n <= max_len {
        return Ok((0..n).collect());
    }
    Ok((0..max_len)
        .map(|b| {
            let lo = b * n / max_len;
            let hi = (b + 1) * n / max_len;
            rng.gen_range(lo..hi)
        })
        .collect())
}

pub fn sample_frames(seq: &FeatureSequence, max_len: usize, rng: &mut impl Rng) -> Result<FeatureSequence> {
    let idx = sample_indices(seq.len(), max_len, rng)?;
    if idx.len() == seq.len() {
        return Ok(seq.clone());
    }
    Ok(FeatureSequence {
        features: seq.features.select_rows(&idx)?,
        stride: seq.stride,
        original_frame_count: seq.original_frame_count,
    })
}

fn train_pools(manifest: &Manifest) -> (Vec<usize>, Vec<usize>) {
    let mut normals = Vec::new();
    let mut abnormals = Vec::new();
    for (i, v) in manifest.videos.iter().enumerate() {
        if v.split != Split::Train {
            continue;
        }
        if v.is_normal() {
            normals.push(i);
        } else {
            abnormals.push(i);
        }
    }
    (normals, abnormals)
}

/// One epoch of class-balanced batches, as indices into `manifest.videos`.
///
/// Each batch holds `batch_size / 2` normal then `batch_size / 2` abnormal
/// train videos; no video repeats within the epoch and a trailing partial
/// batch is dropped.
pub fn epoch_batches(manifest: &Manifest, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "batch size must be even and positive, got {batch_size}"
        )));
    }
    let half = batch_size / 2;
    let (mut normals, mut abnormals) = train_pools(manifest);
    if normals.len() < half || abnormals.len() < half {
        return Err(Error::Config(format!(
            "batch of {batch_size} needs {half} normal and {half} abnormal train videos, have {} and {}",
            normals.len(),
            abnormals.len()
        )));
    }
    normals.shuffle(rng);
    abnormals.shuffle(rng);
    let count = normals.len().min(abnormals.len()) / half;
    Ok((0..count)
        .map(|b| {
            let mut batch = normals[b * half..(b + 1) * half].to_vec();
            batch.extend_from_slice(&abnormals[b * half..(b + 1) * half]);
            batch
        })
        .collect())
}

/// A single balanced batch drawn without replacement.
pub fn make_batch(manifest: &Manifest, batch_size: usize, rng: &mut impl Rng) -> Result<Vec<VideoRecord>> {
    let batches = epoch_batches(manifest, batch_size, rng)?;
    Ok(batches[0].iter().map(|&i| manifest.videos[i].clone()).collect())
}
