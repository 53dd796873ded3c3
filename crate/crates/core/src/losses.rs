//! Training objectives.
//!
//! Each loss has a tape form used for training and a plain form over slices.
//! Probabilities are clamped to `[1e-7, 1 − 1e-7]` before any logarithm.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{KnowledgeBank, KnowledgeGroup};
use crate::numkernel::{top_k_indices, Matrix, Tape, Var};

pub const PROB_CLAMP: f64 = 1e-7;
/// Temperature 0.07 of the normal/abnormal knowledge softmax, as a multiplier.
pub const SIM_SCALE: f64 = 1.0 / 0.07;
/// Fraction of each knowledge group averaged per frame.
pub const KNOWLEDGE_TOP_FRACTION: f64 = 0.1;

/// Top-K size for an abnormal video of `n` frames: `max(1, ceil(n / 16))`.
pub fn abnormal_top_k(n: usize) -> usize {
    n.div_ceil(16).max(1)
}

/// Mean of the `k` largest entries of an n×1 column; 1×1.
pub fn tape_topk_mean(tape: &mut Tape, p: Var, k: usize) -> Result<Var> {
    let n = tape.value(p).rows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("top-k size {k} outside 1..={n}")));
    }
    let row = tape.transpose(p)?;
    tape.row_top_k_mean(row, k)
}

/// Video-level BCE on `sigmoid(topk_mean(p, K))`, K = n for normal videos.
pub fn tape_video_bce(tape: &mut Tape, p: Var, is_abnormal: bool) -> Result<Var> {
    let n = tape.value(p).rows();
    if n == 0 {
        return Err(Error::Degenerate("video_bce on an empty video".into()));
    }
    let k = if is_abnormal { abnormal_top_k(n) } else { n };
    let score = tape_topk_mean(tape, p, k)?;
    let prob = tape.sigmoid(score)?;
    let prob = tape.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let target = if is_abnormal {
        prob
    } else {
        tape.affine(prob, -1.0, 1.0)?
    };
    let log = tape.log(target)?;
    tape.scale(log, -1.0)
}

/// Cross entropy of a 1×k logit row restricted to `label_space`.
pub fn tape_class_ce(tape: &mut Tape, logits: Var, label_space: &[usize], target: usize) -> Result<Var> {
    let k = tape.value(logits).cols();
    let pos = label_space
        .iter()
        .position(|&c| c == target)
        .ok_or_else(|| Error::Label(format!("class {target} is not in the label space {label_space:?}")))?;
    if label_space.iter().any(|&c| c >= k) {
        return Err(Error::Label(format!("label space {label_space:?} exceeds {k} classes")));
    }
    let restricted = tape.select_cols(logits, label_space)?;
    let log_probs = tape.row_log_softmax(restricted)?;
    let picked = tape.select_cols(log_probs, &[pos])?;
    tape.scale(picked, -1.0)
}

/// Mean frame-level BCE against 0/1 labels.
pub fn tape_frame_bce(tape: &mut Tape, p: Var, gt: &[u8]) -> Result<Var> {
    let n = tape.value(p).rows();
    if gt.len() != n {
        return Err(Error::shape("frame_bce", format!("{n} logits, {} labels", gt.len())));
    }
    let pos = tape.leaf(Matrix::column_vector(gt.iter().map(|&g| g as f64).collect())?);
    let neg = tape.leaf(Matrix::column_vector(gt.iter().map(|&g| 1.0 - g as f64).collect())?);
    let prob = tape.sigmoid(p)?;
    let prob = tape.clamp(prob, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = tape.log(prob)?;
    let one_minus = tape.affine(prob, -1.0, 1.0)?;
    let log_q = tape.log(one_minus)?;
    let a = tape.mul(pos, log_p)?;
    let b = tape.mul(neg, log_q)?;
    let ll = tape.add(a, b)?;
    let mean = tape.mean(ll)?;
    tape.scale(mean, -1.0)
}

/// Normal-vs-abnormal knowledge similarity loss.
///
/// Per frame and group, the score is the mean of the top 10% (at least one)
/// dot products against that group's embeddings. The two scores, scaled by
/// [`SIM_SCALE`], form a 2-way softmax whose target is the video's label.
/// Normal videos use every frame; abnormal videos use their Top-K frames by
/// logit.
pub fn tape_ski_sim_loss(
    tape: &mut Tape,
    x_t: Var,
    knowledge: Var,
    bank: &KnowledgeBank,
    p: &[f64],
    is_abnormal: bool,
) -> Result<Var> {
    let n = tape.value(x_t).rows();
    if p.len() != n {
        return Err(Error::shape(
            "ski_sim_loss",
            format!("{} logits for {n} frames", p.len()),
        ));
    }
    let mut scores = Vec::with_capacity(2);
    for group in [KnowledgeGroup::Normal, KnowledgeGroup::Abnormal] {
        let idx = bank.indices(group);
        if idx.is_empty() {
            return Err(Error::Config(format!("knowledge group {group:?} is empty")));
        }
        let top = ((KNOWLEDGE_TOP_FRACTION * idx.len() as f64).ceil() as usize).max(1);
        let rows = tape.select_rows(knowledge, &idx)?;
        let rows_t = tape.transpose(rows)?;
        let sims = tape.matmul(x_t, rows_t)?;
        scores.push(tape.row_top_k_mean(sims, top)?);
    }
    let pair = tape.concat_cols(scores[0], scores[1])?;
    let pair = tape.scale(pair, SIM_SCALE)?;
    let log_probs = tape.row_log_softmax(pair)?;
    let frames: Vec<usize> = if is_abnormal {
        let mut sel = top_k_indices(p, abnormal_top_k(n));
        sel.sort_unstable();
        sel
    } else {
        (0..n).collect()
    };
    let chosen = tape.select_rows(log_probs, &frames)?;
    let target = tape.select_cols(chosen, &[usize::from(is_abnormal)])?;
    let mean = tape.mean(target)?;
    tape.scale(mean, -1.0)
}

fn column(tape: &mut Tape, values: &[f64]) -> Result<Var> {
    Ok(tape.leaf(Matrix::column_vector(values.to_vec())?))
}

pub fn topk_mean(p: &[f64], k: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let v = column(&mut tape, p)?;
    let out = tape_topk_mean(&mut tape, v, k)?;
    Ok(tape.scalar(out))
}

pub fn video_bce(p: &[f64], is_abnormal: bool) -> Result<f64> {
    let mut tape = Tape::new();
    let v = column(&mut tape, p)?;
    let out = tape_video_bce(&mut tape, v, is_abnormal)?;
    Ok(tape.scalar(out))
}

/// Cross entropy over all classes of `class_logits`.
pub fn class_ce(class_logits: &[f64], target: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(Matrix::row_vector(class_logits.to_vec())?);
    let space: Vec<usize> = (0..class_logits.len()).collect();
    let out = tape_class_ce(&mut tape, v, &space, target)?;
    Ok(tape.scalar(out))
}

pub fn frame_bce(p: &[f64], gt: &[u8]) -> Result<f64> {
    let mut tape = Tape::new();
    let v = column(&mut tape, p)?;
    let out = tape_frame_bce(&mut tape, v, gt)?;
    Ok(tape.scalar(out))
}

pub fn ski_sim_loss(
    x_t: &Matrix,
    knowledge: &Matrix,
    bank: &KnowledgeBank,
    p: &[f64],
    is_abnormal: bool,
) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.leaf(x_t.clone());
    let k = tape.leaf(knowledge.clone());
    let out = tape_ski_sim_loss(&mut tape, x, k, bank, p, is_abnormal)?;
    Ok(tape.scalar(out))
}

/// Batch-level loss terms; a term is `None` when no video contributes to it.
#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub l_bce: Option<f64>,
    pub l_ce: Option<f64>,
    pub l_sim_n: Option<f64>,
    pub l_sim_a: Option<f64>,
    pub l_bce2: Option<f64>,
    pub l_ce2: Option<f64>,
    pub total: f64,
}

/// Per-video values of the weakly supervised terms.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTerms {
    pub is_abnormal: bool,
    pub bce: f64,
    /// Abnormal videos only.
    pub ce: Option<f64>,
    /// Present when knowledge injection is enabled.
    pub sim: Option<f64>,
}

/// Weights that turn per-video terms into batch means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights {
    pub bce: f64,
    pub ce: f64,
    pub sim_n: f64,
    pub sim_a: f64,
}

impl TermWeights {
    pub fn for_batch(normals: usize, abnormals: usize) -> Self {
        let inv = |n: usize| if n == 0 { 0.0 } else { 1.0 / n as f64 };
        Self {
            bce: inv(normals + abnormals),
            ce: inv(abnormals),
            sim_n: inv(normals),
            sim_a: inv(abnormals),
        }
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    for v in values {
        sum += v;
        count += 1;
    }
    (count > 0).then(|| sum / count as f64)
}

/// `L_bce + L_ce + L_sim-n + L_sim-a`, each a mean over contributing videos.
pub fn train_loss(terms: &[VideoTerms]) -> LossBreakdown {
    let l_bce = mean_of(terms.iter().map(|t| t.bce));
    let l_ce = mean_of(terms.iter().filter_map(|t| t.ce));
    let l_sim_n = mean_of(terms.iter().filter(|t| !t.is_abnormal).filter_map(|t| t.sim));
    let l_sim_a = mean_of(terms.iter().filter(|t| t.is_abnormal).filter_map(|t| t.sim));
    let total = [l_bce, l_ce, l_sim_n, l_sim_a].iter().flatten().sum();
    LossBreakdown {
        l_bce,
        l_ce,
        l_sim_n,
        l_sim_a,
        total,
        ..Default::default()
    }
}

/// Per-pseudo-video values of the fully supervised terms.
#[derive(Clone, Debug, PartialEq)]
pub struct PseudoTerms {
    pub bce2: f64,
    pub ce2: f64,
}

/// `L_bce2 + L_ce2 + λ·(L_bce + L_ce)`.
pub fn tune_loss(pseudo: &[PseudoTerms], base: &[VideoTerms], lambda: f64) -> LossBreakdown {
    let l_bce2 = mean_of(pseudo.iter().map(|t| t.bce2));
    let l_ce2 = mean_of(pseudo.iter().map(|t| t.ce2));
    let l_bce = mean_of(base.iter().map(|t| t.bce));
    let l_ce = mean_of(base.iter().filter_map(|t| t.ce));
    let total = l_bce2.unwrap_or(0.0) + l_ce2.unwrap_or(0.0) + lambda * (l_bce.unwrap_or(0.0) + l_ce.unwrap_or(0.0));
    LossBreakdown {
        l_bce,
        l_ce,
        l_bce2,
        l_ce2,
        total,
        ..Default::default()
    }
}
