//! Frame-level ROC-AUC and AP, video-level Top-1 accuracy, and their
//! overall/base/novel breakdowns.

use std::cmp::Ordering;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Corpus, Split, Video};
use crate::error::{Error, Result};
use crate::model::{argmax, forward, ModelConfig, ModelParams};
use crate::numkernel::sigmoid;

fn check_inputs(scores: &[f64], labels: &[u8], what: &str) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "metric",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::NonFinite {
            context: format!("{what} scores"),
            index: i,
        });
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Label(format!("{what} labels must be 0 or 1")));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

/// Groups of tied scores in descending score order: `(score, positives, negatives)`.
fn descending_groups(scores: &[f64], labels: &[u8]) -> Vec<(f64, usize, usize)> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for i in order {
        let (s, l) = (scores[i], labels[i]);
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                if l == 1 {
                    g.1 += 1
                } else {
                    g.2 += 1
                }
            }
            _ => groups.push((s, usize::from(l == 1), usize::from(l == 0))),
        }
    }
    groups
}

/// `P(s⁺ > s⁻) + ½·P(s⁺ = s⁻)` over all positive/negative pairs.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels, "roc_auc")?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "ROC-AUC needs both positive and negative labels".into(),
        ));
    }
    // Twice the Mann-Whitney count, kept integral so ties stay exact.
    let mut twice: u128 = 0;
    let mut neg_below = neg as u128;
    for (_, p, n) in descending_groups(scores, labels) {
        neg_below -= n as u128;
        twice += p as u128 * (2 * neg_below + n as u128);
    }
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

/// Step-wise average precision `Σ (Rᵢ − Rᵢ₋₁)·Pᵢ` over descending thresholds, ties grouped.
pub fn pr_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, _) = check_inputs(scores, labels, "pr_auc")?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("AP needs at least one positive label".into()));
    }
    let (mut tp, mut fp, mut ap) = (0usize, 0usize, 0.0);
    for (_, p, n) in descending_groups(scores, labels) {
        if p > 0 {
            let precision = (tp + p) as f64 / (tp + p + fp + n) as f64;
            ap += (p as f64 / pos as f64) * precision;
        }
        tp += p;
        fp += n;
    }
    Ok(ap)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub x: f64,
    pub y: f64,
}

/// `(fpr, tpr)` at each distinct threshold, descending.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<CurvePoint>> {
    let (pos, neg) = check_inputs(scores, labels, "roc_curve")?;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric("ROC curve needs both classes".into()));
    }
    let (mut tp, mut fp) = (0, 0);
    Ok(descending_groups(scores, labels)
        .into_iter()
        .map(|(s, p, n)| {
            tp += p;
            fp += n;
            CurvePoint {
                threshold: s,
                x: fp as f64 / neg as f64,
                y: tp as f64 / pos as f64,
            }
        })
        .collect())
}

/// `(recall, precision)` at each distinct threshold, descending.
pub fn pr_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<CurvePoint>> {
    let (pos, _) = check_inputs(scores, labels, "pr_curve")?;
    if pos == 0 {
        return Err(Error::UndefinedMetric("PR curve needs a positive label".into()));
    }
    let (mut tp, mut fp) = (0, 0);
    Ok(descending_groups(scores, labels)
        .into_iter()
        .map(|(s, p, n)| {
            tp += p;
            fp += n;
            CurvePoint {
                threshold: s,
                x: tp as f64 / pos as f64,
                y: tp as f64 / (tp + fp) as f64,
            }
        })
        .collect())
}

/// Repeats each sampled value `stride` times and truncates to `original_frame_count`.
pub fn expand_scores<T: Copy>(scores: &[T], stride: usize, original_frame_count: usize) -> Result<Vec<T>> {
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".into()));
    }
    if original_frame_count < scores.len() {
        return Err(Error::Label(format!(
            "original frame count {original_frame_count} is shorter than {} sampled frames",
            scores.len()
        )));
    }
    if original_frame_count > scores.len() * stride {
        return Err(Error::Label(format!(
            "original frame count {original_frame_count} exceeds {} sampled frames × stride {stride}",
            scores.len()
        )));
    }
    Ok((0..original_frame_count).map(|i| scores[i / stride]).collect())
}

/// Per-video model output consumed by [`evaluate_scores`].
#[derive(Clone, Debug, PartialEq)]
pub struct VideoPrediction {
    /// Anomaly probability per sampled frame.
    pub frame_scores: Vec<f64>,
    /// Predicted catalog class.
    pub predicted_class: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: Option<f64>,
    pub auc_base: Option<f64>,
    pub auc_novel: Option<f64>,
    pub ap: Option<f64>,
    pub ap_base: Option<f64>,
    pub ap_novel: Option<f64>,
    pub acc: Option<f64>,
    pub acc_base: Option<f64>,
    pub acc_novel: Option<f64>,
    pub class_names: Vec<String>,
    /// `confusion[true][predicted]` over abnormal test videos.
    pub confusion: Vec<Vec<u64>>,
    pub roc_curve: Vec<CurvePoint>,
    pub pr_curve: Vec<CurvePoint>,
    /// Abnormal test videos left out of frame metrics for lack of frame labels.
    pub excluded_videos: Vec<String>,
}

#[derive(Default)]
struct FramePool {
    scores: Vec<f64>,
    labels: Vec<u8>,
}

impl FramePool {
    fn extend(&mut self, scores: &[f64], labels: &[u8]) {
        self.scores.extend_from_slice(scores);
        self.labels.extend_from_slice(labels);
    }

    fn metric(&self, f: fn(&[f64], &[u8]) -> Result<f64>) -> Result<Option<f64>> {
        match f(&self.scores, &self.labels) {
            Ok(v) => Ok(Some(v)),
            Err(Error::UndefinedMetric(_)) => Ok(None),
            Err(e) => Err(e),
        }
    }
}

fn accuracy(hits: usize, total: usize) -> Option<f64> {
    (total > 0).then(|| hits as f64 / total as f64)
}

/// Builds the report from per-video predictions over the test split.
///
/// `predictions[i]` belongs to the i-th test video of `corpus`, in manifest order.
pub fn evaluate_scores(corpus: &Corpus, predictions: &[VideoPrediction]) -> Result<EvalReport> {
    let tests: Vec<&Video> = corpus.split(Split::Test).collect();
    if tests.is_empty() {
        return Err(Error::Config("the test split is empty".into()));
    }
    if tests.len() != predictions.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} predictions for {} test videos", predictions.len(), tests.len()),
        ));
    }
    let catalog = &corpus.catalog;
    let k = catalog.len();
    let (mut normal, mut base, mut novel) = (FramePool::default(), FramePool::default(), FramePool::default());
    let mut confusion = vec![vec![0u64; k]; k];
    let mut excluded = Vec::new();
    let (mut hits, mut hits_base, mut hits_novel) = (0, 0, 0);
    let (mut count, mut count_base, mut count_novel) = (0, 0, 0);

    for (video, pred) in tests.iter().zip(predictions) {
        let seq = &video.features;
        if pred.frame_scores.len() != seq.len() {
            return Err(Error::shape(
                "evaluate",
                format!(
                    "video `{}`: {} scores for {} frames",
                    video.record.id,
                    pred.frame_scores.len(),
                    seq.len()
                ),
            ));
        }
        if pred.predicted_class >= k {
            return Err(Error::Label(format!(
                "predicted class {} out of range",
                pred.predicted_class
            )));
        }
        let gt = match (&video.record.frame_gt, video.class_index) {
            (Some(gt), _) => Some(gt.clone()),
            (None, None) => Some(vec![0; seq.len()]),
            (None, Some(_)) => None,
        };
        if let Some(c) = video.class_index {
            let hit = usize::from(pred.predicted_class == c);
            confusion[c][pred.predicted_class] += 1;
            hits += hit;
            count += 1;
            if catalog.is_base[c] {
                hits_base += hit;
                count_base += 1;
            } else {
                hits_novel += hit;
                count_novel += 1;
            }
        }
        let Some(gt) = gt else {
            excluded.push(video.record.id.clone());
            continue;
        };
        let scores = expand_scores(&pred.frame_scores, seq.stride, seq.original_frame_count)?;
        let labels = expand_scores(&gt, seq.stride, seq.original_frame_count)?;
        match video.class_index {
            None => normal.extend(&scores, &labels),
            Some(c) if catalog.is_base[c] => base.extend(&scores, &labels),
            Some(_) => novel.extend(&scores, &labels),
        }
    }

    let mut all = FramePool::default();
    for pool in [&normal, &base, &novel] {
        all.extend(&pool.scores, &pool.labels);
    }
    let with_normals = |pool: &FramePool| {
        let mut p = FramePool::default();
        p.extend(&normal.scores, &normal.labels);
        p.extend(&pool.scores, &pool.labels);
        p
    };
    let (base_pool, novel_pool) = (with_normals(&base), with_normals(&novel));
    let has_novel = novel.labels.contains(&1);
    let has_base = base.labels.contains(&1);

    Ok(EvalReport {
        auc: all.metric(roc_auc)?,
        auc_base: if has_base { base_pool.metric(roc_auc)? } else { None },
        auc_novel: if has_novel { novel_pool.metric(roc_auc)? } else { None },
        ap: all.metric(pr_auc)?,
        ap_base: if has_base { base_pool.metric(pr_auc)? } else { None },
        ap_novel: if has_novel { novel_pool.metric(pr_auc)? } else { None },
        acc: accuracy(hits, count),
        acc_base: accuracy(hits_base, count_base),
        acc_novel: accuracy(hits_novel, count_novel),
        class_names: catalog.class_names.clone(),
        confusion,
        roc_curve: roc_curve(&all.scores, &all.labels).unwrap_or_default(),
        pr_curve: pr_curve(&all.scores, &all.labels).unwrap_or_default(),
        excluded_videos: excluded,
    })
}

/// Runs the model on each test video and scores it.
pub fn predict(params: &ModelParams, corpus: &Corpus, cfg: &ModelConfig) -> Result<Vec<VideoPrediction>> {
    let tests: Vec<&Video> = corpus.split(Split::Test).collect();
    tests
        .par_iter()
        .map(|v| {
            let out = forward(&v.features, params, &corpus.catalog, cfg)?;
            Ok(VideoPrediction {
                frame_scores: out.p.iter().map(|&p| sigmoid(p)).collect(),
                predicted_class: argmax(&out.class_logits),
            })
        })
        .collect()
}

pub fn evaluate(params: &ModelParams, corpus: &Corpus, cfg: &ModelConfig) -> Result<EvalReport> {
    let predictions = predict(params, corpus, cfg)?;
    evaluate_scores(corpus, &predictions)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::load(path, e.to_string())
}

pub fn write_curve_csv(points: &[CurvePoint], x: &str, y: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["threshold", x, y]).map_err(|e| csv_error(path, e))?;
    for p in points {
        w.write_record([p.threshold.to_string(), p.x.to_string(), p.y.to_string()])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_confusion_csv(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(report.class_names.iter().cloned());
    w.write_record(&header).map_err(|e| csv_error(path, e))?;
    for (name, row) in report.class_names.iter().zip(&report.confusion) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(|c| c.to_string()));
        w.write_record(&rec).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes `report.json`, `roc.csv`, `pr.csv`, and `confusion.csv` into `dir`.
pub fn write_report(report: &EvalReport, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    crate::data::write_json(dir.join("report.json"), report)?;
    write_curve_csv(&report.roc_curve, "fpr", "tpr", dir.join("roc.csv"))?;
    write_curve_csv(&report.pr_curve, "recall", "precision", dir.join("pr.csv"))?;
    write_confusion_csv(report, dir.join("confusion.csv"))
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x)).unwrap_or_else(|| "n/a".into())
}

/// Plain-text table of AUC, AP, and accuracy with overall/base/novel columns.
pub fn render_table(report: &EvalReport) -> String {
    let mut out = format!("{:<8}{:>10}{:>10}{:>10}\n", "metric", "all", "base", "novel");
    for (name, a, b, n) in [
        ("AUC", report.auc, report.auc_base, report.auc_novel),
        ("AP", report.ap, report.ap_base, report.ap_novel),
        ("ACC", report.acc, report.acc_base, report.acc_novel),
    ] {
        out.push_str(&format!("{name:<8}{:>10}{:>10}{:>10}\n", pct(a), pct(b), pct(n)));
    }
    out
}
