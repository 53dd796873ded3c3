//! Stage-1 weakly supervised training and stage-2 fine-tuning on pseudo anomalies.
//!
//! Every step builds one tape per video. Tapes run in parallel, and their
//! gradients are summed in batch order so results do not depend on the
//! thread count.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{epoch_batches, sample_frames, Corpus, Video, MAX_TRAIN_LEN};
use crate::error::{Error, Result};
use crate::losses::{
    tape_class_ce, tape_frame_bce, tape_ski_sim_loss, tape_video_bce, train_loss, tune_loss, LossBreakdown,
    PseudoTerms, TermWeights, VideoTerms,
};
use crate::model::{forward_on_tape, ClassCatalog, KnowledgeBank, ModelConfig, ModelParams};
use crate::nas::{build_pseudo_set, PseudoVideo, SnippetBank};
use crate::numkernel::{adamw_step, AdamWConfig, Matrix, OptimizerState, Parameters, Tape};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 20,
            batch_size: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub lr: f64,
    pub epochs: usize,
    pub pseudo_per_batch: usize,
    pub base_per_batch: usize,
    pub lambda: f64,
    /// Pseudo videos synthesized per novel category.
    pub pseudo_per_category: usize,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            epochs: 10,
            pseudo_per_batch: 10,
            base_per_batch: 10,
            lambda: 1.0,
            pseudo_per_category: 40,
        }
    }
}

impl Stage2Config {
    /// Learning rate and λ used for each benchmark family.
    pub fn preset(corpus: &str) -> Option<Self> {
        let (lr, lambda) = match corpus {
            "ucf" | "ucf-crime" => (5e-6, 0.1),
            "xd" | "xd-violence" => (5e-6, 1.0),
            "ubnormal" => (1e-5, 1.0),
            _ => return None,
        };
        Some(Self {
            lr,
            lambda,
            ..Self::default()
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub stage1: Stage1Config,
    pub stage2: Stage2Config,
    pub model: ModelConfig,
    /// Moment and decay settings; the learning rate comes from the stage.
    pub adamw: AdamWConfig,
    /// Longest frame sequence fed to the model during training.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
            model: ModelConfig::default(),
            adamw: AdamWConfig::default(),
            max_len: MAX_TRAIN_LEN,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for desk-scale corpora such as the synthetic one.
    ///
    /// A few hundred short videos give far fewer optimizer steps than a real
    /// benchmark, so the learning rates are larger. With integer frame
    /// positions, `sigma = 0.07` makes the temporal mixing numerically the
    /// identity, so a wider range is used.
    pub fn desk_scale() -> Self {
        let mut cfg = Self::default();
        cfg.stage1.lr = 3e-3;
        cfg.stage2.lr = 1e-3;
        cfg.stage2.lambda = 1.0;
        cfg.model.sigma = 2.0;
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |msg: String| Err(Error::Config(msg));
        if !(self.stage1.lr >= 0.0 && self.stage1.lr.is_finite()) {
            return bad(format!("stage-1 lr must be non-negative, got {}", self.stage1.lr));
        }
        if !(self.stage2.lr >= 0.0 && self.stage2.lr.is_finite()) {
            return bad(format!("stage-2 lr must be non-negative, got {}", self.stage2.lr));
        }
        if !(self.stage2.lambda >= 0.0 && self.stage2.lambda.is_finite()) {
            return bad(format!("lambda must be non-negative, got {}", self.stage2.lambda));
        }
        if self.stage2.pseudo_per_batch == 0 {
            return bad("pseudo_per_batch must be positive".into());
        }
        if self.stage2.pseudo_per_category == 0 {
            return bad("pseudo_per_category must be positive".into());
        }
        if self.max_len == 0 {
            return bad("max_len must be positive".into());
        }
        Ok(())
    }
}

/// Mean loss terms of one epoch.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochLoss {
    pub epoch: usize,
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: ModelParams,
    pub history: Vec<EpochLoss>,
}

/// One weakly labelled training video as seen by the loss.
#[derive(Clone, Copy, Debug)]
pub struct WeakSample<'a> {
    pub features: &'a Matrix,
    /// `None` for normal videos.
    pub class_index: Option<usize>,
}

/// One pseudo video with frame labels.
#[derive(Clone, Copy, Debug)]
pub struct PseudoSample<'a> {
    pub features: &'a Matrix,
    pub frame_gt: &'a [u8],
    pub class_index: usize,
}

/// Shared read-only inputs of the loss functions.
#[derive(Clone, Copy, Debug)]
pub struct LossContext<'a> {
    pub catalog: &'a ClassCatalog,
    pub bank: &'a KnowledgeBank,
    pub model: &'a ModelConfig,
}

fn weak_video(
    params: &ModelParams,
    sample: &WeakSample,
    ctx: &LossContext,
    label_space: &[usize],
    weights: &TermWeights,
    with_sim: bool,
    scale: f64,
) -> Result<(VideoTerms, ModelParams)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = forward_on_tape(&mut tape, &vars, sample.features, ctx.catalog, ctx.model)?;
    let is_abnormal = sample.class_index.is_some();
    let bce = tape_video_bce(&mut tape, out.p, is_abnormal)?;
    let mut total = tape.scale(bce, weights.bce * scale)?;
    let mut terms = VideoTerms {
        is_abnormal,
        bce: tape.scalar(bce),
        ce: None,
        sim: None,
    };
    if let Some(target) = sample.class_index {
        let ce = tape_class_ce(&mut tape, out.logits, label_space, target)?;
        terms.ce = Some(tape.scalar(ce));
        let w = tape.scale(ce, weights.ce * scale)?;
        total = tape.add(total, w)?;
    }
    if with_sim && ctx.model.knowledge_injection {
        let p = tape.value(out.p).data().to_vec();
        let sim = tape_ski_sim_loss(&mut tape, out.x_t, vars.knowledge, ctx.bank, &p, is_abnormal)?;
        terms.sim = Some(tape.scalar(sim));
        let w = if is_abnormal { weights.sim_a } else { weights.sim_n };
        let w = tape.scale(sim, w * scale)?;
        total = tape.add(total, w)?;
    }
    let mut grads = tape.backward(total)?;
    Ok((terms, ModelParams::gradients(&vars, &mut grads)))
}

fn pseudo_video(
    params: &ModelParams,
    sample: &PseudoSample,
    ctx: &LossContext,
    weight: f64,
) -> Result<(PseudoTerms, ModelParams)> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = forward_on_tape(&mut tape, &vars, sample.features, ctx.catalog, ctx.model)?;
    let bce2 = tape_frame_bce(&mut tape, out.p, sample.frame_gt)?;
    let space = ctx.catalog.all_indices();
    let ce2 = tape_class_ce(&mut tape, out.logits, &space, sample.class_index)?;
    let sum = tape.add(bce2, ce2)?;
    let total = tape.scale(sum, weight)?;
    let terms = PseudoTerms {
        bce2: tape.scalar(bce2),
        ce2: tape.scalar(ce2),
    };
    let mut grads = tape.backward(total)?;
    Ok((terms, ModelParams::gradients(&vars, &mut grads)))
}

fn reduce(params: &ModelParams, parts: Vec<ModelParams>) -> ModelParams {
    let mut acc = params.zeros_like();
    for g in &parts {
        acc.add_scaled(g, 1.0);
    }
    acc
}

/// The stage-1 objective on a batch and its gradient.
///
/// CE uses `label_space` (the base classes in stage 1).
pub fn batch_train_loss(
    params: &ModelParams,
    batch: &[WeakSample],
    ctx: &LossContext,
    label_space: &[usize],
) -> Result<(LossBreakdown, ModelParams)> {
    let abnormals = batch.iter().filter(|s| s.class_index.is_some()).count();
    let weights = TermWeights::for_batch(batch.len() - abnormals, abnormals);
    let results = batch
        .par_iter()
        .map(|s| weak_video(params, s, ctx, label_space, &weights, true, 1.0))
        .collect::<Result<Vec<_>>>()?;
    let (terms, grads): (Vec<_>, Vec<_>) = results.into_iter().unzip();
    Ok((train_loss(&terms), reduce(params, grads)))
}

/// The stage-2 objective on a batch and its gradient.
///
/// Base videos are weakly labelled abnormal videos; with `lambda == 0` they
/// are not evaluated at all.
pub fn batch_tune_loss(
    params: &ModelParams,
    pseudo: &[PseudoSample],
    base: &[WeakSample],
    lambda: f64,
    ctx: &LossContext,
) -> Result<(LossBreakdown, ModelParams)> {
    if pseudo.is_empty() {
        return Err(Error::Config("stage-2 batch has no pseudo videos".into()));
    }
    for s in pseudo {
        if s.frame_gt.len() != s.features.rows() {
            return Err(Error::Label(format!(
                "pseudo sample has {} frame labels for {} frames",
                s.frame_gt.len(),
                s.features.rows()
            )));
        }
    }
    if base.iter().any(|s| s.class_index.is_none()) {
        return Err(Error::Config("stage-2 base videos must be abnormal".into()));
    }
    let wp = 1.0 / pseudo.len() as f64;
    let pseudo_results = pseudo
        .par_iter()
        .map(|s| pseudo_video(params, s, ctx, wp))
        .collect::<Result<Vec<_>>>()?;
    let base_results = if lambda > 0.0 && !base.is_empty() {
        let weights = TermWeights::for_batch(0, base.len());
        let space = ctx.catalog.all_indices();
        base.par_iter()
            .map(|s| weak_video(params, s, ctx, &space, &weights, false, lambda))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let (pterms, mut grads): (Vec<_>, Vec<_>) = pseudo_results.into_iter().unzip();
    let (bterms, bgrads): (Vec<_>, Vec<_>) = base_results.into_iter().unzip();
    grads.extend(bgrads);
    Ok((tune_loss(&pterms, &bterms, lambda), reduce(params, grads)))
}

/// Builds `pseudo_per_category` pseudo videos for every novel class that the
/// bank covers, seeded from `cfg.seed`.
pub fn synthesize_pseudo(corpus: &Corpus, bank: &SnippetBank, cfg: &TrainConfig) -> Result<Vec<PseudoVideo>> {
    cfg.validate()?;
    bank.validate(&corpus.catalog)?;
    let covered = bank.categories();
    let categories: Vec<String> = corpus
        .catalog
        .novel_indices()
        .into_iter()
        .map(|i| corpus.catalog.class_names[i].clone())
        .filter(|name| covered.contains(name))
        .collect();
    if categories.is_empty() {
        return Err(Error::Config("snippet bank covers no novel class".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 3, 0, 0));
    build_pseudo_set(
        &corpus.train_normal(),
        bank,
        &categories,
        cfg.stage2.pseudo_per_category,
        cfg.max_len,
        &mut rng,
    )
}

/// Seed for the frame sampling of one video in one step.
fn derive_seed(seed: u64, stage: u64, epoch: usize, slot: usize) -> u64 {
    let mut x = seed ^ stage.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    for v in [epoch as u64, slot as u64] {
        x = x.wrapping_add(v).wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^= x >> 31;
    }
    x
}

fn sampled(video: &Video, max_len: usize, seed: u64) -> Result<Matrix> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(sample_frames(&video.features, max_len, &mut rng)?.features)
}

/// Applies one optimizer step, turning numerical failures into a divergence error.
fn guarded_step(
    params: &mut ModelParams,
    state: &mut OptimizerState<ModelParams>,
    loss: Result<(LossBreakdown, ModelParams)>,
    epoch: usize,
    step: usize,
) -> Result<LossBreakdown> {
    let diverged = |params: &ModelParams| Error::Divergence {
        epoch,
        step,
        last_finite: Box::new(params.clone()),
    };
    let (breakdown, grads) = match loss {
        Ok(v) => v,
        Err(Error::NonFinite { .. }) => return Err(diverged(params)),
        Err(e) => return Err(e),
    };
    if !breakdown.total.is_finite() || !grads.is_finite() {
        return Err(diverged(params));
    }
    let before = params.clone();
    adamw_step(params, &grads, state)?;
    if !params.is_finite() {
        *params = before;
        return Err(diverged(params));
    }
    Ok(breakdown)
}

fn mean_breakdown(epoch: usize, items: &[LossBreakdown]) -> EpochLoss {
    let mean = |f: fn(&LossBreakdown) -> Option<f64>| {
        let vals: Vec<f64> = items.iter().filter_map(f).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    EpochLoss {
        epoch,
        loss: LossBreakdown {
            l_bce: mean(|b| b.l_bce),
            l_ce: mean(|b| b.l_ce),
            l_sim_n: mean(|b| b.l_sim_n),
            l_sim_a: mean(|b| b.l_sim_a),
            l_bce2: mean(|b| b.l_bce2),
            l_ce2: mean(|b| b.l_ce2),
            total: items.iter().map(|b| b.total).sum::<f64>() / items.len().max(1) as f64,
        },
    }
}

/// Stage 1 from a fresh initialization.
pub fn train_stage1(corpus: &Corpus, cfg: &TrainConfig) -> Result<TrainOutput> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = ModelParams::init(corpus.dim(), &corpus.bank, &cfg.model, &mut rng)?;
    train_stage1_from(corpus, cfg, params, &mut rng)
}

/// Stage 1 from given parameters, drawing batches from `rng`.
pub fn train_stage1_from(
    corpus: &Corpus,
    cfg: &TrainConfig,
    mut params: ModelParams,
    rng: &mut impl Rng,
) -> Result<TrainOutput> {
    cfg.validate()?;
    let base = corpus.catalog.base_indices();
    for &i in &corpus.train_abnormal() {
        let v = &corpus.videos[i];
        if v.class_index.is_some_and(|c| !corpus.catalog.is_base[c]) {
            return Err(Error::Label(format!(
                "train video `{}` has novel class `{}`",
                v.record.id, v.record.label
            )));
        }
    }
    let ctx = LossContext {
        catalog: &corpus.catalog,
        bank: &corpus.bank,
        model: &cfg.model,
    };
    let mut state = OptimizerState::new(
        &params,
        AdamWConfig {
            lr: cfg.stage1.lr,
            ..cfg.adamw
        },
    );
    let mut history = Vec::with_capacity(cfg.stage1.epochs);
    let mut step = 0;
    for epoch in 0..cfg.stage1.epochs {
        let batches = epoch_batches(&corpus.manifest, cfg.stage1.batch_size, rng)?;
        let mut seen = Vec::with_capacity(batches.len());
        for batch in &batches {
            let features = batch
                .par_iter()
                .map(|&i| sampled(&corpus.videos[i], cfg.max_len, derive_seed(cfg.seed, 1, epoch, i)))
                .collect::<Result<Vec<_>>>()?;
            let samples: Vec<WeakSample> = batch
                .iter()
                .zip(&features)
                .map(|(&i, f)| WeakSample {
                    features: f,
                    class_index: corpus.videos[i].class_index,
                })
                .collect();
            let loss = batch_train_loss(&params, &samples, &ctx, &base);
            seen.push(guarded_step(&mut params, &mut state, loss, epoch, step)?);
            step += 1;
        }
        history.push(mean_breakdown(epoch, &seen));
    }
    Ok(TrainOutput { params, history })
}

/// Stage 2: fine-tunes on pseudo videos mixed with base abnormal videos.
///
/// One epoch is one pass over the shuffled pseudo set; base videos are drawn
/// with replacement.
pub fn finetune_stage2(
    corpus: &Corpus,
    pseudo: &[PseudoVideo],
    params: ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainOutput> {
    cfg.validate()?;
    if pseudo.is_empty() {
        return Err(Error::Config("pseudo set is empty".into()));
    }
    let base_pool = corpus.train_abnormal();
    if base_pool.is_empty() && cfg.stage2.base_per_batch > 0 && cfg.stage2.lambda > 0.0 {
        return Err(Error::Config("no base abnormal train videos".into()));
    }
    let pseudo_classes = pseudo
        .iter()
        .map(|v| {
            if v.frame_gt.len() != v.features.len() {
                return Err(Error::Label(format!("pseudo video `{}` lacks frame labels", v.id)));
            }
            corpus
                .catalog
                .index_of(&v.category)
                .ok_or_else(|| Error::Label(format!("pseudo video `{}` has unknown class `{}`", v.id, v.category)))
        })
        .collect::<Result<Vec<_>>>()?;
    let ctx = LossContext {
        catalog: &corpus.catalog,
        bank: &corpus.bank,
        model: &cfg.model,
    };
    let mut params = params;
    let mut state = OptimizerState::new(
        &params,
        AdamWConfig {
            lr: cfg.stage2.lr,
            ..cfg.adamw
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2, 0, 0));
    let mut order: Vec<usize> = (0..pseudo.len()).collect();
    let mut history = Vec::with_capacity(cfg.stage2.epochs);
    let mut step = 0;
    for epoch in 0..cfg.stage2.epochs {
        order.shuffle(&mut rng);
        let mut seen = Vec::new();
        for chunk in order.chunks(cfg.stage2.pseudo_per_batch) {
            let base_ids: Vec<usize> = if base_pool.is_empty() {
                Vec::new()
            } else {
                (0..cfg.stage2.base_per_batch)
                    .map(|_| base_pool[rng.gen_range(0..base_pool.len())])
                    .collect()
            };
            let base_features = base_ids
                .par_iter()
                .enumerate()
                .map(|(slot, &i)| sampled(&corpus.videos[i], cfg.max_len, derive_seed(cfg.seed, 2, step, slot)))
                .collect::<Result<Vec<_>>>()?;
            let base: Vec<WeakSample> = base_ids
                .iter()
                .zip(&base_features)
                .map(|(&i, f)| WeakSample {
                    features: f,
                    class_index: corpus.videos[i].class_index,
                })
                .collect();
            let samples: Vec<PseudoSample> = chunk
                .iter()
                .map(|&j| PseudoSample {
                    features: &pseudo[j].features.features,
                    frame_gt: &pseudo[j].frame_gt,
                    class_index: pseudo_classes[j],
                })
                .collect();
            let loss = batch_tune_loss(&params, &samples, &base, cfg.stage2.lambda, &ctx);
            seen.push(guarded_step(&mut params, &mut state, loss, epoch, step)?);
            step += 1;
        }
        history.push(mean_breakdown(epoch, &seen));
    }
    Ok(TrainOutput { params, history })
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

/// Loss history as CSV: `epoch,l_bce,l_ce,l_sim_n,l_sim_a,l_bce2,l_ce2,total`.
pub fn write_loss_csv(history: &[EpochLoss], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let io = |e| Error::io(path, e);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    w.write_record([
        "epoch", "l_bce", "l_ce", "l_sim_n", "l_sim_a", "l_bce2", "l_ce2", "total",
    ])
    .map_err(|e| Error::load(path, e.to_string()))?;
    for h in history {
        let b = &h.loss;
        w.write_record([
            h.epoch.to_string(),
            cell(b.l_bce),
            cell(b.l_ce),
            cell(b.l_sim_n),
            cell(b.l_sim_a),
            cell(b.l_bce2),
            cell(b.l_ce2),
            format!("{:.9}", b.total),
        ])
        .map_err(|e| Error::load(path, e.to_string()))?;
    }
    w.flush().map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_synthetic, SyntheticConfig};

    fn small_corpus() -> Corpus {
        let cfg = SyntheticConfig {
            dim: 8,
            train_videos_per_class: 4,
            test_videos_per_class: 1,
            train_normal_videos: 12,
            test_normal_videos: 2,
            video_len: (8, 16),
            segment_len: (2, 4),
            knowledge_per_group: 4,
            snippets_per_novel_class: 2,
            ..SyntheticConfig::default()
        };
        gen_synthetic(&cfg).unwrap().to_corpus().unwrap()
    }

    fn small_cfg() -> TrainConfig {
        TrainConfig {
            stage1: Stage1Config {
                lr: 1e-3,
                epochs: 2,
                batch_size: 8,
            },
            seed: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_lr_leaves_params_unchanged() {
        let corpus = small_corpus();
        let mut cfg = small_cfg();
        cfg.stage1.lr = 0.0;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let init = ModelParams::init(corpus.dim(), &corpus.bank, &cfg.model, &mut rng).unwrap();
        let out = train_stage1_from(&corpus, &cfg, init.clone(), &mut rng).unwrap();
        assert_eq!(out.params, init);
        assert_eq!(out.history.len(), 2);
    }

    #[test]
    fn same_seed_same_result() {
        let corpus = small_corpus();
        let a = train_stage1(&corpus, &small_cfg()).unwrap();
        let b = train_stage1(&corpus, &small_cfg()).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn thread_count_does_not_change_result() {
        let corpus = small_corpus();
        let one = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let four = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
        let a = one.install(|| train_stage1(&corpus, &small_cfg())).unwrap();
        let b = four.install(|| train_stage1(&corpus, &small_cfg())).unwrap();
        assert_eq!(a.params, b.params);
    }

    #[test]
    fn knowledge_off_drops_similarity_terms() {
        let corpus = small_corpus();
        let mut cfg = small_cfg();
        cfg.model.knowledge_injection = false;
        let out = train_stage1(&corpus, &cfg).unwrap();
        assert!(out
            .history
            .iter()
            .all(|h| h.loss.l_sim_n.is_none() && h.loss.l_sim_a.is_none()));
        let on = train_stage1(&corpus, &small_cfg()).unwrap();
        assert!(on
            .history
            .iter()
            .all(|h| h.loss.l_sim_n.is_some() && h.loss.l_sim_a.is_some()));
    }

    #[test]
    fn lambda_zero_ignores_base_videos() {
        let corpus = small_corpus();
        let syn = gen_synthetic(&SyntheticConfig {
            dim: 8,
            train_videos_per_class: 4,
            test_videos_per_class: 1,
            train_normal_videos: 12,
            test_normal_videos: 2,
            video_len: (8, 16),
            segment_len: (2, 4),
            knowledge_per_group: 4,
            snippets_per_novel_class: 2,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let bank = crate::nas::SnippetBank::new(syn.snippets.clone());
        let cats: Vec<String> = corpus
            .catalog
            .novel_indices()
            .iter()
            .map(|&i| corpus.catalog.class_names[i].clone())
            .collect();
        let pseudo = crate::nas::build_pseudo_set(
            &corpus.train_normal(),
            &bank,
            &cats,
            2,
            MAX_TRAIN_LEN,
            &mut ChaCha8Rng::seed_from_u64(1),
        )
        .unwrap();
        let params = train_stage1(&corpus, &small_cfg()).unwrap().params;
        let ctx = LossContext {
            catalog: &corpus.catalog,
            bank: &corpus.bank,
            model: &ModelConfig::default(),
        };
        let ps: Vec<PseudoSample> = pseudo
            .iter()
            .map(|v| PseudoSample {
                features: &v.features.features,
                frame_gt: &v.frame_gt,
                class_index: corpus.catalog.index_of(&v.category).unwrap(),
            })
            .collect();
        let base_idx = corpus.train_abnormal();
        let bs: Vec<WeakSample> = base_idx
            .iter()
            .map(|&i| WeakSample {
                features: &corpus.videos[i].features.features,
                class_index: corpus.videos[i].class_index,
            })
            .collect();
        let (with_base, g1) = batch_tune_loss(&params, &ps, &bs, 0.0, &ctx).unwrap();
        let (without, g2) = batch_tune_loss(&params, &ps, &[], 0.0, &ctx).unwrap();
        assert_eq!(g1, g2);
        assert_eq!(with_base.total, without.total);
        assert!(with_base.l_bce.is_none());

        let mut cfg = small_cfg();
        cfg.stage2.epochs = 1;
        cfg.stage2.lr = 1e-3;
        let tuned = finetune_stage2(&corpus, &pseudo, params.clone(), &cfg).unwrap();
        assert_ne!(tuned.params, params);
        assert!(tuned.history[0].loss.l_bce2.is_some());
    }

    #[test]
    fn divergence_reports_last_finite_params() {
        let corpus = small_corpus();
        let mut cfg = small_cfg();
        cfg.stage1.lr = 1e300;
        cfg.adamw.weight_decay = 1e10;
        match train_stage1(&corpus, &cfg) {
            Err(Error::Divergence { last_finite, .. }) => assert!(last_finite.is_finite()),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn loss_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("loss.csv");
        let out = train_stage1(&small_corpus(), &small_cfg()).unwrap();
        write_loss_csv(&out.history, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "epoch,l_bce,l_ce,l_sim_n,l_sim_a,l_bce2,l_ce2,total");
        assert_eq!(lines.len(), 3);
        assert!(lines[1].starts_with("0,"));
    }

    #[test]
    fn presets() {
        assert_eq!(Stage2Config::preset("ucf").unwrap().lambda, 0.1);
        assert_eq!(Stage2Config::preset("ubnormal").unwrap().lr, 1e-5);
        assert!(Stage2Config::preset("other").is_none());
    }
}
