//! The forward pass: temporal adapter, knowledge injection, frame detector,
//! attention pooling, and text-aligned classification.
//!
//! Each stage has a tape form (used for training) and a plain form that
//! builds a scratch tape, so both paths share one implementation.

use super::catalog::ClassCatalog;
use super::params::{ModelConfig, ModelParams, ParamVars};
use crate::data::FeatureSequence;
use crate::error::{Error, Result};
use crate::numkernel::{Matrix, Tape, Var};

/// `H[i][j] = −|i−j| / sigma`.
pub fn build_adjacency(n: usize, sigma: f64) -> Result<Matrix> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
    }
    let data = (0..n * n)
        .map(|idx| {
            let (i, j) = (idx / n, idx % n);
            -(i.abs_diff(j) as f64) / sigma
        })
        .collect();
    Matrix::new(n, n, data)
}

/// Row-softmax of the adjacency: the fixed temporal mixing weights.
pub fn temporal_mixing(n: usize, sigma: f64) -> Result<Matrix> {
    Ok(build_adjacency(n, sigma)?.row_softmax())
}

/// Variables produced by [`forward_on_tape`].
#[derive(Clone, Copy, Debug)]
pub struct TapeOutputs {
    /// n×1 frame logits
    pub p: Var,
    pub x_t: Var,
    pub f_know: Var,
    /// 1×c
    pub x_agg: Var,
    /// 1×k
    pub logits: Var,
}

pub fn tape_temporal_adapt(tape: &mut Tape, vars: &ParamVars, x_f: &Matrix, cfg: &ModelConfig) -> Result<Var> {
    let mixed = if cfg.temporal_adapter {
        temporal_mixing(x_f.rows(), cfg.sigma)?.matmul(x_f)?
    } else {
        x_f.clone()
    };
    let mixed = tape.leaf(mixed);
    tape.layer_norm(mixed, vars.ln_gamma, vars.ln_beta)
}

/// `sigmoid(x_t · Kᵀ) · K / l`.
pub fn tape_inject_knowledge(tape: &mut Tape, x_t: Var, knowledge: Var) -> Result<Var> {
    let l = tape.value(knowledge).rows();
    let kt = tape.transpose(knowledge)?;
    let sim = tape.matmul(x_t, kt)?;
    let weights = tape.sigmoid(sim)?;
    let mixed = tape.matmul(weights, knowledge)?;
    tape.scale(mixed, 1.0 / l as f64)
}

/// Per-frame logits `GeLU([x_t, F_know]·W1 + b1)·W2 + b2`, n×1.
pub fn tape_detect(tape: &mut Tape, vars: &ParamVars, x_t: Var, f_know: Var) -> Result<Var> {
    let z = tape.concat_cols(x_t, f_know)?;
    let pre = tape.matmul(z, vars.w1)?;
    let pre = tape.add_row(pre, vars.b1)?;
    let hidden = tape.gelu(pre)?;
    let out = tape.matmul(hidden, vars.w2)?;
    tape.add_row(out, vars.b2)
}

/// `softmax(p)ᵀ · x_t`, 1×c.
pub fn tape_aggregate(tape: &mut Tape, p: Var, x_t: Var) -> Result<Var> {
    let pt = tape.transpose(p)?;
    let att = tape.row_softmax(pt)?;
    tape.matmul(att, x_t)
}

/// Scaled cosine between `x_agg` and each offset, re-normalized class embedding.
pub fn tape_classify(tape: &mut Tape, x_agg: Var, prompt_offset: Var, catalog: &ClassCatalog) -> Result<Var> {
    let frozen = tape.leaf(catalog.embeddings.clone());
    let shifted = tape.add_row(frozen, prompt_offset)?;
    let classes = tape.row_normalize(shifted)?;
    let video = tape.row_normalize(x_agg)?;
    let ct = tape.transpose(classes)?;
    let cos = tape.matmul(video, ct)?;
    tape.scale(cos, catalog.logit_scale)
}

pub fn forward_on_tape(
    tape: &mut Tape,
    vars: &ParamVars,
    x_f: &Matrix,
    catalog: &ClassCatalog,
    cfg: &ModelConfig,
) -> Result<TapeOutputs> {
    if x_f.rows() == 0 {
        return Err(Error::Degenerate("video with zero frames".into()));
    }
    let x_t = tape_temporal_adapt(tape, vars, x_f, cfg)?;
    let f_know = if cfg.knowledge_injection {
        tape_inject_knowledge(tape, x_t, vars.knowledge)?
    } else {
        tape.leaf(Matrix::zeros(x_f.rows(), x_f.cols()))
    };
    let p = tape_detect(tape, vars, x_t, f_know)?;
    let x_agg = tape_aggregate(tape, p, x_t)?;
    let logits = tape_classify(tape, x_agg, vars.prompt_offset, catalog)?;
    Ok(TapeOutputs {
        p,
        x_t,
        f_know,
        x_agg,
        logits,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    /// Raw per-frame logits.
    pub p: Vec<f64>,
    pub x_t: Matrix,
    pub f_know: Matrix,
    pub x_agg: Vec<f64>,
    pub class_logits: Vec<f64>,
}

pub fn forward(
    seq: &FeatureSequence,
    params: &ModelParams,
    catalog: &ClassCatalog,
    cfg: &ModelConfig,
) -> Result<ForwardOutput> {
    if seq.dim() != params.dim() {
        return Err(Error::shape(
            "forward",
            format!("features have {} columns, model expects {}", seq.dim(), params.dim()),
        ));
    }
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let out = forward_on_tape(&mut tape, &vars, &seq.features, catalog, cfg)?;
    Ok(ForwardOutput {
        p: tape.value(out.p).data().to_vec(),
        x_t: tape.value(out.x_t).clone(),
        f_know: tape.value(out.f_know).clone(),
        x_agg: tape.value(out.x_agg).data().to_vec(),
        class_logits: tape.value(out.logits).data().to_vec(),
    })
}

pub fn temporal_adapt(seq: &FeatureSequence, params: &ModelParams, cfg: &ModelConfig) -> Result<Matrix> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let x_t = tape_temporal_adapt(&mut tape, &vars, &seq.features, cfg)?;
    Ok(tape.value(x_t).clone())
}

pub fn inject_knowledge(x_t: &Matrix, knowledge: &Matrix) -> Result<Matrix> {
    if x_t.cols() != knowledge.cols() {
        return Err(Error::shape(
            "inject_knowledge",
            format!("x_t has {} columns, knowledge {}", x_t.cols(), knowledge.cols()),
        ));
    }
    let mut tape = Tape::new();
    let (x, k) = (tape.leaf(x_t.clone()), tape.leaf(knowledge.clone()));
    let f = tape_inject_knowledge(&mut tape, x, k)?;
    Ok(tape.value(f).clone())
}

pub fn detect(x_t: &Matrix, f_know: &Matrix, params: &ModelParams) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape);
    let (x, f) = (tape.leaf(x_t.clone()), tape.leaf(f_know.clone()));
    let p = tape_detect(&mut tape, &vars, x, f)?;
    Ok(tape.value(p).data().to_vec())
}

pub fn aggregate(p: &[f64], x_t: &Matrix) -> Result<Vec<f64>> {
    if p.len() != x_t.rows() {
        return Err(Error::shape(
            "aggregate",
            format!("{} logits for {} frames", p.len(), x_t.rows()),
        ));
    }
    let mut tape = Tape::new();
    let pv = tape.leaf(Matrix::column_vector(p.to_vec())?);
    let x = tape.leaf(x_t.clone());
    let agg = tape_aggregate(&mut tape, pv, x)?;
    Ok(tape.value(agg).data().to_vec())
}

pub fn classify(x_agg: &[f64], catalog: &ClassCatalog, prompt_offset: &[f64]) -> Result<Vec<f64>> {
    if x_agg.len() != catalog.embeddings.cols() || prompt_offset.len() != x_agg.len() {
        return Err(Error::shape(
            "classify",
            format!(
                "x_agg {}, offset {}, catalog dim {}",
                x_agg.len(),
                prompt_offset.len(),
                catalog.embeddings.cols()
            ),
        ));
    }
    let mut tape = Tape::new();
    let v = tape.leaf(Matrix::row_vector(x_agg.to_vec())?);
    let off = tape.leaf(Matrix::row_vector(prompt_offset.to_vec())?);
    let logits = tape_classify(&mut tape, v, off, catalog)?;
    Ok(tape.value(logits).data().to_vec())
}

/// Index of the largest logit; ties go to the lower index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}
