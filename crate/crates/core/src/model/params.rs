use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::catalog::KnowledgeBank;
use crate::error::{Error, Result};
use crate::numkernel::{Gradients, Matrix, Parameters, Tape, Var};

pub const DEFAULT_SIGMA: f64 = 0.07;

/// Architecture switches. Disabling a module is how the ablation arms are run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Distance scale of the temporal adjacency.
    pub sigma: f64,
    /// Off: frames are layer-normalized without temporal mixing.
    pub temporal_adapter: bool,
    /// Off: the detector sees zeros in place of injected knowledge and the
    /// similarity losses are dropped.
    pub knowledge_injection: bool,
    /// Detector hidden width; `None` means equal to the feature dimension.
    pub hidden: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            sigma: DEFAULT_SIGMA,
            temporal_adapter: true,
            knowledge_injection: true,
            hidden: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.hidden == Some(0) {
            return Err(Error::Config("hidden width must be positive".into()));
        }
        Ok(())
    }
}

/// Every trainable tensor. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// 1×c
    pub ln_gamma: Matrix,
    /// 1×c
    pub ln_beta: Matrix,
    /// 2c×h
    pub w1: Matrix,
    /// 1×h
    pub b1: Matrix,
    /// h×1
    pub w2: Matrix,
    /// 1×1
    pub b2: Matrix,
    /// 1×c, shared additive offset on the class text embeddings.
    pub prompt_offset: Matrix,
    /// l×c knowledge embeddings.
    pub knowledge: Matrix,
}

pub const PARAM_NAMES: [&str; 8] = [
    "ln_gamma",
    "ln_beta",
    "detector.w1",
    "detector.b1",
    "detector.w2",
    "detector.b2",
    "prompt_offset",
    "knowledge",
];

impl Parameters for ModelParams {
    fn tensors(&self) -> Vec<(&str, &Matrix)> {
        PARAM_NAMES
            .into_iter()
            .zip([
                &self.ln_gamma,
                &self.ln_beta,
                &self.w1,
                &self.b1,
                &self.w2,
                &self.b2,
                &self.prompt_offset,
                &self.knowledge,
            ])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<(&str, &mut Matrix)> {
        PARAM_NAMES
            .into_iter()
            .zip([
                &mut self.ln_gamma,
                &mut self.ln_beta,
                &mut self.w1,
                &mut self.b1,
                &mut self.w2,
                &mut self.b2,
                &mut self.prompt_offset,
                &mut self.knowledge,
            ])
            .collect()
    }
}

fn xavier(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let std = (2.0 / (rows + cols) as f64).sqrt();
    let dist = Normal::new(0.0, std).expect("positive std");
    let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
    Matrix::new(rows, cols, data).expect("finite samples")
}

/// Tape handles for each parameter tensor.
#[derive(Clone, Copy, Debug)]
pub struct ParamVars {
    pub ln_gamma: Var,
    pub ln_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
    pub prompt_offset: Var,
    pub knowledge: Var,
}

impl ModelParams {
    /// Layer norm starts at identity, biases and prompt offset at zero,
    /// detector weights Xavier-normal, knowledge from the bank.
    pub fn init(dim: usize, bank: &KnowledgeBank, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        if bank.embeddings.cols() != dim {
            return Err(Error::shape(
                "ModelParams::init",
                format!("knowledge dim {} vs feature dim {dim}", bank.embeddings.cols()),
            ));
        }
        let h = cfg.hidden.unwrap_or(dim);
        Ok(Self {
            ln_gamma: Matrix::filled(1, dim, 1.0)?,
            ln_beta: Matrix::zeros(1, dim),
            w1: xavier(2 * dim, h, rng),
            b1: Matrix::zeros(1, h),
            w2: xavier(h, 1, rng),
            b2: Matrix::zeros(1, 1),
            prompt_offset: Matrix::zeros(1, dim),
            knowledge: bank.embeddings.clone(),
        })
    }

    pub fn dim(&self) -> usize {
        self.ln_gamma.cols()
    }

    pub fn hidden(&self) -> usize {
        self.b1.cols()
    }

    /// Rebuilds from named tensors, checking names and mutual shapes.
    pub fn from_named(mut entries: Vec<(String, Matrix)>) -> Result<Self> {
        let mut take = |name: &str| -> Result<Matrix> {
            let pos = entries
                .iter()
                .position(|(n, _)| n == name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks tensor `{name}`")))?;
            Ok(entries.swap_remove(pos).1)
        };
        let params = Self {
            ln_gamma: take("ln_gamma")?,
            ln_beta: take("ln_beta")?,
            w1: take("detector.w1")?,
            b1: take("detector.b1")?,
            w2: take("detector.w2")?,
            b2: take("detector.b2")?,
            prompt_offset: take("prompt_offset")?,
            knowledge: take("knowledge")?,
        };
        if let Some((extra, _)) = entries.first() {
            return Err(Error::Config(format!("unexpected tensor `{extra}`")));
        }
        params.check_shapes()?;
        Ok(params)
    }

    pub fn check_shapes(&self) -> Result<()> {
        let c = self.dim();
        let h = self.hidden();
        let expect = [
            (1, c),
            (1, c),
            (2 * c, h),
            (1, h),
            (h, 1),
            (1, 1),
            (1, c),
            (self.knowledge.rows(), c),
        ];
        for ((name, t), want) in self.tensors().into_iter().zip(expect) {
            if t.shape() != want {
                return Err(Error::shape(
                    "ModelParams",
                    format!("`{name}` is {}x{}, expected {}x{}", t.rows(), t.cols(), want.0, want.1),
                ));
            }
        }
        Ok(())
    }

    pub fn bind(&self, tape: &mut Tape) -> ParamVars {
        ParamVars {
            ln_gamma: tape.leaf(self.ln_gamma.clone()),
            ln_beta: tape.leaf(self.ln_beta.clone()),
            w1: tape.leaf(self.w1.clone()),
            b1: tape.leaf(self.b1.clone()),
            w2: tape.leaf(self.w2.clone()),
            b2: tape.leaf(self.b2.clone()),
            prompt_offset: tape.leaf(self.prompt_offset.clone()),
            knowledge: tape.leaf(self.knowledge.clone()),
        }
    }

    /// Collects the gradient of each bound tensor.
    pub fn gradients(vars: &ParamVars, grads: &mut Gradients) -> Self {
        Self {
            ln_gamma: grads.take(vars.ln_gamma),
            ln_beta: grads.take(vars.ln_beta),
            w1: grads.take(vars.w1),
            b1: grads.take(vars.b1),
            w2: grads.take(vars.w2),
            b2: grads.take(vars.b2),
            prompt_offset: grads.take(vars.prompt_offset),
            knowledge: grads.take(vars.knowledge),
        }
    }

    pub(crate) fn add_scaled(&mut self, other: &ModelParams, weight: f64) {
        for ((_, a), (_, b)) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (x, y) in a.data_mut().iter_mut().zip(b.data()) {
                *x += weight * y;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors()
            .iter()
            .all(|(_, t)| t.data().iter().all(|v| v.is_finite()))
    }
}
