#![allow(dead_code)]

use ovvad_core::model::{ClassCatalog, KnowledgeBank, KnowledgeGroup, ModelConfig, ModelParams};
use ovvad_core::numkernel::{Matrix, Parameters};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, data).unwrap()
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let m = random_matrix(rows, cols, 1.0, rng);
    let norms = m.l2_norm_rows();
    let mut data = m.data().to_vec();
    for r in 0..rows {
        for v in &mut data[r * cols..(r + 1) * cols] {
            *v /= norms[r];
        }
    }
    Matrix::new(rows, cols, data).unwrap()
}

pub fn catalog(k: usize, base: usize, dim: usize, rng: &mut impl Rng) -> ClassCatalog {
    let names = (0..k).map(|i| format!("class{i}")).collect();
    let flags = (0..k).map(|i| i < base).collect();
    ClassCatalog::new(names, unit_rows(k, dim, rng), flags).unwrap()
}

pub fn bank(normal: usize, abnormal: usize, dim: usize, rng: &mut impl Rng) -> KnowledgeBank {
    let l = normal + abnormal;
    let groups = (0..l)
        .map(|i| {
            if i < normal {
                KnowledgeGroup::Normal
            } else {
                KnowledgeGroup::Abnormal
            }
        })
        .collect();
    let phrases = (0..l).map(|i| format!("phrase{i}")).collect();
    KnowledgeBank::new(unit_rows(l, dim, rng), groups, phrases).unwrap()
}

/// Parameters with every tensor perturbed away from its initial value, so no
/// gradient path is trivially zero.
pub fn random_params(dim: usize, bank: &KnowledgeBank, cfg: &ModelConfig, rng: &mut impl Rng) -> ModelParams {
    let mut p = ModelParams::init(dim, bank, cfg, rng).unwrap();
    for (_, t) in p.tensors_mut() {
        let noise = random_matrix(t.rows(), t.cols(), 0.3, rng);
        *t = t.zip_map(&noise, "perturb", |a, b| a + b).unwrap();
    }
    p
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

/// All-pairs ROC-AUC with half credit for ties.
pub fn roc_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice += if si > sj {
                    2
                } else if si == sj {
                    1
                } else {
                    0
                };
            }
        }
    }
    twice as f64 / (2.0 * pairs as f64)
}

/// AP by enumerating every distinct threshold and recounting from scratch.
pub fn ap_oracle(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let (mut ap, mut prev_tp) = (0.0, 0usize);
    for t in thresholds {
        let tp = (0..scores.len()).filter(|&i| scores[i] >= t && labels[i] == 1).count();
        let fp = (0..scores.len()).filter(|&i| scores[i] >= t && labels[i] == 0).count();
        if tp > prev_tp {
            ap += ((tp - prev_tp) as f64 / pos as f64) * (tp as f64 / (tp + fp) as f64);
        }
        prev_tp = tp;
    }
    ap
}

/// Random scores on a coarse grid, so ties are common, with both labels present.
pub fn random_instance(rng: &mut impl Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.gen_range(2..=64);
    let levels = rng.gen_range(2..=20);
    let scores: Vec<f64> = (0..n)
        .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
        .collect();
    let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
    labels[0] = 1;
    labels[1] = 0;
    (scores, labels)
}
