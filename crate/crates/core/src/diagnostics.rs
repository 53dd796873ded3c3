//! Finite-difference checks of every differentiable path, shared by the
//! `gradcheck` command and the test suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::model::{ClassCatalog, KnowledgeBank, KnowledgeGroup, ModelConfig, ModelParams};
use crate::numkernel::{grad_check, Matrix, NamedTensors, Parameters, Tape, Var};
use crate::train::{batch_train_loss, batch_tune_loss, LossContext, PseudoSample, WeakSample};

pub const FD_EPS: f64 = 1e-5;

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_param: String,
    pub entries_checked: usize,
}

fn uniform(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.gen_range(-1.5..1.5)).collect();
    Matrix::new(rows, cols, data).expect("non-empty shape")
}

fn unit_rows(rows: usize, cols: usize, rng: &mut impl Rng) -> Matrix {
    let m = uniform(rows, cols, rng);
    let norms = m.l2_norm_rows();
    let mut data = m.into_data();
    for (r, chunk) in data.chunks_mut(cols).enumerate() {
        chunk.iter_mut().for_each(|v| *v /= norms[r]);
    }
    Matrix::new(rows, cols, data).expect("non-empty shape")
}

/// Loss is `sum(probe ⊙ f(inputs))` with a fixed random probe.
fn check_op(
    name: &str,
    inputs: Vec<(&str, Matrix)>,
    rng: &mut ChaCha8Rng,
    f: impl Fn(&mut Tape, &[Var]) -> Result<Var>,
) -> Result<CheckResult> {
    let params = NamedTensors::new(inputs.into_iter().map(|(n, m)| (n.to_string(), m)).collect());
    let probe = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|(_, m)| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let (r, c) = tape.value(out).shape();
        uniform(r, c, rng)
    };
    let report = grad_check(&params, FD_EPS, |p: &NamedTensors| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = p.iter().map(|(_, m)| tape.leaf(m.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let w = tape.leaf(probe.clone());
        let prod = tape.mul(out, w)?;
        let total = tape.sum(prod)?;
        let mut grads = tape.backward(total)?;
        Ok((tape.scalar(total), p.map_with(|i, _| grads.take(vars[i]))))
    })?;
    Ok(CheckResult {
        name: name.to_string(),
        max_rel_error: report.max_rel_error,
        worst_param: report.worst_param,
        entries_checked: report.entries_checked,
    })
}

/// One check per tape primitive.
pub fn primitive_checks(seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let a = uniform(4, 5, &mut rng);
    let b = uniform(4, 5, &mut rng);
    let positive = a.map(|x| x.abs() + 0.5);
    // kept away from the clamp corners where the derivative jumps
    let spread = a.map(|x| if x.abs() < 0.3 { x * 0.5 } else { x * 3.0 });
    let rhs = uniform(5, 3, &mut rng);
    let row = uniform(1, 5, &mut rng);
    let side = uniform(4, 2, &mut rng);
    let gamma = uniform(1, 5, &mut rng);
    let beta = uniform(1, 5, &mut rng);

    let one = |m: &Matrix| vec![("a", m.clone())];
    let two = |x: &Matrix, y: &Matrix| vec![("a", x.clone()), ("b", y.clone())];
    Ok(vec![
        check_op("matmul", two(&a, &rhs), &mut rng, |t, v| t.matmul(v[0], v[1]))?,
        check_op("add", two(&a, &b), &mut rng, |t, v| t.add(v[0], v[1]))?,
        check_op("sub", two(&a, &b), &mut rng, |t, v| t.sub(v[0], v[1]))?,
        check_op("mul", two(&a, &b), &mut rng, |t, v| t.mul(v[0], v[1]))?,
        check_op("add_row", two(&a, &row), &mut rng, |t, v| t.add_row(v[0], v[1]))?,
        check_op("concat_cols", two(&a, &side), &mut rng, |t, v| {
            t.concat_cols(v[0], v[1])
        })?,
        check_op("affine", one(&a), &mut rng, |t, v| t.affine(v[0], -2.5, 0.3))?,
        check_op("transpose", one(&a), &mut rng, |t, v| t.transpose(v[0]))?,
        check_op("sigmoid", one(&a), &mut rng, |t, v| t.sigmoid(v[0]))?,
        check_op("gelu", one(&a), &mut rng, |t, v| t.gelu(v[0]))?,
        check_op("log", one(&positive), &mut rng, |t, v| t.log(v[0]))?,
        check_op("clamp", one(&spread), &mut rng, |t, v| t.clamp(v[0], -1.0, 1.0))?,
        check_op("sum", one(&a), &mut rng, |t, v| t.sum(v[0]))?,
        check_op("mean", one(&a), &mut rng, |t, v| t.mean(v[0]))?,
        check_op("row_softmax", one(&a), &mut rng, |t, v| t.row_softmax(v[0]))?,
        check_op("row_log_softmax", one(&a), &mut rng, |t, v| t.row_log_softmax(v[0]))?,
        check_op("row_normalize", one(&a), &mut rng, |t, v| t.row_normalize(v[0]))?,
        check_op("row_top_k_mean", one(&a), &mut rng, |t, v| t.row_top_k_mean(v[0], 2))?,
        check_op("select_rows", one(&a), &mut rng, |t, v| t.select_rows(v[0], &[3, 0, 3]))?,
        check_op("select_cols", one(&a), &mut rng, |t, v| t.select_cols(v[0], &[4, 1, 1]))?,
        check_op(
            "layer_norm",
            vec![("x", a.clone()), ("gamma", gamma), ("beta", beta)],
            &mut rng,
            |t, v| t.layer_norm(v[0], v[1], v[2]),
        )?,
    ])
}

/// A tiny random problem: catalog, bank, perturbed parameters and videos.
struct Micro {
    catalog: ClassCatalog,
    bank: KnowledgeBank,
    cfg: ModelConfig,
    params: ModelParams,
    videos: Vec<Matrix>,
}

fn micro(rng: &mut ChaCha8Rng) -> Result<Micro> {
    let c = rng.gen_range(3..=6);
    let classes = rng.gen_range(3..=4);
    let names = (0..classes).map(|i| format!("class{i}")).collect();
    let flags = (0..classes).map(|i| i < 2).collect();
    let catalog = ClassCatalog::new(names, unit_rows(classes, c, rng), flags)?;
    let (normal, abnormal) = (rng.gen_range(1..=3), rng.gen_range(1..=4));
    let groups = (0..normal + abnormal)
        .map(|i| {
            if i < normal {
                KnowledgeGroup::Normal
            } else {
                KnowledgeGroup::Abnormal
            }
        })
        .collect();
    let phrases = (0..normal + abnormal).map(|i| format!("phrase{i}")).collect();
    let bank = KnowledgeBank::new(unit_rows(normal + abnormal, c, rng), groups, phrases)?;
    let cfg = ModelConfig {
        sigma: rng.gen_range(0.5..3.0),
        ..ModelConfig::default()
    };
    let mut params = ModelParams::init(c, &bank, &cfg, rng)?;
    for (_, t) in params.tensors_mut() {
        let noise = uniform(t.rows(), t.cols(), rng).map(|x| 0.3 * x);
        *t = t.zip_map(&noise, "perturb", |a, b| a + b)?;
    }
    let videos = (0..4).map(|_| uniform(rng.gen_range(2..=7), c, rng)).collect();
    Ok(Micro {
        catalog,
        bank,
        cfg,
        params,
        videos,
    })
}

fn report(name: String, r: crate::numkernel::GradCheckReport) -> CheckResult {
    CheckResult {
        name,
        max_rel_error: r.max_rel_error,
        worst_param: r.worst_param,
        entries_checked: r.entries_checked,
    }
}

/// Full training and fine-tuning losses on `instances` random micro problems.
pub fn loss_checks(instances: usize, seed: u64) -> Result<Vec<CheckResult>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(2 * instances);
    for i in 0..instances {
        let m = micro(&mut rng)?;
        let ctx = LossContext {
            catalog: &m.catalog,
            bank: &m.bank,
            model: &m.cfg,
        };
        let batch = [
            WeakSample {
                features: &m.videos[0],
                class_index: None,
            },
            WeakSample {
                features: &m.videos[1],
                class_index: Some(i % 2),
            },
        ];
        let base_space = m.catalog.base_indices();
        let r = grad_check(&m.params, FD_EPS, |p: &ModelParams| {
            let (l, g) = batch_train_loss(p, &batch, &ctx, &base_space)?;
            Ok((l.total, g))
        })?;
        out.push(report(format!("train_loss[{i}]"), r));

        let gts: Vec<Vec<u8>> = m.videos[2..]
            .iter()
            .map(|v| {
                let n = v.rows();
                let start = rng.gen_range(0..n);
                let len = rng.gen_range(1..=n - start);
                (0..n).map(|j| u8::from(j >= start && j < start + len)).collect()
            })
            .collect();
        let novel = m.catalog.novel_indices()[0];
        let pseudo: Vec<PseudoSample> = m.videos[2..]
            .iter()
            .zip(&gts)
            .map(|(v, gt)| PseudoSample {
                features: v,
                frame_gt: gt,
                class_index: novel,
            })
            .collect();
        let base = [WeakSample {
            features: &m.videos[1],
            class_index: Some(i % 2),
        }];
        let lambda = [0.0, 0.5, 1.0][i % 3];
        let r = grad_check(&m.params, FD_EPS, |p: &ModelParams| {
            let (l, g) = batch_tune_loss(p, &pseudo, &base, lambda, &ctx)?;
            Ok((l.total, g))
        })?;
        out.push(report(format!("tune_loss[{i}]"), r));
    }
    Ok(out)
}
