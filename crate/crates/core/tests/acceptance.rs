//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use ovvad_core::data::{gen_synthetic, Corpus, FeatureSequence, SyntheticConfig};
use ovvad_core::diagnostics::{loss_checks, primitive_checks};
use ovvad_core::eval::{evaluate, pr_auc, roc_auc, EvalReport};
use ovvad_core::model::{
    build_adjacency, encode_checkpoint, temporal_adapt, temporal_mixing, ModelConfig, ModelParams,
};
use ovvad_core::nas::SnippetBank;
use ovvad_core::numkernel::Matrix;
use ovvad_core::train::{finetune_stage2, synthesize_pseudo, train_stage1, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const GRAD_TOL: f64 = 1e-4;
const GRAD_BUDGET: Duration = Duration::from_secs(60);
const MICRO_INSTANCES: usize = 20;
const ORACLE_INSTANCES: usize = 1000;
const EXAMPLE_TOL: f64 = 1e-4;
const IDENTITY_MASS: f64 = 1e-6;
const E2E_AUC: f64 = 0.95;
const E2E_BUDGET: Duration = Duration::from_secs(300);
const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

struct Outcome {
    name: &'static str,
    pass: bool,
    detail: String,
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let mut checks = primitive_checks(11).expect("primitive checks");
    checks.extend(loss_checks(MICRO_INSTANCES, 12).expect("loss checks"));
    let elapsed = start.elapsed();
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("non-empty suite");
    Outcome {
        name: "gradient suite",
        pass: worst.max_rel_error < GRAD_TOL && elapsed < GRAD_BUDGET,
        detail: format!(
            "{} checks, worst {:.2e} at {} ({}), {:.1}s",
            checks.len(),
            worst.max_rel_error,
            worst.name,
            worst.worst_param,
            elapsed.as_secs_f64()
        ),
    }
}

fn all_pairs_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice += if si > sj { 2 } else { u64::from(si == sj) };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

fn enumerated_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    let (mut ap, mut prev_tp) = (0.0, 0usize);
    for t in thresholds {
        let tp = (0..scores.len()).filter(|&i| scores[i] >= t && labels[i] == 1).count();
        let fp = (0..scores.len()).filter(|&i| scores[i] >= t && labels[i] == 0).count();
        if tp > prev_tp {
            ap += (tp - prev_tp) as f64 / pos * tp as f64 / (tp + fp) as f64;
        }
        prev_tp = tp;
    }
    ap
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut mismatches = 0;
    for _ in 0..ORACLE_INSTANCES {
        let n = rng.gen_range(2..=64);
        let levels = rng.gen_range(2..=20);
        let scores: Vec<f64> = (0..n)
            .map(|_| rng.gen_range(0..levels) as f64 / levels as f64)
            .collect();
        let mut labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.4))).collect();
        labels[0] = 1;
        labels[1] = 0;
        let roc = roc_auc(&scores, &labels).expect("roc");
        let ap = pr_auc(&scores, &labels).expect("ap");
        // the oracles accumulate in a different order, so compare to rounding
        if (roc - all_pairs_auc(&scores, &labels)).abs() > 1e-12 || (ap - enumerated_ap(&scores, &labels)).abs() > 1e-12
        {
            mismatches += 1;
        }
    }
    let auc_example = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).expect("roc example");
    let ap_example = pr_auc(&[0.9, 0.8, 0.7], &[1, 0, 1]).expect("ap example");
    let examples_ok = (auc_example - 0.75).abs() < EXAMPLE_TOL && (ap_example - 0.8333).abs() < EXAMPLE_TOL;
    Outcome {
        name: "metric oracles",
        pass: mismatches == 0 && examples_ok,
        detail: format!(
            "{mismatches}/{ORACLE_INSTANCES} mismatches, example auc {auc_example:.4}, example ap {ap_example:.4}"
        ),
    }
}

fn mixing_structure() -> Outcome {
    let mut failures = Vec::new();
    let mut worst_mass: f64 = 0.0;
    for n in [1usize, 2, 3, 7, 16, 64, 128, 256] {
        for sigma in [0.07, 1.0, 2.0] {
            let h = build_adjacency(n, sigma).expect("adjacency");
            for i in 0..n {
                if h.get(i, i) != 0.0 {
                    failures.push(format!("diag n={n}"));
                }
                for j in 0..n {
                    if h.get(i, j) != h.get(j, i) {
                        failures.push(format!("symmetry n={n}"));
                    }
                    if i > 0 && j > 0 && h.get(i, j) != h.get(i - 1, j - 1) {
                        failures.push(format!("toeplitz n={n}"));
                    }
                }
            }
            let m = temporal_mixing(n, sigma).expect("mixing");
            for i in 0..n {
                if (m.row(i).iter().sum::<f64>() - 1.0).abs() > 1e-12 {
                    failures.push(format!("row sum n={n} sigma={sigma}"));
                }
            }
        }
        let m = temporal_mixing(n, 1e-3).expect("mixing");
        for i in 0..n {
            let off: f64 = (0..n).filter(|&j| j != i).map(|j| m.get(i, j)).sum();
            worst_mass = worst_mass.max(off);
        }
    }
    // the same near-identity holds through the adapter itself
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let x = Matrix::new(256, 8, (0..256 * 8).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape");
    let seq = FeatureSequence::new(x.clone()).expect("seq");
    let bank = ovvad_core::model::KnowledgeBank::new(
        Matrix::filled(2, 8, 0.5).expect("shape"),
        vec![
            ovvad_core::model::KnowledgeGroup::Normal,
            ovvad_core::model::KnowledgeGroup::Abnormal,
        ],
        vec!["a".into(), "b".into()],
    )
    .expect("bank");
    let sharp = ModelConfig {
        sigma: 1e-3,
        ..ModelConfig::default()
    };
    let params = ModelParams::init(8, &bank, &sharp, &mut rng).expect("params");
    let mixed = temporal_adapt(&seq, &params, &sharp).expect("adapt");
    let plain = temporal_adapt(
        &seq,
        &params,
        &ModelConfig {
            temporal_adapter: false,
            ..sharp.clone()
        },
    )
    .expect("adapt");
    let adapter_gap = mixed
        .data()
        .iter()
        .zip(plain.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    failures.dedup();
    Outcome {
        name: "temporal mixing structure",
        pass: failures.is_empty() && worst_mass < IDENTITY_MASS && adapter_gap < 1e-6,
        detail: format!(
            "{} structural failures, worst off-diagonal mass at sigma=1e-3 {worst_mass:.1e}, adapter gap {adapter_gap:.1e}",
            failures.len()
        ),
    }
}

struct PipelineRun {
    stage1_report: EvalReport,
    stage1_secs: f64,
    bytes: Vec<u8>,
}

/// Synthetic corpus, stage 1, pseudo synthesis, stage 2, evaluation.
fn full_pipeline(seed: u64) -> PipelineRun {
    let syn = gen_synthetic(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    })
    .expect("synthetic corpus");
    let corpus = syn.to_corpus().expect("corpus");
    let mut cfg = TrainConfig::desk_scale();
    cfg.seed = seed;
    let start = Instant::now();
    let s1 = train_stage1(&corpus, &cfg).expect("stage 1");
    let stage1_secs = start.elapsed().as_secs_f64();
    let stage1_report = evaluate(&s1.params, &corpus, &cfg.model).expect("eval");
    let bank = SnippetBank::new(syn.snippets.clone());
    let pseudo = synthesize_pseudo(&corpus, &bank, &cfg).expect("pseudo");
    let s2 = finetune_stage2(&corpus, &pseudo, s1.params.clone(), &cfg).expect("stage 2");
    let report = evaluate(&s2.params, &corpus, &cfg.model).expect("eval");
    let mut bytes = encode_checkpoint(&s1.params);
    bytes.extend(encode_checkpoint(&s2.params));
    bytes.extend(serde_json::to_vec(&stage1_report).expect("json"));
    bytes.extend(serde_json::to_vec(&report).expect("json"));
    PipelineRun {
        stage1_report,
        stage1_secs,
        bytes,
    }
}

fn end_to_end(run: &PipelineRun, epochs: usize) -> Outcome {
    let auc = run.stage1_report.auc_base.unwrap_or(f64::NAN);
    Outcome {
        name: "end-to-end synthetic run",
        pass: auc >= E2E_AUC && epochs <= 20 && run.stage1_secs < E2E_BUDGET.as_secs_f64(),
        detail: format!(
            "seed 7, base-class frame AUC {auc:.4} after {epochs} epochs in {:.1}s",
            run.stage1_secs
        ),
    }
}

fn determinism(a: &PipelineRun, b: &PipelineRun) -> Outcome {
    Outcome {
        name: "determinism",
        pass: a.bytes == b.bytes,
        detail: format!("{} bytes of checkpoints and reports compared", a.bytes.len()),
    }
}

struct SeedArtifacts {
    corpus: Corpus,
    bank: SnippetBank,
    cfg: TrainConfig,
    full_params: ModelParams,
    full: EvalReport,
    no_ta: EvalReport,
    no_ski: EvalReport,
}

fn ablation_arms(seed: u64) -> SeedArtifacts {
    let syn = gen_synthetic(&SyntheticConfig {
        seed,
        ..SyntheticConfig::default()
    })
    .expect("synthetic corpus");
    let corpus = syn.to_corpus().expect("corpus");
    let mut cfg = TrainConfig::desk_scale();
    cfg.seed = seed;
    let arm = |ta: bool, ski: bool| {
        let mut c = cfg.clone();
        c.model.temporal_adapter = ta;
        c.model.knowledge_injection = ski;
        let out = train_stage1(&corpus, &c).expect("stage 1");
        let report = evaluate(&out.params, &corpus, &c.model).expect("eval");
        (out.params, report)
    };
    let (full_params, full) = arm(true, true);
    let (_, no_ta) = arm(false, true);
    let (_, no_ski) = arm(true, false);
    SeedArtifacts {
        bank: SnippetBank::new(syn.snippets.clone()),
        corpus,
        cfg,
        full_params,
        full,
        no_ta,
        no_ski,
    }
}

fn ablation(arts: &[SeedArtifacts]) -> Outcome {
    let mean = |f: &dyn Fn(&SeedArtifacts) -> f64| arts.iter().map(f).sum::<f64>() / arts.len() as f64;
    let full = mean(&|a| a.full.auc.unwrap_or(f64::NAN));
    let no_ta = mean(&|a| a.no_ta.auc.unwrap_or(f64::NAN));
    let no_ski = mean(&|a| a.no_ski.auc.unwrap_or(f64::NAN));
    Outcome {
        name: "ablation direction",
        pass: full >= no_ta && full >= no_ski,
        detail: format!(
            "mean held-out AUC over {} seeds: full {full:.4}, without TA {no_ta:.4}, without SKI {no_ski:.4}",
            arts.len()
        ),
    }
}

fn fine_tune_trend(arts: &[SeedArtifacts]) -> Outcome {
    let mut gains = 0;
    let mut preserved = 0;
    let mut lines = Vec::new();
    for a in arts {
        let pseudo = synthesize_pseudo(&a.corpus, &a.bank, &a.cfg).expect("pseudo");
        let mixed = finetune_stage2(&a.corpus, &pseudo, a.full_params.clone(), &a.cfg).expect("stage 2");
        let mut only_cfg = a.cfg.clone();
        only_cfg.stage2.base_per_batch = 0;
        let only = finetune_stage2(&a.corpus, &pseudo, a.full_params.clone(), &only_cfg).expect("stage 2");
        let r_mixed = evaluate(&mixed.params, &a.corpus, &a.cfg.model).expect("eval");
        let r_only = evaluate(&only.params, &a.corpus, &a.cfg.model).expect("eval");
        let acc = |r: &EvalReport| (r.acc_base.unwrap_or(f64::NAN), r.acc_novel.unwrap_or(f64::NAN));
        let (b0, n0) = acc(&a.full);
        let (b1, n1) = acc(&r_mixed);
        let (b2, _) = acc(&r_only);
        gains += usize::from(n1 > n0);
        preserved += usize::from(b0 - b1 < b0 - b2);
        lines.push(format!("novel {n0:.3}->{n1:.3} base {b0:.3}->{b1:.3}|{b2:.3}"));
    }
    let majority = arts.len() / 2 + 1;
    Outcome {
        name: "fine-tune trend",
        pass: gains >= majority && preserved >= majority,
        detail: format!(
            "novel gain {gains}/{n}, base preserved better than pseudo-only {preserved}/{n} [{}]",
            lines.join("; "),
            n = arts.len()
        ),
    }
}

fn main() -> ExitCode {
    let report = |o: &Outcome| {
        println!("{} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.name, o.detail);
        o.pass
    };
    let mut all = true;
    all &= report(&gradient_suite());
    all &= report(&metric_oracles());
    all &= report(&mixing_structure());

    let epochs = TrainConfig::desk_scale().stage1.epochs;
    let first = full_pipeline(7);
    all &= report(&end_to_end(&first, epochs));

    let arts: Vec<SeedArtifacts> = SEEDS.iter().map(|&s| ablation_arms(s)).collect();
    all &= report(&fine_tune_trend(&arts));
    all &= report(&ablation(&arts));

    let second = full_pipeline(7);
    all &= report(&determinism(&first, &second));

    if all {
        println!("acceptance: all criteria pass");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: at least one criterion failed");
        ExitCode::FAILURE
    }
}
