use std::env;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ovvad_core::data::{gen_synthetic, read_json, write_json, Corpus, Manifest, SyntheticConfig};
use ovvad_core::diagnostics::{loss_checks, primitive_checks, CheckResult};
use ovvad_core::eval::{evaluate, render_table, write_report, EvalReport};
use ovvad_core::model::{load_checkpoint, save_checkpoint};
use ovvad_core::nas::{load_pseudo_set, save_pseudo_set, SnippetBank};
use ovvad_core::train::{finetune_stage2, synthesize_pseudo, train_stage1, write_loss_csv, TrainConfig};
use ovvad_core::{Error, ErrorKind};
use serde::{Deserialize, Serialize};

const GRADCHECK_LIMIT: f64 = 1e-3;
const THREADS_VAR: &str = "OVVAD_THREADS";

/// Everything a command needs. Paths are optional here and checked per command.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct RunConfig {
    manifest: Option<PathBuf>,
    /// Overrides the catalog named in the manifest.
    catalog: Option<PathBuf>,
    /// Overrides the knowledge bank named in the manifest.
    knowledge_bank: Option<PathBuf>,
    snippet_bank: Option<PathBuf>,
    pseudo_set: Option<PathBuf>,
    checkpoint: Option<PathBuf>,
    out: Option<PathBuf>,
    train: TrainConfig,
    synthetic: SyntheticConfig,
    seed: Option<u64>,
}

#[derive(Parser)]
#[command(
    name = "ovvad",
    version,
    about = "Open-vocabulary video anomaly detection on precomputed features"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (features, sidecars, snippet bank).
    GenSynthetic(Common),
    /// Stage-1 training; writes stage1.ckpt and stage1_loss.csv.
    Train(Common),
    /// Build pseudo novel-anomaly videos from the snippet bank.
    Synth(Common),
    /// Stage-2 fine-tuning from a stage-1 checkpoint; writes stage2.ckpt.
    Finetune(Common),
    /// Score the test split; writes report.json and curve CSVs.
    Eval(Common),
    /// Finite-difference check of all gradients.
    Gradcheck(GradcheckArgs),
    /// Print a results table from a report.json (or a directory holding one).
    Report(ReportArgs),
}

#[derive(Args, Clone, Default)]
struct Common {
    /// RunConfig JSON; flags below override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    sigma: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    /// Epochs of the stage the command runs.
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    snippets: Option<PathBuf>,
    #[arg(long)]
    pseudo: Option<PathBuf>,
    /// Turn off the temporal adapter.
    #[arg(long)]
    no_temporal_adapter: bool,
    /// Turn off knowledge injection and the similarity losses.
    #[arg(long)]
    no_knowledge: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 20)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReportArgs {
    /// report.json or the directory containing it.
    path: PathBuf,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(Error),
    GradCheck(f64),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Core(e) => match e.kind() {
                ErrorKind::Usage => 1,
                ErrorKind::Data => 2,
                ErrorKind::Numerical => 3,
            },
            CliError::GradCheck(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Core(e) => write!(f, "{e}"),
            CliError::GradCheck(err) => {
                write!(
                    f,
                    "gradient check failed: max relative error {err:.3e} exceeds {GRADCHECK_LIMIT:e}"
                )
            }
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage<T>(msg: impl Into<String>) -> CliResult<T> {
    Err(CliError::Usage(msg.into()))
}

fn absolute(p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        env::current_dir().map(|d| d.join(&p)).unwrap_or(p)
    }
}

/// Reads the config file, applies flag overrides, and resolves the seed.
fn resolve(args: &Common) -> CliResult<RunConfig> {
    let mut cfg: RunConfig = match &args.config {
        Some(path) => {
            if !path.exists() {
                return Err(Error::Load {
                    path: path.clone(),
                    reason: "config file not found".into(),
                }
                .into());
            }
            read_json(path)?
        }
        None => RunConfig::default(),
    };
    let base = args
        .config
        .as_ref()
        .and_then(|p| absolute(p.clone()).parent().map(Path::to_path_buf));
    // paths inside a config file are relative to that file
    let rebase = |p: Option<PathBuf>| match (&base, p) {
        (Some(b), Some(p)) if p.is_relative() => Some(b.join(p)),
        (_, p) => p.map(absolute),
    };
    cfg.manifest = rebase(cfg.manifest.take());
    cfg.catalog = rebase(cfg.catalog.take());
    cfg.knowledge_bank = rebase(cfg.knowledge_bank.take());
    cfg.snippet_bank = rebase(cfg.snippet_bank.take());
    cfg.pseudo_set = rebase(cfg.pseudo_set.take());
    cfg.checkpoint = rebase(cfg.checkpoint.take());
    cfg.out = rebase(cfg.out.take());

    let flag_path = |p: &Option<PathBuf>| p.clone().map(absolute);
    cfg.manifest = flag_path(&args.manifest).or(cfg.manifest);
    cfg.checkpoint = flag_path(&args.checkpoint).or(cfg.checkpoint);
    cfg.snippet_bank = flag_path(&args.snippets).or(cfg.snippet_bank);
    cfg.pseudo_set = flag_path(&args.pseudo).or(cfg.pseudo_set);
    cfg.out = flag_path(&args.out).or(cfg.out);

    if let Some(s) = args.seed.or(cfg.seed) {
        cfg.seed = Some(s);
        cfg.train.seed = s;
        cfg.synthetic.seed = s;
    }
    if let Some(s) = args.sigma {
        cfg.train.model.sigma = s;
    }
    if let Some(l) = args.lambda {
        cfg.train.stage2.lambda = l;
    }
    if args.no_temporal_adapter {
        cfg.train.model.temporal_adapter = false;
    }
    if args.no_knowledge {
        cfg.train.model.knowledge_injection = false;
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    let Some(dir) = cfg.out.clone() else {
        return usage("an output directory is required (--out or `out` in the config)");
    };
    fs::create_dir_all(&dir).map_err(|source| Error::Io {
        path: dir.clone(),
        source,
    })?;
    Ok(dir)
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str, flag: &str) -> CliResult<&'a PathBuf> {
    match p {
        Some(p) => Ok(p),
        None => usage(format!("{what} is required ({flag})")),
    }
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> CliResult<()> {
    write_json(dir.join("config.json"), cfg)?;
    Ok(())
}

fn load_corpus(cfg: &RunConfig) -> CliResult<Corpus> {
    let path = required(&cfg.manifest, "a manifest", "--manifest")?;
    let mut manifest = Manifest::load(path)?;
    if let Some(c) = &cfg.catalog {
        manifest.class_catalog_path = c.clone();
    }
    if let Some(k) = &cfg.knowledge_bank {
        manifest.knowledge_bank_path = k.clone();
    }
    Ok(Corpus::from_manifest(manifest)?)
}

/// The snippet bank from the config, or the `snippets/` directory beside the manifest.
fn snippet_dir(cfg: &RunConfig) -> CliResult<PathBuf> {
    if let Some(p) = &cfg.snippet_bank {
        return Ok(p.clone());
    }
    let manifest = required(&cfg.manifest, "a manifest", "--manifest")?;
    Ok(manifest.parent().unwrap_or(Path::new(".")).join("snippets"))
}

/// Saves the last finite parameters before surfacing a divergence.
fn keep_last_finite(e: Error, dir: &Path, stem: &str) -> CliError {
    if let Error::Divergence { last_finite, .. } = &e {
        let path = dir.join(format!("{stem}_last_finite.ckpt"));
        if save_checkpoint(last_finite, &path).is_ok() {
            eprintln!("last finite parameters written to {}", path.display());
        }
    }
    e.into()
}

fn gen_synthetic_cmd(args: &Common) -> CliResult<()> {
    let cfg = resolve(args)?;
    let dir = out_dir(&cfg)?;
    let corpus = gen_synthetic(&cfg.synthetic)?;
    let manifest = corpus.write(&dir)?;
    echo_config(&cfg, &dir)?;
    println!("wrote {} videos; manifest {}", corpus.videos.len(), manifest.display());
    Ok(())
}

fn train_cmd(args: &Common) -> CliResult<()> {
    let mut cfg = resolve(args)?;
    if let Some(e) = args.epochs {
        cfg.train.stage1.epochs = e;
    }
    let dir = out_dir(&cfg)?;
    let corpus = load_corpus(&cfg)?;
    echo_config(&cfg, &dir)?;
    let out = train_stage1(&corpus, &cfg.train).map_err(|e| keep_last_finite(e, &dir, "stage1"))?;
    save_checkpoint(&out.params, dir.join("stage1.ckpt"))?;
    write_loss_csv(&out.history, dir.join("stage1_loss.csv"))?;
    if let Some(last) = out.history.last() {
        println!(
            "stage 1 done: {} epochs, final loss {:.6}",
            last.epoch + 1,
            last.loss.total
        );
    }
    Ok(())
}

fn synth_cmd(args: &Common) -> CliResult<()> {
    let cfg = resolve(args)?;
    let dir = out_dir(&cfg)?;
    let corpus = load_corpus(&cfg)?;
    let bank = SnippetBank::load_dir(snippet_dir(&cfg)?)?;
    echo_config(&cfg, &dir)?;
    let set = synthesize_pseudo(&corpus, &bank, &cfg.train)?;
    let index = save_pseudo_set(&set, dir.join("pseudo"))?;
    println!("wrote {} pseudo videos; index {}", set.len(), index.display());
    Ok(())
}

fn finetune_cmd(args: &Common) -> CliResult<()> {
    let mut cfg = resolve(args)?;
    if let Some(e) = args.epochs {
        cfg.train.stage2.epochs = e;
    }
    let dir = out_dir(&cfg)?;
    let corpus = load_corpus(&cfg)?;
    let params = load_checkpoint(required(&cfg.checkpoint, "a stage-1 checkpoint", "--checkpoint")?)?;
    let pseudo = load_pseudo_set(required(&cfg.pseudo_set, "a pseudo set", "--pseudo")?)?;
    echo_config(&cfg, &dir)?;
    let out = finetune_stage2(&corpus, &pseudo, params, &cfg.train).map_err(|e| keep_last_finite(e, &dir, "stage2"))?;
    save_checkpoint(&out.params, dir.join("stage2.ckpt"))?;
    write_loss_csv(&out.history, dir.join("stage2_loss.csv"))?;
    if let Some(last) = out.history.last() {
        println!(
            "stage 2 done: {} epochs, final loss {:.6}",
            last.epoch + 1,
            last.loss.total
        );
    }
    Ok(())
}

fn eval_cmd(args: &Common) -> CliResult<()> {
    let cfg = resolve(args)?;
    let dir = out_dir(&cfg)?;
    let params = load_checkpoint(required(&cfg.checkpoint, "a checkpoint", "--checkpoint")?)?;
    let corpus = load_corpus(&cfg)?;
    echo_config(&cfg, &dir)?;
    let report = evaluate(&params, &corpus, &cfg.train.model)?;
    write_report(&report, &dir)?;
    print!("{}", render_table(&report));
    if !report.excluded_videos.is_empty() {
        println!(
            "{} abnormal videos without frame labels were left out of AUC/AP",
            report.excluded_videos.len()
        );
    }
    Ok(())
}

fn gradcheck_cmd(args: &GradcheckArgs) -> CliResult<()> {
    let mut checks: Vec<CheckResult> = primitive_checks(args.seed)?;
    checks.extend(loss_checks(args.instances, args.seed.wrapping_add(1))?);
    let worst = checks
        .iter()
        .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
        .expect("suite is never empty");
    println!(
        "{} checks, max relative error {:.3e} ({} / {})",
        checks.len(),
        worst.max_rel_error,
        worst.name,
        worst.worst_param
    );
    if worst.max_rel_error > GRADCHECK_LIMIT || !worst.max_rel_error.is_finite() {
        return Err(CliError::GradCheck(worst.max_rel_error));
    }
    Ok(())
}

fn report_cmd(args: &ReportArgs) -> CliResult<()> {
    let path = if args.path.is_dir() {
        args.path.join("report.json")
    } else {
        args.path.clone()
    };
    let report: EvalReport = read_json(&path)?;
    print!("{}", render_table(&report));
    Ok(())
}

fn configure_threads() -> CliResult<()> {
    let Ok(raw) = env::var(THREADS_VAR) else {
        return Ok(());
    };
    let Ok(n) = raw.trim().parse::<usize>() else {
        return usage(format!("{THREADS_VAR} must be a non-negative integer, got `{raw}`"));
    };
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Usage(format!("cannot size the worker pool: {e}")))?;
    }
    Ok(())
}

fn run(cli: Cli) -> CliResult<()> {
    configure_threads()?;
    match &cli.command {
        Command::GenSynthetic(a) => gen_synthetic_cmd(a),
        Command::Train(a) => train_cmd(a),
        Command::Synth(a) => synth_cmd(a),
        Command::Finetune(a) => finetune_cmd(a),
        Command::Eval(a) => eval_cmd(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Report(a) => report_cmd(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
