//! `pin`: synthesize corpora, train, evaluate and inspect PIN dialogue state
//! trackers.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage error.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use pin_core::corpus::synth::{overlap_groups, SPLIT_FILES};
use pin_core::corpus::{load_corpus, load_embeddings, load_ontology, synth_corpus, Corpus, SlotPair, SynthConfig};
use pin_core::eval::{goal_accuracy, inspect_copy, joint_goal_accuracy, per_slot_report, predict_corpus, slot_report};
use pin_core::grad::checkpoint::read_manifest;
use pin_core::grad::{OpKind, Scalar};
use pin_core::train::{gradcheck_full_model, group_errors, init_model, train, Precision};
use pin_core::{Model, TrainConfig};

const GRADCHECK_TOL: f64 = 1e-4;

#[derive(Parser)]
#[command(
    name = "pin",
    version,
    about = "Parallel interactive networks for dialogue state tracking"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (train/dev/test plus provenance sidecar).
    Synth(SynthArgs),
    /// Train a model and save the best checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on one split.
    Eval(EvalArgs),
    /// Dump copy attention and mixture weights for one decode.
    Inspect(InspectArgs),
    /// Finite-difference check of the full loss on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 17)]
    seed: u64,
    /// Training dialogues.
    #[arg(long, default_value_t = 500)]
    n_dialogues: usize,
    #[arg(long, default_value_t = 100)]
    n_dev: usize,
    #[arg(long, default_value_t = 100)]
    n_test: usize,
}

/// Corpus location: a directory holding `train.json`, `dev.json`, `test.json`.
#[derive(Args)]
struct CorpusArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Ontology file; defaults to the one embedded in `train.json`.
    #[arg(long)]
    ontology: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    /// Where to write the best checkpoint.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Pretrained embeddings (`token v1 ... vd` per line).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    /// JSON-lines training log.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value_t = 400)]
    hidden: usize,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 32)]
    batch: usize,
    #[arg(long, default_value_t = 0.001)]
    lr: f64,
    #[arg(long, default_value_t = 0.5)]
    teacher_forcing: f64,
    #[arg(long, default_value_t = 10)]
    max_decode_len: usize,
    #[arg(long, default_value_t = 6)]
    patience: usize,
    #[arg(long, value_enum, default_value_t = PrecisionArg::F32)]
    precision: PrecisionArg,
}

#[derive(Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    fn file(self) -> &'static str {
        SPLIT_FILES[self as usize]
    }
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    /// JSON object mapping a slot name to the domains sharing it, or `auto`
    /// to use every slot name shared in the ontology.
    #[arg(long)]
    overlap_spec: Option<String>,
}

#[derive(Args)]
struct InspectArgs {
    #[command(flatten)]
    corpus: CorpusArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Test)]
    split: Split,
    #[arg(long)]
    dialogue: String,
    /// Zero-based turn index.
    #[arg(long)]
    turn: usize,
    #[arg(long)]
    domain: String,
    #[arg(long)]
    slot: String,
    /// Tokens listed per distribution at each step.
    #[arg(long, default_value_t = 5)]
    top: usize,
    /// Write the record here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-5)]
    eps: f64,
    /// Corrupt one backward rule (negative control).
    #[arg(long, hide = true)]
    inject_fault: Option<OpKind>,
}

/// Bad invocation discovered after parsing; exits 2.
#[derive(Debug)]
struct Usage(String);

impl std::fmt::Display for Usage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    Usage(msg.into()).into()
}

/// Writes one line to stdout; a closed pipe is an error, not a panic.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    writeln!(out, "{text}")?;
    out.flush()?;
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        return Err(usage(format!("{what} {} does not exist", path.display())));
    }
    Ok(())
}

fn require_corpus_dir(args: &CorpusArgs, splits: &[Split]) -> Result<()> {
    if !args.corpus.is_dir() {
        return Err(usage(format!(
            "corpus directory {} does not exist",
            args.corpus.display()
        )));
    }
    for s in splits {
        require_file(&args.corpus.join(s.file()), "corpus file")?;
    }
    if let Some(o) = &args.ontology {
        require_file(o, "ontology")?;
    }
    Ok(())
}

fn load_split(args: &CorpusArgs, split: Split, ontology: Option<&pin_core::corpus::Ontology>) -> Result<Corpus> {
    let path = args.corpus.join(split.file());
    load_corpus(&path, ontology).with_context(|| format!("loading {}", path.display()))
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        n_dialogues: a.n_dialogues,
        n_dev: a.n_dev,
        n_test: a.n_test,
        ..SynthConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let corpus = synth_corpus(&cfg)?;
    corpus.save(&a.out)?;
    log::info!(
        "wrote {} / {} / {} dialogues and {} provenance records to {}",
        corpus.train.dialogues.len(),
        corpus.dev.dialogues.len(),
        corpus.test.dialogues.len(),
        corpus.provenance.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    require_corpus_dir(&a.corpus, &[Split::Train, Split::Dev])?;
    if let Some(e) = &a.embeddings {
        require_file(e, "embeddings file")?;
    }
    let cfg = TrainConfig {
        batch_size: a.batch,
        hidden_dim: a.hidden,
        embed_dim: a.hidden,
        lr: a.lr,
        teacher_forcing: a.teacher_forcing,
        max_decode_len: a.max_decode_len,
        epochs: a.epochs,
        patience: a.patience,
        seed: a.seed,
        precision: match a.precision {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        },
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    let ontology = a.corpus.ontology.as_deref().map(load_ontology).transpose()?;
    let train_set = load_split(&a.corpus, Split::Train, ontology.as_ref())?;
    let dev = load_split(&a.corpus, Split::Dev, Some(&train_set.ontology))?;
    match cfg.precision {
        Precision::F32 => train_with::<f32>(&a, &cfg, &train_set, &dev),
        Precision::F64 => train_with::<f64>(&a, &cfg, &train_set, &dev),
    }
}

fn train_with<T: Scalar>(a: &TrainArgs, cfg: &TrainConfig, train_set: &Corpus, dev: &Corpus) -> Result<()> {
    let mut model: Model<T> = init_model(train_set, cfg)?;
    if let Some(path) = &a.embeddings {
        let (table, coverage) = load_embeddings(path, &model.vocab, cfg.embed_dim, cfg.seed)?;
        log::info!("pretrained embeddings cover {:.1}% of the vocabulary", coverage * 100.0);
        model.set_embeddings(table)?;
    }
    let mut log_file = match &a.out {
        Some(p) => Some(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => None,
    };
    let mut write_err = None;
    let outcome = train(model, train_set, dev, cfg, |rec| {
        if let Some(w) = log_file.as_mut() {
            let line = serde_json::to_string(rec).expect("log record serializes");
            if let Err(e) = writeln!(w, "{line}").and_then(|_| w.flush()) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(anyhow!(e).context("writing training log"));
    }
    outcome.model.save(&a.checkpoint)?;
    let best = &outcome.log[outcome.best_epoch - 1];
    let summary = serde_json::json!({
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.log.len(),
        "dev_joint_goal": best.dev_joint_acc,
        "dev_goal": best.dev_goal_acc,
        "checkpoint": a.checkpoint,
    });
    emit(&serde_json::to_string_pretty(&summary)?)
}

fn parse_overlap_spec(spec: &str, ontology: &pin_core::corpus::Ontology) -> Result<BTreeMap<String, Vec<String>>> {
    if spec == "auto" {
        return Ok(overlap_groups(ontology));
    }
    let text = std::fs::read_to_string(spec).map_err(|e| usage(format!("overlap spec {spec}: {e}")))?;
    serde_json::from_str(&text).map_err(|e| usage(format!("overlap spec {spec}: {e}")))
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    require_corpus_dir(&a.corpus, &[a.split])?;
    require_file(&a.checkpoint, "checkpoint")?;
    match read_manifest(&a.checkpoint)?.dtype.as_str() {
        "f64" => eval_with(&a, Model::<f64>::load(&a.checkpoint)?),
        _ => eval_with(&a, Model::<f32>::load(&a.checkpoint)?),
    }
}

/// Loads `split` against the model's ontology, after checking that any
/// `--ontology` given agrees with it.
fn split_for_model<T>(args: &CorpusArgs, split: Split, model: &Model<T>) -> Result<Corpus> {
    if let Some(path) = &args.ontology {
        if load_ontology(path)? != model.ontology {
            bail!("ontology {} does not match the checkpoint's", path.display());
        }
    }
    load_split(args, split, Some(&model.ontology)).context("corpus does not fit the checkpoint")
}

fn eval_with<T: Scalar>(a: &EvalArgs, model: Model<T>) -> Result<()> {
    let data = split_for_model(&a.corpus, a.split, &model)?;
    let preds = predict_corpus(&model, &data)?;
    let per_slot: BTreeMap<String, f64> = per_slot_report(&preds, &model.ontology)
        .groups
        .iter()
        .flat_map(|g| &g.rows)
        .map(|r| (format!("{}-{}", r.domain, r.slot), r.accuracy))
        .collect();
    let mut out = serde_json::json!({
        "joint_goal": joint_goal_accuracy(&preds)?,
        "goal": goal_accuracy(&preds)?,
        "per_slot": per_slot,
    });
    if let Some(spec) = &a.overlap_spec {
        let spec = parse_overlap_spec(spec, &model.ontology)?;
        let report = slot_report(&preds, &model.ontology, &spec).map_err(|e| usage(e.to_string()))?;
        eprint!("{}", report.to_text());
        out["overlap"] = serde_json::to_value(&report)?;
    }
    emit(&serde_json::to_string_pretty(&out)?)
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    require_corpus_dir(&a.corpus, &[a.split])?;
    require_file(&a.checkpoint, "checkpoint")?;
    match read_manifest(&a.checkpoint)?.dtype.as_str() {
        "f64" => inspect_with(&a, Model::<f64>::load(&a.checkpoint)?),
        _ => inspect_with(&a, Model::<f32>::load(&a.checkpoint)?),
    }
}

fn inspect_with<T: Scalar>(a: &InspectArgs, model: Model<T>) -> Result<()> {
    let data = split_for_model(&a.corpus, a.split, &model)?;
    let Some(dialogue) = data.dialogue(&a.dialogue) else {
        let ids: Vec<&str> = data.dialogues.iter().map(|d| d.id.as_str()).collect();
        bail!("unknown dialogue id `{}`; available: {}", a.dialogue, ids.join(", "));
    };
    let pair = SlotPair::new(a.domain.clone(), a.slot.clone());
    let record = inspect_copy(&model, dialogue, a.turn, &pair, a.top)?;
    let text = serde_json::to_string_pretty(&record)?;
    match &a.out {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display()))?,
        None => emit(&text)?,
    }
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<bool> {
    let report = gradcheck_full_model(a.seed, a.eps, a.inject_fault)?;
    let mut ok = true;
    for (group, (err, name)) in group_errors(&report) {
        let pass = err < GRADCHECK_TOL;
        ok &= pass;
        emit(&format!(
            "{group:<6} {err:.3e}  {}  ({name})",
            if pass { "ok" } else { "FAIL" }
        ))?;
    }
    emit(&format!(
        "worst relative error {:.3e} (tolerance {GRADCHECK_TOL:e}): {}",
        report.max_rel_err(),
        if ok { "pass" } else { "fail" }
    ))?;
    Ok(ok)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Synth(a) => cmd_synth(a).map(|_| true),
        Command::Train(a) => cmd_train(a).map(|_| true),
        Command::Eval(a) => cmd_eval(a).map(|_| true),
        Command::Inspect(a) => cmd_inspect(a).map(|_| true),
        Command::Gradcheck(a) => cmd_gradcheck(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("PIN_LOG", "info")).init();
    let cli = Cli::parse();
    let name = match &cli.command {
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Eval(_) => "eval",
        Command::Inspect(_) => "inspect",
        Command::Gradcheck(_) => "gradcheck",
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) if e.is::<Usage>() => {
            eprintln!("error: {e}\n");
            let mut cmd = Cli::command();
            let sub = cmd.find_subcommand_mut(name).expect("subcommand exists");
            eprintln!("{}", sub.render_usage());
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
