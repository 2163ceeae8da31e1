//! Batch-experiment command line: corpus generation and ingestion, staged
//! training, evaluation reports, data-efficiency sweeps, and ablations.
//! Exit codes: 0 success, 1 invalid arguments or configuration, 2 runtime
//! failure.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use kads::corpus::{
    holdout_split, load_corpus, save_corpus, synth_corpus, CorpusSplit, DatasetKind, Dialogue,
    KnowledgeBase, Task,
};
use kads::error::{Error, Result};
use kads::evaluation::{
    ablation_suite, data_efficiency_sweep, eval_action_accuracy, eval_doc_selection, eval_ood,
    freq_acc_correlation, git_describe, EvalReport, LabelRule, PipelineConfig, ReportTags,
    RunManifest, SystemKind,
};
use kads::generator::InputMode;
use kads::neural::{sha256_hex, EncoderConfig, GenModelConfig};
use kads::training::{
    model_preset, train_baseline, train_ddm, train_mlm, train_task, ModelBundle, Stage,
    TrainConfig, TrainLog,
};

#[derive(Parser)]
#[command(
    name = "kads",
    version,
    about = "Retrieval-augmented dialogue action prediction: corpora, training stages, reports"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic corpus with known retrieval ground truth.
    Synth(SynthArgs),
    /// Validate a normalized corpus file and re-emit it.
    Ingest(IngestArgs),
    /// Run one training stage and save the resulting model.
    Train(TrainArgs),
    /// Score a saved model and write an evaluation report.
    Eval(EvalArgs),
    /// Data-efficiency sweep over training-set sizes.
    Sweep(SweepArgs),
    /// Train and score all four pre-training ablation arms.
    Ablate(AblateArgs),
    /// Pretty-print a saved evaluation report.
    Report(ReportArgs),
}

#[derive(clap::Args)]
struct SynthArgs {
    /// Number of guideline documents.
    #[arg(long)]
    docs: usize,
    /// Number of dialogues across all splits.
    #[arg(long)]
    dialogues: usize,
    /// Distinct b-slots to draw documents from (default: docs + 10).
    #[arg(long)]
    bslot_vocab: Option<usize>,
    #[arg(long)]
    seed: u64,
    /// Output corpus file.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct IngestArgs {
    /// Corpus file in the normalized JSON schema.
    #[arg(long)]
    input: PathBuf,
    /// Dataset family the file must declare.
    #[arg(long, value_enum)]
    dataset: DatasetArg,
    /// Where to write the validated, normalized copy.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Training stage to run.
    #[arg(long, value_enum)]
    stage: StageArg,
    /// JSON file with the model and training configuration.
    #[arg(long)]
    config: PathBuf,
    /// Normalized corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Train the no-retrieval baseline in this conditioning mode instead of
    /// the full system (task stages only).
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    /// Continue from a saved model directory instead of initializing fresh.
    #[arg(long)]
    init_from: Option<PathBuf>,
    /// Remove this fraction of b-slots from training targets (with
    /// --holdout-seed) before training.
    #[arg(long, requires = "holdout_seed")]
    holdout_fraction: Option<f64>,
    #[arg(long, requires = "holdout_fraction")]
    holdout_seed: Option<u64>,
    /// Run directory for the model, training log, and manifest.
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct EvalArgs {
    /// Task to score.
    #[arg(long, value_enum)]
    task: TaskArg,
    /// Saved model directory.
    #[arg(long)]
    model: PathBuf,
    /// Normalized corpus file.
    #[arg(long)]
    corpus: PathBuf,
    /// Which split to evaluate.
    #[arg(long, value_enum, default_value = "test")]
    split: SplitArg,
    /// Documents retained by the retriever at prediction time.
    #[arg(long, default_value_t = 5)]
    k: usize,
    /// Score the no-retrieval baseline decoder in this mode instead of the
    /// marginal predictor.
    #[arg(long, value_enum)]
    baseline: Option<BaselineArg>,
    /// Also split the report by held-out b-slot usage; requires the same
    /// holdout flags the training run used.
    #[arg(long, requires = "holdout_fraction")]
    ood: bool,
    #[arg(long, requires = "holdout_seed")]
    holdout_fraction: Option<f64>,
    #[arg(long, requires = "holdout_fraction")]
    holdout_seed: Option<u64>,
    /// Output directory for report files.
    #[arg(short, long, default_value = ".")]
    out: PathBuf,
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// JSON file with the model and pipeline configuration.
    #[arg(long)]
    config: PathBuf,
    /// Training-set sizes, strictly increasing.
    #[arg(long, value_delimiter = ',', required = true)]
    sizes: Vec<usize>,
    /// At least three seeds for the confidence intervals.
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// JSON file with the model and pipeline configuration.
    #[arg(long)]
    config: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    seeds: Vec<u64>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ReportArgs {
    /// A report.json written by `eval`.
    #[arg(long)]
    input: PathBuf,
    /// Also print the frequency-accuracy correlation.
    #[arg(long)]
    correlation: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Abcd,
    Sgd,
    Synthetic,
}

impl From<DatasetArg> for DatasetKind {
    fn from(a: DatasetArg) -> DatasetKind {
        match a {
            DatasetArg::Abcd => DatasetKind::Abcd,
            DatasetArg::Sgd => DatasetKind::Sgd,
            DatasetArg::Synthetic => DatasetKind::Synthetic,
        }
    }
}

#[derive(Clone, Copy, PartialEq, ValueEnum)]
enum StageArg {
    Ddm,
    Mlm,
    Ast,
    Wd,
}

impl From<StageArg> for Stage {
    fn from(a: StageArg) -> Stage {
        match a {
            StageArg::Ddm => Stage::Ddm,
            StageArg::Mlm => Stage::Mlm,
            StageArg::Ast => Stage::Ast,
            StageArg::Wd => Stage::Wd,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Ast,
    Wd,
}

impl From<TaskArg> for Task {
    fn from(a: TaskArg) -> Task {
        match a {
            TaskArg::Ast => Task::Ast,
            TaskArg::Wd => Task::Wd,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineArg {
    /// Dialogue context only.
    None,
    /// Context plus the concatenated static guidelines.
    StaticGuide,
}

impl From<BaselineArg> for InputMode {
    fn from(a: BaselineArg) -> InputMode {
        match a {
            BaselineArg::None => InputMode::None,
            BaselineArg::StaticGuide => InputMode::StaticGuide,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Dev,
    Test,
}

/// Architecture selection: a named preset, explicit sections, or both
/// (explicit sections override the preset).
#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelSpec {
    preset: Option<String>,
    encoder: Option<EncoderConfig>,
    generator: Option<GenModelConfig>,
}

impl ModelSpec {
    fn resolve(&self) -> Result<(EncoderConfig, GenModelConfig)> {
        let preset = match &self.preset {
            Some(name) => {
                let (enc, gen, _) = model_preset(name)?;
                Some((enc, gen))
            }
            None => None,
        };
        let enc = self
            .encoder
            .clone()
            .or_else(|| preset.as_ref().map(|p| p.0.clone()));
        let gen = self
            .generator
            .clone()
            .or_else(|| preset.as_ref().map(|p| p.1.clone()));
        match (enc, gen) {
            (Some(e), Some(g)) => Ok((e, g)),
            _ => Err(Error::Config(
                "model spec needs a preset or explicit encoder and generator sections".into(),
            )),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainSpec {
    model: Option<ModelSpec>,
    train: TrainConfig,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct PipelineSpec {
    model: ModelSpec,
    pipeline: PipelineConfig,
}

fn main() {
    // Die quietly when a pipe downstream closes, like other unix tools.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(exit_code(&e));
    }
}

/// 1 for problems in what the user supplied, 2 for failures while running.
fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Parse { .. }
        | Error::Config(_)
        | Error::Bounds(_)
        | Error::Input(_)
        | Error::Vocab(_)
        | Error::Label(_)
        | Error::Length(_)
        | Error::Incompatible(_)
        | Error::Integrity(_)
        | Error::Json(_) => 1,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Synth(args) => cmd_synth(args),
        Cmd::Ingest(args) => cmd_ingest(args),
        Cmd::Train(args) => cmd_train(args),
        Cmd::Eval(args) => cmd_eval(args),
        Cmd::Sweep(args) => cmd_sweep(args),
        Cmd::Ablate(args) => cmd_ablate(args),
        Cmd::Report(args) => cmd_report(args),
    }
}

/// Read the corpus, trusting the dataset kind the file itself declares.
fn load_corpus_auto(path: &Path) -> Result<(DatasetKind, CorpusSplit, KnowledgeBase)> {
    #[derive(Deserialize)]
    struct Peek {
        dataset: String,
    }
    let bytes = std::fs::read(path)?;
    let peek: Peek = serde_json::from_slice(&bytes)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    let kind = DatasetKind::parse(&peek.dataset)?;
    let (split, kb) = load_corpus(path, kind)?;
    Ok((kind, split, kb))
}

fn corpus_hash(path: &Path) -> Result<String> {
    Ok(sha256_hex(&std::fs::read(path)?))
}

fn read_json_value(path: &Path) -> Result<serde_json::Value> {
    let bytes = std::fs::read(path)?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::parse(path.display().to_string(), e.to_string()))
}

fn write_manifest(
    dir: &Path,
    config: serde_json::Value,
    seeds: Vec<u64>,
    corpus_file: &Path,
) -> Result<()> {
    let manifest = RunManifest {
        config,
        seeds,
        git_describe: git_describe(),
        corpus_hash: corpus_hash(corpus_file)?,
    };
    manifest.write(&dir.join("manifest.json"))
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let vocab = args.bslot_vocab.unwrap_or(args.docs + 10);
    let (split, kb) = synth_corpus(args.docs, args.dialogues, vocab, args.seed)?;
    save_corpus(&args.out, DatasetKind::Synthetic, &split, &kb)?;
    let (train, dev, test) = split.sizes();
    println!(
        "wrote {} ({} documents, splits {train}/{dev}/{test})",
        args.out.display(),
        kb.len()
    );
    Ok(())
}

fn cmd_ingest(args: IngestArgs) -> Result<()> {
    let kind: DatasetKind = args.dataset.into();
    let (split, kb) = load_corpus(&args.input, kind)?;
    save_corpus(&args.out, kind, &split, &kb)?;
    let (train, dev, test) = split.sizes();
    println!(
        "validated {} as {} (splits {train}/{dev}/{test}), wrote {}",
        args.input.display(),
        kind.as_str(),
        args.out.display()
    );
    Ok(())
}

fn apply_holdout(
    split: CorpusSplit,
    fraction: Option<f64>,
    seed: Option<u64>,
) -> Result<(CorpusSplit, BTreeSet<String>)> {
    match (fraction, seed) {
        (Some(f), Some(s)) => {
            let out = holdout_split(split, f, s)?;
            let held = out.held_out_bslots.clone();
            Ok((out, held))
        }
        _ => Ok((split, BTreeSet::new())),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let spec_value = read_json_value(&args.config)?;
    let spec: TrainSpec = serde_json::from_value(spec_value.clone())
        .map_err(|e| Error::parse(args.config.display().to_string(), e.to_string()))?;
    let stage: Stage = args.stage.into();
    if spec.train.stage != stage {
        return Err(Error::Config(format!(
            "--stage {} but the config file says {}",
            stage.as_str(),
            spec.train.stage.as_str()
        )));
    }
    if args.baseline.is_some() && stage.task().is_none() {
        return Err(Error::Config(
            "baselines train on task stages only (ast or wd)".into(),
        ));
    }
    let (kind, split, kb) = load_corpus_auto(&args.corpus)?;
    let (split, _) = apply_holdout(split, args.holdout_fraction, args.holdout_seed)?;
    let bundle = match &args.init_from {
        Some(dir) => {
            let bundle = ModelBundle::load(dir)?;
            if bundle.style != kind.action_style() {
                return Err(Error::Incompatible(format!(
                    "model was trained on a {} style corpus, {} given",
                    match bundle.style {
                        kads::corpus::ActionStyle::Colon => "colon",
                        kads::corpus::ActionStyle::Space => "space",
                    },
                    kind.as_str()
                )));
            }
            bundle
        }
        None => {
            let model = spec.model.as_ref().ok_or_else(|| {
                Error::Config("config has no model section and no --init-from given".into())
            })?;
            let (enc, gen) = model.resolve()?;
            ModelBundle::for_corpus(&split, &kb, kind, enc, gen, spec.train.seed)?
        }
    };
    let cfg = &spec.train;
    let (bundle, log): (ModelBundle, TrainLog) = match (stage, args.baseline) {
        (Stage::Ddm, _) => train_ddm(bundle, &split, &kb, cfg)?,
        (Stage::Mlm, _) => train_mlm(bundle, &split, &kb, cfg)?,
        (_, None) => train_task(bundle, &split, &kb, cfg)?,
        (_, Some(mode)) => train_baseline(bundle, &split, &kb, cfg, mode.into())?,
    };
    std::fs::create_dir_all(&args.out)?;
    bundle.save(&args.out)?;
    log.write_csv(&args.out.join("trainlog.csv"))?;
    let config = serde_json::json!({
        "spec": spec_value,
        "stage": stage.as_str(),
        "baseline": args.baseline.map(|b| InputMode::from(b).as_str()),
        "init_from": args.init_from.as_ref().map(|p| p.display().to_string()),
        "holdout_fraction": args.holdout_fraction,
        "holdout_seed": args.holdout_seed,
    });
    write_manifest(&args.out, config, vec![cfg.seed], &args.corpus)?;
    let last = log.records().last().map(|r| r.loss);
    println!(
        "trained {} for {} steps (final loss {}), model in {}",
        stage.as_str(),
        cfg.max_steps,
        last.map_or("n/a".into(), |l| format!("{l:.4}")),
        args.out.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let bundle = ModelBundle::load(&args.model)?;
    let (kind, split, kb) = load_corpus_auto(&args.corpus)?;
    if bundle.style != kind.action_style() {
        return Err(Error::Incompatible(
            "model and corpus disagree on action rendering style".into(),
        ));
    }
    let dialogues: &[Dialogue] = match args.split {
        SplitArg::Train => &split.train,
        SplitArg::Dev => &split.dev,
        SplitArg::Test => &split.test,
    };
    let task: Task = args.task.into();
    let system = match args.baseline {
        Some(mode) => SystemKind::Baseline { mode: mode.into() },
        None => SystemKind::Marginal { k: args.k },
    };
    let tags = ReportTags {
        task,
        dataset: kind.as_str().into(),
        model: system.label(),
        seeds: vec![],
    };
    std::fs::create_dir_all(&args.out)?;
    let rule = LabelRule::for_dataset(kind);
    let doc_acc = eval_doc_selection(&bundle, dialogues, &kb, rule)?;
    if args.ood {
        let (_, held) = apply_holdout(split.clone(), args.holdout_fraction, args.holdout_seed)?;
        let pair = eval_ood(&bundle, system, dialogues, &split.train, &kb, &held, &tags)?;
        let mut in_dist = pair.in_dist;
        in_dist.doc_selection_acc = Some(doc_acc);
        in_dist.write_json(&args.out.join("report_in.json"))?;
        in_dist.write_csv(&args.out.join("report_in.csv"))?;
        println!(
            "in-distribution: {} examples, b-slot {:.4}, value {:.4}",
            in_dist.n_examples, in_dist.bslot_acc, in_dist.value_acc
        );
        match pair.ood {
            Some(ood) => {
                ood.write_json(&args.out.join("report_ood.json"))?;
                ood.write_csv(&args.out.join("report_ood.csv"))?;
                println!(
                    "out-of-distribution: {} examples, b-slot {:.4}, value {:.4}",
                    ood.n_examples, ood.bslot_acc, ood.value_acc
                );
            }
            None => println!("out-of-distribution: no examples use held-out b-slots"),
        }
    } else {
        let mut report = eval_action_accuracy(&bundle, system, dialogues, &split.train, &kb, &tags)?;
        report.doc_selection_acc = Some(doc_acc);
        report.write_json(&args.out.join("report.json"))?;
        report.write_csv(&args.out.join("report.csv"))?;
        println!(
            "{} examples, b-slot {:.4}, value {:.4}, doc selection {:.4}",
            report.n_examples, report.bslot_acc, report.value_acc, doc_acc
        );
    }
    Ok(())
}

fn cmd_sweep(args: SweepArgs) -> Result<()> {
    let spec_value = read_json_value(&args.config)?;
    let spec: PipelineSpec = serde_json::from_value(spec_value.clone())
        .map_err(|e| Error::parse(args.config.display().to_string(), e.to_string()))?;
    let (enc, gen) = spec.model.resolve()?;
    let (kind, split, kb) = load_corpus_auto(&args.corpus)?;
    std::fs::create_dir_all(&args.out)?;
    let result = data_efficiency_sweep(
        &split,
        &kb,
        kind,
        enc,
        gen,
        &spec.pipeline,
        &args.sizes,
        &args.seeds,
        Some(&args.out),
    )?;
    result.write_csv(&args.out.join("sweep.csv"))?;
    write_manifest(&args.out, spec_value, args.seeds.clone(), &args.corpus)?;
    println!(
        "swept {} sizes x {} seeds, results in {}",
        args.sizes.len(),
        args.seeds.len(),
        args.out.join("sweep.csv").display()
    );
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let spec_value = read_json_value(&args.config)?;
    let spec: PipelineSpec = serde_json::from_value(spec_value.clone())
        .map_err(|e| Error::parse(args.config.display().to_string(), e.to_string()))?;
    let (enc, gen) = spec.model.resolve()?;
    let (kind, split, kb) = load_corpus_auto(&args.corpus)?;
    std::fs::create_dir_all(&args.out)?;
    let table = ablation_suite(&split, &kb, kind, enc, gen, &spec.pipeline, &args.seeds)?;
    table.write_csv(&args.out.join("ablation.csv"))?;
    for row in &table.rows {
        let name = format!("report_{}.json", row.label.to_lowercase().replace(' ', "_"));
        row.report.write_json(&args.out.join(name))?;
    }
    write_manifest(&args.out, spec_value, args.seeds.clone(), &args.corpus)?;
    for row in &table.rows {
        println!(
            "{:>8}: b-slot {:.4}, value {:.4}",
            row.label, row.report.bslot_acc, row.report.value_acc
        );
    }
    Ok(())
}

fn cmd_report(args: ReportArgs) -> Result<()> {
    let report = EvalReport::read_json(&args.input)?;
    println!(
        "{} on {} ({}): {} examples",
        report.model, report.dataset, report.task, report.n_examples
    );
    println!(
        "b-slot accuracy {:.4}, value accuracy {:.4}{}",
        report.bslot_acc,
        report.value_acc,
        report
            .doc_selection_acc
            .map_or(String::new(), |v| format!(", doc selection {v:.4}"))
    );
    if report.partial {
        println!("note: partial report (a requested partition was empty)");
    }
    println!("{:<28} {:>10} {:>6} {:>6} {:>9}", "b-slot", "train_freq", "hits", "total", "accuracy");
    for row in &report.per_bslot {
        println!(
            "{:<28} {:>10} {:>6} {:>6} {:>9}",
            row.bslot,
            row.train_freq,
            row.hits,
            row.total,
            row.accuracy().map_or("n/a".into(), |a| format!("{a:.4}")),
        );
    }
    if args.correlation {
        match freq_acc_correlation(&report)? {
            Some(r) => println!("frequency-accuracy correlation: {r:.4}"),
            None => println!("frequency-accuracy correlation: undefined (zero variance)"),
        }
    }
    println!("scoring: {}", report.metric_notes);
    Ok(())
}
