//! Multi-run experiment drivers: the staged training pipeline, the
//! ablation table, and the data-efficiency sweep with seed-level
//! confidence intervals.

use std::collections::BTreeSet;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusSplit, DatasetKind, Dialogue, KnowledgeBase};
use crate::error::{Error, Result};
use crate::evaluation::harness::{summary_to_report, EvalReport, LabelRule, ReportTags};
use crate::evaluation::metrics::merge_summaries;
use crate::evaluation::{eval_doc_selection, eval_examples, SystemKind};
use crate::generator::InputMode;
use crate::neural::{EncoderConfig, GenModelConfig};
use crate::training::{
    build_task_examples, train_baseline, train_ddm, train_mlm, train_task, ModelBundle, Stage,
    TrainConfig, TrainLog,
};

const DDM_SEED_STREAM: u64 = 0x6464_6d00;
const MLM_SEED_STREAM: u64 = 0x6d6c_6d00;
const TASK_SEED_STREAM: u64 = 0x7461_736b;
const INIT_SEED_STREAM: u64 = 0x696e_6974;
const SUBSAMPLE_SEED_STREAM: u64 = 0x7375_6200;

/// The staged recipe: optional matching warm-up, optional masked-LM
/// augmentation, then task fine-tuning.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub ddm: Option<TrainConfig>,
    pub mlm: Option<TrainConfig>,
    pub task: TrainConfig,
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(cfg) = &self.ddm {
            cfg.validate()?;
            if cfg.stage != Stage::Ddm {
                return Err(Error::Config(format!(
                    "warm-up slot holds a {} config",
                    cfg.stage.as_str()
                )));
            }
        }
        if let Some(cfg) = &self.mlm {
            cfg.validate()?;
            if cfg.stage != Stage::Mlm {
                return Err(Error::Config(format!(
                    "masked-LM slot holds a {} config",
                    cfg.stage.as_str()
                )));
            }
        }
        self.task.validate()?;
        if self.task.stage.task().is_none() {
            return Err(Error::Config(format!(
                "task slot holds a {} config",
                self.task.stage.as_str()
            )));
        }
        Ok(())
    }

    /// Re-key every stage's RNG stream off one root seed so a whole run is
    /// reproducible from a single number.
    pub fn with_seed(&self, root: u64) -> PipelineConfig {
        let mut out = self.clone();
        if let Some(cfg) = &mut out.ddm {
            cfg.seed = root ^ DDM_SEED_STREAM;
        }
        if let Some(cfg) = &mut out.mlm {
            cfg.seed = root ^ MLM_SEED_STREAM;
        }
        out.task.seed = root ^ TASK_SEED_STREAM;
        out
    }

    pub fn from_json_file(path: &Path) -> Result<PipelineConfig> {
        let bytes = std::fs::read(path)?;
        let pc: PipelineConfig = serde_json::from_slice(&bytes)?;
        pc.validate()?;
        Ok(pc)
    }
}

/// Run the configured stages in order on one bundle. Returns the trained
/// bundle and one log per executed stage.
pub fn train_pipeline(
    bundle: ModelBundle,
    split: &CorpusSplit,
    kb: &KnowledgeBase,
    pc: &PipelineConfig,
) -> Result<(ModelBundle, Vec<TrainLog>)> {
    pc.validate()?;
    let mut logs = Vec::new();
    let mut bundle = bundle;
    if let Some(cfg) = &pc.ddm {
        let (b, log) = train_ddm(bundle, split, kb, cfg)?;
        bundle = b;
        logs.push(log);
    }
    if let Some(cfg) = &pc.mlm {
        let (b, log) = train_mlm(bundle, split, kb, cfg)?;
        bundle = b;
        logs.push(log);
    }
    let (b, log) = train_task(bundle, split, kb, &pc.task)?;
    bundle = b;
    logs.push(log);
    Ok((bundle, logs))
}

/// Which pre-training stages an ablation arm keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationArm {
    None,
    MlmOnly,
    DdmOnly,
    Full,
}

impl AblationArm {
    pub const ALL: [AblationArm; 4] = [
        AblationArm::None,
        AblationArm::MlmOnly,
        AblationArm::DdmOnly,
        AblationArm::Full,
    ];

    pub fn label(self) -> &'static str {
        match self {
            AblationArm::None => "none",
            AblationArm::MlmOnly => "MLM only",
            AblationArm::DdmOnly => "DDM only",
            AblationArm::Full => "full",
        }
    }

    /// Derive this arm's pipeline from the full recipe by dropping stages.
    /// Budgets of the surviving stages are untouched, so arms differ only
    /// in which stages run.
    pub fn pipeline(self, full: &PipelineConfig) -> PipelineConfig {
        let mut pc = full.clone();
        match self {
            AblationArm::None => {
                pc.ddm = None;
                pc.mlm = None;
            }
            AblationArm::MlmOnly => {
                pc.ddm = None;
                if let Some(cfg) = &mut pc.mlm {
                    cfg.skip_warmup_check = true;
                }
            }
            AblationArm::DdmOnly => {
                pc.mlm = None;
            }
            AblationArm::Full => {}
        }
        pc
    }

    fn expected_stages(self, full: &PipelineConfig) -> BTreeSet<&'static str> {
        let pc = self.pipeline(full);
        let mut stages = BTreeSet::new();
        if pc.ddm.is_some() {
            stages.insert(Stage::Ddm.as_str());
        }
        if pc.mlm.is_some() {
            stages.insert(Stage::Mlm.as_str());
        }
        stages.insert(pc.task.stage.as_str());
        stages
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub report: EvalReport,
    /// One log list per seed, each holding one log per executed stage.
    pub logs: Vec<Vec<TrainLog>>,
}

#[derive(Debug, Clone)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("pipeline,bslot_acc,value_acc,doc_selection_acc,n_examples,seeds\n");
        for row in &self.rows {
            let seeds: Vec<String> = row.report.seeds.iter().map(u64::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.label,
                row.report.bslot_acc,
                row.report.value_acc,
                row.report
                    .doc_selection_acc
                    .map_or(String::new(), |v| v.to_string()),
                row.report.n_examples,
                seeds.join(";"),
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Train and score all four ablation arms with identical seeds and stage
/// budgets. Each arm yields one aggregated report over the seed list,
/// evaluated on the test split with the marginal predictor.
pub fn ablation_suite(
    split: &CorpusSplit,
    kb: &KnowledgeBase,
    kind: DatasetKind,
    enc_cfg: EncoderConfig,
    gen_cfg: GenModelConfig,
    full: &PipelineConfig,
    seeds: &[u64],
) -> Result<AblationTable> {
    full.validate()?;
    if seeds.is_empty() {
        return Err(Error::Config("ablation needs at least one seed".into()));
    }
    let task = full
        .task
        .stage
        .task()
        .expect("validated task stage");
    let style = kind.action_style();
    let rule = LabelRule::for_dataset(kind);
    let total_train_actions: usize = split.train.iter().map(|d| d.actions().count()).sum();
    let mut rows = Vec::new();
    for arm in AblationArm::ALL {
        let expected = arm.expected_stages(full);
        let mut summaries = Vec::new();
        let mut doc_accs = Vec::new();
        let mut arm_logs = Vec::new();
        for &seed in seeds {
            let pc = arm.pipeline(full).with_seed(seed);
            let bundle = ModelBundle::for_corpus(
                split,
                kb,
                kind,
                enc_cfg.clone(),
                gen_cfg.clone(),
                seed ^ INIT_SEED_STREAM,
            )?;
            let (bundle, logs) = train_pipeline(bundle, split, kb, &pc)?;
            let ran: BTreeSet<&str> = logs
                .iter()
                .flat_map(|l| l.records().iter().map(|r| r.stage.as_str()))
                .collect();
            if !ran.is_subset(&expected) {
                return Err(Error::Integrity(format!(
                    "arm {} ran stages outside its recipe",
                    arm.label()
                )));
            }
            let examples = build_task_examples(&split.test, task, style)?;
            let summary = eval_examples(
                &bundle,
                SystemKind::Marginal {
                    k: pc.task.top_k,
                },
                &examples,
                kb,
            )?;
            summaries.push(summary);
            doc_accs.push(eval_doc_selection(&bundle, &split.test, kb, rule)?);
            arm_logs.push(logs);
        }
        let merged = merge_summaries(&summaries)?;
        let tags = ReportTags {
            task,
            dataset: kind.as_str().into(),
            model: arm.label().into(),
            seeds: seeds.to_vec(),
        };
        let mut report = summary_to_report(&merged, &split.train, &tags, false);
        report.doc_selection_acc =
            Some(doc_accs.iter().sum::<f64>() / doc_accs.len() as f64);
        report.validate(total_train_actions)?;
        rows.push(AblationRow {
            label: arm.label().into(),
            report,
            logs: arm_logs,
        });
    }
    Ok(AblationTable { rows })
}

/// Deterministic subsample of `size` dialogues, original order preserved.
pub fn subsample_dialogues(
    train: &[Dialogue],
    size: usize,
    seed: u64,
) -> Result<Vec<Dialogue>> {
    if size == 0 || size > train.len() {
        return Err(Error::Config(format!(
            "subsample of {size} from {} dialogues",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked = rand::seq::index::sample(&mut rng, train.len(), size).into_vec();
    picked.sort_unstable();
    Ok(picked.into_iter().map(|i| train[i].clone()).collect())
}

/// Two-sided 97.5% Student-t quantile, i.e. the multiplier for a 95%
/// confidence interval with `df` degrees of freedom.
fn t_975(df: usize) -> f64 {
    const TABLE: [f64; 30] = [
        12.706, 4.303, 3.182, 2.776, 2.571, 2.447, 2.365, 2.306, 2.262, 2.228, 2.201, 2.179,
        2.160, 2.145, 2.131, 2.120, 2.110, 2.101, 2.093, 2.086, 2.080, 2.074, 2.069, 2.064,
        2.060, 2.056, 2.052, 2.048, 2.045, 2.042,
    ];
    match df {
        0 => f64::INFINITY,
        1..=30 => TABLE[df - 1],
        _ => 1.96,
    }
}

/// Halfwidth of the 95% t-interval for the mean of `values`.
pub fn t_interval_halfwidth(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::Config(format!(
            "confidence interval over {n} values"
        )));
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    Ok(t_975(n - 1) * var.sqrt() / (n as f64).sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub train_size: usize,
    pub model: String,
    pub seeds: Vec<u64>,
    pub mean_bslot_acc: f64,
    pub ci_halfwidth: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn validate(&self) -> Result<()> {
        let mut by_model: std::collections::BTreeMap<&str, Vec<usize>> =
            std::collections::BTreeMap::new();
        for row in &self.rows {
            if row.seeds.len() < 3 {
                return Err(Error::Config(format!(
                    "sweep row at size {} built from {} seeds, need at least 3",
                    row.train_size,
                    row.seeds.len()
                )));
            }
            by_model.entry(row.model.as_str()).or_default().push(row.train_size);
        }
        for (model, sizes) in by_model {
            if !sizes.windows(2).all(|w| w[0] < w[1]) {
                return Err(Error::Config(format!(
                    "train sizes for {model} are not strictly increasing"
                )));
            }
        }
        Ok(())
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv_string())?;
        Ok(())
    }

    fn to_csv_string(&self) -> String {
        let mut out = String::from("train_size,model,mean_bslot_acc,ci_halfwidth,n_seeds,seeds\n");
        for row in &self.rows {
            let seeds: Vec<String> = row.seeds.iter().map(u64::to_string).collect();
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                row.train_size,
                row.model,
                row.mean_bslot_acc,
                row.ci_halfwidth,
                row.seeds.len(),
                seeds.join(";"),
            ));
        }
        out
    }
}

pub const SWEEP_KADS: &str = "kads";
pub const SWEEP_BASELINE: &str = "baseline";

/// For each training-set size, subsample the train split per seed, build a
/// fresh bundle on the subsample, train the full staged pipeline and the
/// un-augmented baseline with matched task budgets, and score both on the
/// test split. Any failing run aborts the sweep; rows finished so far are
/// written to `out_dir` first when one is given.
pub fn data_efficiency_sweep(
    split: &CorpusSplit,
    kb: &KnowledgeBase,
    kind: DatasetKind,
    enc_cfg: EncoderConfig,
    gen_cfg: GenModelConfig,
    pipeline: &PipelineConfig,
    sizes: &[usize],
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<SweepResult> {
    pipeline.validate()?;
    if seeds.len() < 3 {
        return Err(Error::Config(format!(
            "confidence intervals need at least 3 seeds, got {}",
            seeds.len()
        )));
    }
    if sizes.is_empty() {
        return Err(Error::Config("no training-set sizes requested".into()));
    }
    if !sizes.windows(2).all(|w| w[0] < w[1]) {
        return Err(Error::Config("train sizes must be strictly increasing".into()));
    }
    if *sizes.last().unwrap() > split.train.len() {
        return Err(Error::Config(format!(
            "largest size {} exceeds the train split ({} dialogues)",
            sizes.last().unwrap(),
            split.train.len()
        )));
    }
    let task = pipeline
        .task
        .stage
        .task()
        .expect("validated task stage");
    let style = kind.action_style();
    let mut rows: Vec<SweepRow> = Vec::new();
    let save_partial = |rows: &[SweepRow]| {
        if let Some(dir) = out_dir {
            let partial = SweepResult { rows: rows.to_vec() };
            let _ = std::fs::create_dir_all(dir);
            let _ = partial.write_csv(&dir.join("sweep_partial.csv"));
        }
    };
    for &size in sizes {
        let mut kads_accs = Vec::new();
        let mut base_accs = Vec::new();
        for &seed in seeds {
            let run = || -> Result<(f64, f64)> {
                let sub = subsample_dialogues(&split.train, size, seed ^ SUBSAMPLE_SEED_STREAM)?;
                let reduced = CorpusSplit {
                    train: sub,
                    dev: split.dev.clone(),
                    test: split.test.clone(),
                    held_out_bslots: split.held_out_bslots.clone(),
                };
                let pc = pipeline.with_seed(seed);
                let bundle = ModelBundle::for_corpus(
                    &reduced,
                    kb,
                    kind,
                    enc_cfg.clone(),
                    gen_cfg.clone(),
                    seed ^ INIT_SEED_STREAM,
                )?;
                let baseline_init = bundle.clone();
                let (kads, _) = train_pipeline(bundle, &reduced, kb, &pc)?;
                let (base, _) =
                    train_baseline(baseline_init, &reduced, kb, &pc.task, InputMode::None)?;
                let examples = build_task_examples(&split.test, task, style)?;
                let kads_summary = eval_examples(
                    &kads,
                    SystemKind::Marginal { k: pc.task.top_k },
                    &examples,
                    kb,
                )?;
                let base_summary = eval_examples(
                    &base,
                    SystemKind::Baseline {
                        mode: InputMode::None,
                    },
                    &examples,
                    kb,
                )?;
                Ok((kads_summary.bslot_acc, base_summary.bslot_acc))
            };
            match run() {
                Ok((k, b)) => {
                    kads_accs.push(k);
                    base_accs.push(b);
                }
                Err(e) => {
                    save_partial(&rows);
                    return Err(e);
                }
            }
        }
        for (model, accs) in [(SWEEP_KADS, &kads_accs), (SWEEP_BASELINE, &base_accs)] {
            let mean = accs.iter().sum::<f64>() / accs.len() as f64;
            rows.push(SweepRow {
                train_size: size,
                model: model.into(),
                seeds: seeds.to_vec(),
                mean_bslot_acc: mean,
                ci_halfwidth: t_interval_halfwidth(accs)?,
            });
        }
    }
    let result = SweepResult { rows };
    result.validate()?;
    Ok(result)
}

/// Identity stamp written next to every run's outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: serde_json::Value,
    pub seeds: Vec<u64>,
    pub git_describe: Option<String>,
    pub corpus_hash: String,
}

impl RunManifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<RunManifest> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

/// Best-effort `git describe` of the working tree, if git is available.
pub fn git_describe() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["describe", "--always", "--dirty"])
        .output()
        .ok()?;
    if !out.status.success() {
        return None;
    }
    let s = String::from_utf8(out.stdout).ok()?;
    let s = s.trim();
    (!s.is_empty()).then(|| s.to_string())
}
