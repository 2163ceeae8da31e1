//! Report-producing evaluation: task accuracy with per-b-slot breakdowns,
//! document selection under dataset-specific label rules, and the
//! in-distribution / out-of-distribution split.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    action_overlap_label, intent_label, parse_action_target, DatasetKind, Dialogue,
    KnowledgeBase, Task,
};
use crate::error::{Error, Result};
use crate::evaluation::metrics::{action_accuracy, pearson, AccuracySummary};
use crate::generator::{baseline_predict, marginal_predict_cached, InputMode};
use crate::retriever::DocEmbeddingCache;
use crate::training::{build_task_examples, ModelBundle};

/// Fixed description of the scoring conventions, embedded in every report
/// so the numbers are self-documenting.
pub const METRIC_NOTES: &str = "b-slot accuracy: per-position exact match of the b-slot sequence, \
averaged over positions (length mismatches scored against the longer sequence), macro-averaged \
over examples; value accuracy: exact value-list match micro-averaged over positions whose b-slot \
matched; malformed decodes count as wrong";

/// Which system produces predictions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SystemKind {
    /// Retrieve top-k documents and rescore candidates under the marginal.
    Marginal { k: usize },
    /// Decode once from a fixed conditioning mode, no retrieval.
    Baseline { mode: InputMode },
}

impl SystemKind {
    pub fn label(self) -> String {
        match self {
            SystemKind::Marginal { k } => format!("marginal-k{k}"),
            SystemKind::Baseline { mode } => format!("baseline-{}", mode.as_str()),
        }
    }
}

/// How the correct document for a dialogue is defined.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelRule {
    /// Most action b-slots shared with the full interaction.
    ActionOverlap,
    /// The annotated customer intent.
    Intent,
}

impl LabelRule {
    pub fn for_dataset(kind: DatasetKind) -> LabelRule {
        match kind {
            DatasetKind::Abcd => LabelRule::ActionOverlap,
            DatasetKind::Sgd | DatasetKind::Synthetic => LabelRule::Intent,
        }
    }

    pub fn label(self, d: &Dialogue, kb: &KnowledgeBase) -> Result<String> {
        match self {
            LabelRule::ActionOverlap => action_overlap_label(d, kb),
            LabelRule::Intent => intent_label(d, kb),
        }
    }
}

/// One row of the per-b-slot table: how often the b-slot appears as a train
/// action and how the model scores on gold positions carrying it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BslotRow {
    pub bslot: String,
    pub train_freq: usize,
    pub hits: usize,
    pub total: usize,
}

impl BslotRow {
    pub fn accuracy(&self) -> Option<f64> {
        (self.total > 0).then(|| self.hits as f64 / self.total as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub dataset: String,
    pub model: String,
    pub n_examples: usize,
    pub bslot_acc: f64,
    pub value_acc: f64,
    pub doc_selection_acc: Option<f64>,
    pub per_bslot: Vec<BslotRow>,
    pub seeds: Vec<u64>,
    /// Set when a requested partition was empty and the report covers less
    /// than asked for.
    pub partial: bool,
    pub metric_notes: String,
}

impl EvalReport {
    pub fn validate(&self, total_train_actions: usize) -> Result<()> {
        for (name, v) in [("bslot_acc", self.bslot_acc), ("value_acc", self.value_acc)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Bounds(format!("{name} {v} outside [0, 1]")));
            }
        }
        if let Some(v) = self.doc_selection_acc {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Bounds(format!(
                    "doc_selection_acc {v} outside [0, 1]"
                )));
            }
        }
        let freq_sum: usize = self.per_bslot.iter().map(|r| r.train_freq).sum();
        if freq_sum != total_train_actions {
            return Err(Error::Integrity(format!(
                "per-b-slot frequencies sum to {freq_sum}, train split has {total_train_actions} actions"
            )));
        }
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<EvalReport> {
        let bytes = std::fs::read(path)?;
        Ok(serde_json::from_slice(&bytes)?)
    }

    /// Scalar columns plus one row per b-slot, as a flat CSV.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push_str("task,dataset,model,n_examples,bslot_acc,value_acc,doc_selection_acc,partial\n");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            self.task,
            self.dataset,
            self.model,
            self.n_examples,
            self.bslot_acc,
            self.value_acc,
            self.doc_selection_acc.map_or(String::new(), |v| v.to_string()),
            self.partial,
        ));
        out.push_str("bslot,train_freq,hits,total,accuracy\n");
        for r in &self.per_bslot {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.bslot,
                r.train_freq,
                r.hits,
                r.total,
                r.accuracy().map_or(String::new(), |v| v.to_string()),
            ));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Count how often each b-slot appears as a train action.
pub fn train_bslot_frequencies(train: &[Dialogue]) -> BTreeMap<String, usize> {
    let mut freq = BTreeMap::new();
    for d in train {
        for a in d.actions() {
            *freq.entry(a.bslot.clone()).or_insert(0usize) += 1;
        }
    }
    freq
}

/// Decode a prediction for one serialized context.
pub fn predict(
    bundle: &ModelBundle,
    system: SystemKind,
    x: &str,
    kb: &KnowledgeBase,
    doc_tokens: &[Vec<usize>],
    cache: &mut DocEmbeddingCache,
) -> Result<String> {
    match system {
        SystemKind::Marginal { k } => {
            let (pred, _) = marginal_predict_cached(bundle, x, kb, doc_tokens, cache, k)?;
            Ok(pred)
        }
        SystemKind::Baseline { mode } => baseline_predict(bundle, x, kb, mode),
    }
}

/// Score a system on prepared (context, gold target) pairs.
pub fn eval_examples(
    bundle: &ModelBundle,
    system: SystemKind,
    examples: &[(String, String)],
    kb: &KnowledgeBase,
) -> Result<AccuracySummary> {
    if examples.is_empty() {
        return Err(Error::Config("no examples to evaluate".into()));
    }
    let doc_tokens = bundle.doc_tokens(kb);
    let mut cache = DocEmbeddingCache::new();
    let mut golds = Vec::with_capacity(examples.len());
    let mut preds = Vec::with_capacity(examples.len());
    for (x, target) in examples {
        golds.push(parse_action_target(target, bundle.style)?);
        let pred = predict(bundle, system, x, kb, &doc_tokens, &mut cache)?;
        preds.push(parse_action_target(&pred, bundle.style).ok());
    }
    action_accuracy(&golds, &preds)
}

/// Identity tags stamped on a report.
#[derive(Debug, Clone)]
pub struct ReportTags {
    pub task: Task,
    pub dataset: String,
    pub model: String,
    pub seeds: Vec<u64>,
}

fn task_name(task: Task) -> &'static str {
    match task {
        Task::Ast => "AST",
        Task::Wd => "WD",
    }
}

pub(crate) fn summary_to_report(
    summary: &AccuracySummary,
    train: &[Dialogue],
    tags: &ReportTags,
    partial: bool,
) -> EvalReport {
    let freqs = train_bslot_frequencies(train);
    let mut rows: Vec<BslotRow> = Vec::new();
    let mut covered: BTreeMap<&str, bool> = BTreeMap::new();
    for (bslot, &train_freq) in &freqs {
        let (hits, total) = summary
            .per_bslot
            .get(bslot)
            .map_or((0, 0), |t| (t.hits, t.total));
        rows.push(BslotRow {
            bslot: bslot.clone(),
            train_freq,
            hits,
            total,
        });
        covered.insert(bslot, true);
    }
    for (bslot, tally) in &summary.per_bslot {
        if !covered.contains_key(bslot.as_str()) {
            rows.push(BslotRow {
                bslot: bslot.clone(),
                train_freq: 0,
                hits: tally.hits,
                total: tally.total,
            });
        }
    }
    rows.sort_by(|a, b| a.bslot.cmp(&b.bslot));
    EvalReport {
        task: task_name(tags.task).into(),
        dataset: tags.dataset.clone(),
        model: tags.model.clone(),
        n_examples: summary.n_examples,
        bslot_acc: summary.bslot_acc,
        value_acc: summary.value_acc,
        doc_selection_acc: None,
        per_bslot: rows,
        seeds: tags.seeds.clone(),
        partial,
        metric_notes: METRIC_NOTES.into(),
    }
}

/// Evaluate a system on a dialogue set and produce the full report. The
/// train split supplies the per-b-slot frequency column.
pub fn eval_action_accuracy(
    bundle: &ModelBundle,
    system: SystemKind,
    dialogues: &[Dialogue],
    train: &[Dialogue],
    kb: &KnowledgeBase,
    tags: &ReportTags,
) -> Result<EvalReport> {
    let examples = build_task_examples(dialogues, tags.task, bundle.style)?;
    let summary = eval_examples(bundle, system, &examples, kb)?;
    let report = summary_to_report(&summary, train, tags, false);
    let total_train_actions: usize = train.iter().map(|d| d.actions().count()).sum();
    report.validate(total_train_actions)?;
    Ok(report)
}

/// Top-1 document selection accuracy of an arbitrary selector against a
/// label rule. The selector sees the dialogue and returns a document id.
pub fn doc_selection_with<F>(
    mut selector: F,
    dialogues: &[Dialogue],
    kb: &KnowledgeBase,
    rule: LabelRule,
) -> Result<f64>
where
    F: FnMut(&Dialogue) -> Result<String>,
{
    if dialogues.is_empty() {
        return Err(Error::Config("no dialogues to evaluate".into()));
    }
    let mut hits = 0usize;
    for d in dialogues {
        let label = rule.label(d, kb)?;
        if selector(d)? == label {
            hits += 1;
        }
    }
    Ok(hits as f64 / dialogues.len() as f64)
}

/// Top-1 retrieval accuracy of the bundle's towers under a label rule.
pub fn eval_doc_selection(
    bundle: &ModelBundle,
    dialogues: &[Dialogue],
    kb: &KnowledgeBase,
    rule: LabelRule,
) -> Result<f64> {
    let doc_tokens = bundle.doc_tokens(kb);
    let mut cache = DocEmbeddingCache::new();
    doc_selection_with(
        |d| {
            let x = crate::training::dialogue_text(d, bundle.style)?;
            let x_ids = bundle.vocab.encode(&x);
            let dist = crate::retriever::top_k_retrieve(
                &bundle.dlg,
                &bundle.doc,
                &bundle.enc_cfg,
                &x_ids,
                kb,
                &doc_tokens,
                1,
                Some(&mut cache),
            )?;
            Ok(dist.doc_ids[0].clone())
        },
        dialogues,
        kb,
        rule,
    )
}

/// In-distribution and out-of-distribution reports, split by whether the
/// gold target uses a held-out b-slot.
#[derive(Debug, Clone)]
pub struct OodEval {
    pub in_dist: EvalReport,
    pub ood: Option<EvalReport>,
    pub partial: bool,
}

/// Partition prepared examples by held-out b-slot usage in the gold target.
pub fn partition_by_holdout(
    examples: Vec<(String, String)>,
    held_out: &std::collections::BTreeSet<String>,
    style: crate::corpus::ActionStyle,
) -> Result<(Vec<(String, String)>, Vec<(String, String)>)> {
    let mut in_dist = Vec::new();
    let mut ood = Vec::new();
    for (x, target) in examples {
        let actions = parse_action_target(&target, style)?;
        if actions.iter().any(|a| held_out.contains(&a.bslot)) {
            ood.push((x, target));
        } else {
            in_dist.push((x, target));
        }
    }
    Ok((in_dist, ood))
}

/// Evaluate a system separately on the in-distribution and held-out slices
/// of a dialogue set. An empty held-out slice downgrades the result to a
/// partial in-distribution report with a warning.
pub fn eval_ood(
    bundle: &ModelBundle,
    system: SystemKind,
    dialogues: &[Dialogue],
    train: &[Dialogue],
    kb: &KnowledgeBase,
    held_out: &std::collections::BTreeSet<String>,
    tags: &ReportTags,
) -> Result<OodEval> {
    let examples = build_task_examples(dialogues, tags.task, bundle.style)?;
    let (in_dist_ex, ood_ex) = partition_by_holdout(examples, held_out, bundle.style)?;
    if in_dist_ex.is_empty() {
        return Err(Error::Config(
            "every evaluation example uses a held-out b-slot".into(),
        ));
    }
    let total_train_actions: usize = train.iter().map(|d| d.actions().count()).sum();
    let in_summary = eval_examples(bundle, system, &in_dist_ex, kb)?;
    if ood_ex.is_empty() {
        eprintln!(
            "warning: no evaluation example uses a held-out b-slot; report is partial"
        );
        let report = summary_to_report(&in_summary, train, tags, true);
        report.validate(total_train_actions)?;
        return Ok(OodEval {
            in_dist: report,
            ood: None,
            partial: true,
        });
    }
    let ood_summary = eval_examples(bundle, system, &ood_ex, kb)?;
    let in_report = summary_to_report(&in_summary, train, tags, false);
    let ood_report = summary_to_report(&ood_summary, train, tags, false);
    in_report.validate(total_train_actions)?;
    ood_report.validate(total_train_actions)?;
    Ok(OodEval {
        in_dist: in_report,
        ood: Some(ood_report),
        partial: false,
    })
}

/// Pearson correlation between per-b-slot train frequency and accuracy.
/// B-slots with no scored gold position are excluded; fewer than 3
/// remaining rows is a config error, zero variance an explicit no-value.
pub fn freq_acc_correlation(report: &EvalReport) -> Result<Option<f64>> {
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for row in &report.per_bslot {
        if let Some(acc) = row.accuracy() {
            xs.push(row.train_freq as f64);
            ys.push(acc);
        }
    }
    if xs.len() < 3 {
        return Err(Error::Config(format!(
            "correlation needs at least 3 scored b-slots, found {}",
            xs.len()
        )));
    }
    Ok(pearson(&xs, &ys))
}
