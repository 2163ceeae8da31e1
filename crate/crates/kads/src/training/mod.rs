//! The three-stage training scheme: dialogue-document matching warm-up for
//! the retriever, action-masked language modeling with stochastic generator
//! freezing, and downstream fine-tuning, all sharing the top-k marginal
//! likelihood objective.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{
    make_ast_examples, make_wd_example, mask_actions, overlap_label, parse_action_target,
    render_action_target, render_document, serialize_context, ActionStyle, CorpusSplit,
    DatasetKind, Dialogue, KnowledgeBase, Task,
};
use crate::error::{Error, Result};
use crate::evaluation::metrics::action_accuracy;
use crate::generator::{
    build_conditioned_input, cond_loglik_node, generate, marginal_predict_cached, strip_eos,
    tokenize, InputMode, Vocab, EOS,
};
use crate::neural::{
    adamw_step, init_encoder, init_generator, load_checkpoint, save_checkpoint, sha256_hex,
    EncoderConfig, GenModelConfig, Graph, NodeId, OptimConfig, ParamStore,
};
use crate::retriever::{embed_node, top_k_indices, DocEmbeddingCache, Tower};

/// How many dev examples a mid-training evaluation tick decodes. Full-dev
/// numbers come from the evaluation harness after training.
const DEV_TICK_CAP: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Ddm,
    Mlm,
    Ast,
    Wd,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Ddm => "DDM",
            Stage::Mlm => "MLM",
            Stage::Ast => "AST",
            Stage::Wd => "WD",
        }
    }

    pub fn task(self) -> Option<Task> {
        match self {
            Stage::Ast => Some(Task::Ast),
            Stage::Wd => Some(Task::Wd),
            _ => None,
        }
    }
}

fn default_top_k() -> usize {
    5
}
fn default_freeze_prob() -> f64 {
    0.9
}
fn default_mask_rate() -> f64 {
    0.5
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    #[serde(default = "default_top_k")]
    pub top_k: usize,
    #[serde(default = "default_freeze_prob")]
    pub freeze_prob: f64,
    #[serde(default = "default_mask_rate")]
    pub mask_rate: f64,
    #[serde(default)]
    pub optim: OptimConfig,
    pub max_steps: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Stop a matching warm-up early once dev selection accuracy reaches
    /// this value. Checked only on eval ticks.
    #[serde(default)]
    pub early_stop_doc_acc: Option<f64>,
    /// Let masked-LM training run on a bundle that never saw the matching
    /// warm-up. The ablation suite needs this; leave it off otherwise.
    #[serde(default)]
    pub skip_warmup_check: bool,
}

impl TrainConfig {
    pub fn new(stage: Stage, max_steps: usize, eval_every: usize, seed: u64) -> Self {
        TrainConfig {
            stage,
            top_k: default_top_k(),
            freeze_prob: default_freeze_prob(),
            mask_rate: default_mask_rate(),
            optim: OptimConfig::default(),
            max_steps,
            eval_every,
            seed,
            early_stop_doc_acc: None,
            skip_warmup_check: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if !(0.0..=1.0).contains(&self.freeze_prob) {
            return Err(Error::Config(format!(
                "freeze_prob must lie in [0, 1], got {}",
                self.freeze_prob
            )));
        }
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(self.mask_rate > 0.0 && self.mask_rate <= 1.0) {
            return Err(Error::Config(format!(
                "mask_rate must lie in (0, 1], got {}",
                self.mask_rate
            )));
        }
        if self.max_steps == 0 || self.eval_every == 0 {
            return Err(Error::Config(
                "max_steps and eval_every must be positive".into(),
            ));
        }
        if let Some(t) = self.early_stop_doc_acc {
            if !(0.0..=1.0).contains(&t) {
                return Err(Error::Config(format!(
                    "early_stop_doc_acc must lie in [0, 1], got {t}"
                )));
            }
        }
        Ok(())
    }

    pub fn from_json_file(path: &Path) -> Result<TrainConfig> {
        let bytes = std::fs::read(path)?;
        let cfg: TrainConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::parse(&path.display().to_string(), &e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Named model/optimizer shape presets. "desk-scale" trains in minutes on a
/// laptop core; "paper-reference" mirrors the reference configuration from
/// the original system and is far too slow for the test suite.
pub fn model_preset(name: &str) -> Result<(EncoderConfig, GenModelConfig, OptimConfig)> {
    match name {
        "desk-scale" => Ok((
            EncoderConfig::default(),
            GenModelConfig::default(),
            OptimConfig::default(),
        )),
        "paper-reference" => Ok((
            EncoderConfig {
                layers: 4,
                hidden: 512,
                heads: 8,
                max_seq: 256,
                vocab: 0,
            },
            GenModelConfig {
                enc_layers: 4,
                dec_layers: 4,
                hidden: 512,
                heads: 8,
                max_input: 384,
                max_target: 64,
                vocab: 0,
                decode: Default::default(),
            },
            OptimConfig {
                learning_rate: 1e-5,
                batch_size: 32,
                ..OptimConfig::default()
            },
        )),
        other => Err(Error::Config(format!(
            "unknown preset {other}; available: desk-scale, paper-reference"
        ))),
    }
}

/// The complete trainable system: one parameter store per network, the
/// shared vocabulary, and the configuration both hash into checkpoints.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub dlg: ParamStore,
    pub doc: ParamStore,
    pub gen: ParamStore,
    pub vocab: Vocab,
    pub enc_cfg: EncoderConfig,
    pub gen_cfg: GenModelConfig,
    pub style: ActionStyle,
    pub trained_stages: BTreeSet<String>,
}

#[derive(Serialize, Deserialize)]
struct BundleMeta {
    vocab: Vocab,
    enc_cfg: EncoderConfig,
    gen_cfg: GenModelConfig,
    style: ActionStyle,
    trained_stages: BTreeSet<String>,
    config_hash: String,
}

impl ModelBundle {
    /// Build a fresh bundle for a corpus: vocabulary from the train split
    /// plus document renderings, vocab sizes filled in, and the target
    /// window checked against the longest rendered action sequence anywhere
    /// in the corpus.
    pub fn for_corpus(
        split: &CorpusSplit,
        kb: &KnowledgeBase,
        kind: DatasetKind,
        mut enc_cfg: EncoderConfig,
        mut gen_cfg: GenModelConfig,
        seed: u64,
    ) -> Result<ModelBundle> {
        let style = kind.action_style();
        let vocab = Vocab::build(&split.train, kb, style)?;
        enc_cfg.vocab = vocab.len();
        gen_cfg.vocab = vocab.len();
        enc_cfg.validate()?;
        gen_cfg.validate()?;
        let mut longest = 1;
        for d in split.all_dialogues() {
            let actions: Vec<_> = d.actions().cloned().collect();
            let target = render_action_target(&actions, style);
            longest = longest.max(vocab.encode(&target).len() + 1);
        }
        if longest > gen_cfg.max_target {
            return Err(Error::Config(format!(
                "max_target_len {} cannot hold the longest rendered action sequence ({} tokens)",
                gen_cfg.max_target, longest
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dlg = ParamStore::new();
        init_encoder(&mut dlg, "dlg", &enc_cfg, &mut rng);
        let mut doc = ParamStore::new();
        init_encoder(&mut doc, "doc", &enc_cfg, &mut rng);
        let mut gen = ParamStore::new();
        init_generator(&mut gen, &gen_cfg, &mut rng);
        Ok(ModelBundle {
            dlg,
            doc,
            gen,
            vocab,
            enc_cfg,
            gen_cfg,
            style,
            trained_stages: BTreeSet::new(),
        })
    }

    /// Hash of everything that must match for two checkpoints to be
    /// interchangeable: both network shapes and the action style.
    pub fn config_hash(&self) -> String {
        let blob = serde_json::to_string(&(&self.enc_cfg, &self.gen_cfg, &self.style))
            .expect("configs serialize");
        sha256_hex(blob.as_bytes())
    }

    /// Token sequences for every document rendering, in kb order.
    pub fn doc_tokens(&self, kb: &KnowledgeBase) -> Vec<Vec<usize>> {
        kb.docs()
            .iter()
            .map(|d| self.vocab.encode(&render_document(d)))
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let meta = BundleMeta {
            vocab: self.vocab.clone(),
            enc_cfg: self.enc_cfg.clone(),
            gen_cfg: self.gen_cfg.clone(),
            style: self.style,
            trained_stages: self.trained_stages.clone(),
            config_hash: self.config_hash(),
        };
        let json = serde_json::to_string_pretty(&meta).expect("bundle meta serializes");
        std::fs::write(dir.join("bundle.json"), json)?;
        let vh = self.vocab.hash();
        let ch = self.config_hash();
        save_checkpoint(&self.dlg, &dir.join("dlg.ckpt"), &vh, &ch)?;
        save_checkpoint(&self.doc, &dir.join("doc.ckpt"), &vh, &ch)?;
        save_checkpoint(&self.gen, &dir.join("gen.ckpt"), &vh, &ch)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<ModelBundle> {
        let meta_path = dir.join("bundle.json");
        let bytes = std::fs::read(&meta_path)?;
        let meta: BundleMeta = serde_json::from_slice(&bytes)
            .map_err(|e| Error::parse(&meta_path.display().to_string(), &e.to_string()))?;
        let mut bundle = ModelBundle {
            dlg: ParamStore::new(),
            doc: ParamStore::new(),
            gen: ParamStore::new(),
            vocab: meta.vocab,
            enc_cfg: meta.enc_cfg,
            gen_cfg: meta.gen_cfg,
            style: meta.style,
            trained_stages: meta.trained_stages,
        };
        if bundle.config_hash() != meta.config_hash {
            return Err(Error::Integrity(
                "bundle metadata hash does not match its configuration".into(),
            ));
        }
        let vh = bundle.vocab.hash();
        let ch = meta.config_hash;
        bundle.dlg = load_checkpoint(&dir.join("dlg.ckpt"), Some(&vh), Some(&ch))?.0;
        bundle.doc = load_checkpoint(&dir.join("doc.ckpt"), Some(&vh), Some(&ch))?.0;
        bundle.gen = load_checkpoint(&dir.join("gen.ckpt"), Some(&vh), Some(&ch))?.0;
        Ok(bundle)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub stage: String,
    pub loss: f64,
    pub frozen: bool,
    pub doc_acc: Option<f64>,
    pub bslot_acc: Option<f64>,
    pub value_acc: Option<f64>,
}

/// Append-only training trace with strictly increasing step numbers.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    records: Vec<TrainRecord>,
}

impl TrainLog {
    pub fn new() -> TrainLog {
        TrainLog::default()
    }

    pub fn push(&mut self, rec: TrainRecord) -> Result<()> {
        if let Some(last) = self.records.last() {
            if rec.step <= last.step {
                return Err(Error::Config(format!(
                    "log step {} does not increase past {}",
                    rec.step, last.step
                )));
            }
        }
        self.records.push(rec);
        Ok(())
    }

    pub fn records(&self) -> &[TrainRecord] {
        &self.records
    }

    pub fn last_doc_acc(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.doc_acc)
    }

    pub fn last_bslot_acc(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| r.bslot_acc)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
        for rec in &self.records {
            w.serialize(rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<TrainLog> {
        let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
        let mut log = TrainLog::new();
        for rec in r.deserialize() {
            log.push(rec.map_err(csv_err)?)?;
        }
        Ok(log)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::parse("train log", &e.to_string())
}

/// One Bernoulli draw per optimizer step: true means the generator sits
/// this step out entirely, parameters and optimizer moments alike.
pub fn freeze_mask_sample(rng: &mut ChaCha8Rng, freeze_prob: f64) -> bool {
    rng.random::<f64>() < freeze_prob
}

/// Keep the dialogues whose action b-slot set fits inside some single
/// document; the rest describe workflows no guideline documents, so masked
/// reconstruction has no document to lean on.
pub fn filter_mlm_dialogues<'a>(train: &'a [Dialogue], kb: &KnowledgeBase) -> Vec<&'a Dialogue> {
    train
        .iter()
        .filter(|d| {
            let used = d.bslot_set();
            kb.docs().iter().any(|doc| {
                let have: BTreeSet<&str> = doc.bslots.iter().map(|s| s.as_str()).collect();
                used.iter().all(|b| have.contains(b))
            })
        })
        .collect()
}

/// Document-tower embedding nodes for every document, shared by all the
/// examples in one step's graph.
pub fn doc_embedding_nodes(
    g: &mut Graph,
    bundle: &ModelBundle,
    doc_tokens: &[Vec<usize>],
) -> Result<Vec<NodeId>> {
    doc_tokens
        .iter()
        .map(|t| embed_node(g, &bundle.doc, &bundle.enc_cfg, Tower::Document, t))
        .collect()
}

/// Matching warm-up loss for one dialogue: full-softmax cross-entropy of
/// the relevance scores against the labeled document.
pub fn ddm_loss_node(
    g: &mut Graph,
    bundle: &ModelBundle,
    doc_nodes: &[NodeId],
    x: &str,
    label_idx: usize,
    example_id: &str,
) -> Result<NodeId> {
    let x_ids = bundle.vocab.encode(x);
    let x_emb = embed_node(g, &bundle.dlg, &bundle.enc_cfg, Tower::Dialogue, &x_ids)?;
    let mut scores = Vec::with_capacity(doc_nodes.len());
    for &dn in doc_nodes {
        scores.push(g.matmul_nt(x_emb, dn)?);
    }
    let row = g.stack(&scores)?;
    let loss = g.cross_entropy(row, &[label_idx])?;
    if !g.value(loss)[0].is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite matching loss on example {example_id}"
        )));
    }
    Ok(loss)
}

/// The training objective: negative log of the top-k marginal likelihood
/// −log Σ p(y|X,z)·p̂(z|X), assembled in log space. Gradients reach the
/// dialogue tower and document tower through the scores and the generator
/// through the conditional log-likelihoods; the discrete top-k selection
/// itself carries no gradient.
pub fn marginal_loss_node(
    g: &mut Graph,
    bundle: &ModelBundle,
    kb: &KnowledgeBase,
    doc_nodes: &[NodeId],
    x: &str,
    y_ids: &[usize],
    k: usize,
    example_id: &str,
) -> Result<NodeId> {
    if k == 0 || k > kb.len() {
        return Err(Error::Config(format!(
            "top-k of {k} out of range for {} documents",
            kb.len()
        )));
    }
    let x_ids = bundle.vocab.encode(x);
    let x_emb = embed_node(g, &bundle.dlg, &bundle.enc_cfg, Tower::Dialogue, &x_ids)?;
    let mut score_nodes = Vec::with_capacity(doc_nodes.len());
    let mut score_vals = Vec::with_capacity(doc_nodes.len());
    for &dn in doc_nodes {
        let s = g.matmul_nt(x_emb, dn)?;
        score_vals.push(g.value(s)[0]);
        score_nodes.push(s);
    }
    let picked = top_k_indices(&score_vals, k)?;
    let selected: Vec<NodeId> = picked.iter().map(|&i| score_nodes[i]).collect();
    let score_row = g.stack(&selected)?;
    let log_prior = g.log_softmax(score_row);
    let mut lls = Vec::with_capacity(k);
    for &i in &picked {
        let input_ids = build_conditioned_input(
            x,
            Some(kb.get(i)),
            InputMode::Retrieved,
            kb,
            &bundle.vocab,
            bundle.gen_cfg.max_input,
        )?;
        lls.push(cond_loglik_node(
            g,
            &bundle.gen,
            &bundle.gen_cfg,
            &input_ids,
            y_ids,
        )?);
    }
    let ll_row = g.stack(&lls)?;
    let mix = g.add(log_prior, ll_row)?;
    let lse = g.logsumexp(mix)?;
    let loss = g.scale(lse, -1.0);
    if !g.value(loss)[0].is_finite() {
        return Err(Error::Numeric(format!(
            "non-finite marginal loss on example {example_id}"
        )));
    }
    Ok(loss)
}

fn mean_loss(g: &mut Graph, losses: &[NodeId]) -> Result<NodeId> {
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    Ok(g.scale(total, 1.0 / losses.len() as f64))
}

fn split_grads(
    all: BTreeMap<String, Vec<f64>>,
) -> (
    BTreeMap<String, Vec<f64>>,
    BTreeMap<String, Vec<f64>>,
    BTreeMap<String, Vec<f64>>,
) {
    let mut dlg = BTreeMap::new();
    let mut doc = BTreeMap::new();
    let mut gen = BTreeMap::new();
    for (name, grad) in all {
        if name.starts_with("dlg.") {
            dlg.insert(name, grad);
        } else if name.starts_with("doc.") {
            doc.insert(name, grad);
        } else {
            gen.insert(name, grad);
        }
    }
    (dlg, doc, gen)
}

fn cycle_batch(
    order: &mut Vec<usize>,
    pos: &mut usize,
    size: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    let mut out = Vec::with_capacity(size);
    for _ in 0..size {
        if *pos == 0 {
            order.shuffle(rng);
        }
        out.push(order[*pos]);
        *pos = (*pos + 1) % order.len();
    }
    out
}

/// Full serialization of a dialogue for the retrieval towers.
pub fn dialogue_text(d: &Dialogue, style: ActionStyle) -> Result<String> {
    serialize_context(d, d.turns.len() - 1, Task::Ast, style)
}

/// Top-1 retrieval accuracy against the per-dialogue labeled document
/// (explicit intent label when present, otherwise the overlap heuristic).
/// Dialogues with no derivable label are skipped.
pub fn doc_selection_accuracy(
    bundle: &ModelBundle,
    dialogues: &[Dialogue],
    kb: &KnowledgeBase,
    doc_tokens: &[Vec<usize>],
) -> Result<f64> {
    if kb.is_empty() {
        return Err(Error::Input("knowledge base is empty".into()));
    }
    let mut cache = DocEmbeddingCache::new();
    let mut hits = 0usize;
    let mut total = 0usize;
    for d in dialogues {
        let Ok(label) = overlap_label(d, kb) else {
            continue;
        };
        let x = dialogue_text(d, bundle.style)?;
        let x_ids = bundle.vocab.encode(&x);
        let dist = crate::retriever::top_k_retrieve(
            &bundle.dlg,
            &bundle.doc,
            &bundle.enc_cfg,
            &x_ids,
            kb,
            doc_tokens,
            1,
            Some(&mut cache),
        )?;
        if dist.doc_ids[0] == label {
            hits += 1;
        }
        total += 1;
    }
    if total == 0 {
        return Err(Error::Label(
            "no dialogue yields a document label to score against".into(),
        ));
    }
    Ok(hits as f64 / total as f64)
}

/// Stage one: train the two encoder towers to retrieve each dialogue's
/// labeled document under a full-softmax cross-entropy. The generator is
/// untouched. Logs dev selection accuracy on eval ticks and supports early
/// stop on it.
pub fn train_ddm(
    mut bundle: ModelBundle,
    split: &CorpusSplit,
    kb: &KnowledgeBase,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainLog)> {
    cfg.validate()?;
    if cfg.stage != Stage::Ddm {
        return Err(Error::Config(format!(
            "matching warm-up invoked with stage {}",
            cfg.stage.as_str()
        )));
    }
    if kb.is_empty() {
        return Err(Error::Input("knowledge base is empty".into()));
    }
    let mut items: Vec<(String, usize, String)> = Vec::new();
    let mut skipped = 0usize;
    for d in &split.train {
        match overlap_label(d, kb) {
            Ok(label) => {
                let idx = kb.index_of(&label).expect("label ids come from the kb");
                items.push((dialogue_text(d, bundle.style)?, idx, d.id.clone()));
            }
            Err(_) => skipped += 1,
        }
    }
    if skipped > 0 {
        eprintln!("warning: skipped {skipped} unlabeled dialogues in matching warm-up");
    }
    if items.is_empty() {
        return Err(Error::Config(
            "no train dialogue yields a document label".into(),
        ));
    }
    let doc_tokens = bundle.doc_tokens(kb);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut pos = 0usize;
    let mut log = TrainLog::new();
    for step in 1..=cfg.max_steps {
        let batch = cycle_batch(&mut order, &mut pos, cfg.optim.batch_size, &mut rng);
        let mut g = Graph::new();
        let doc_nodes = doc_embedding_nodes(&mut g, &bundle, &doc_tokens)?;
        let mut losses = Vec::with_capacity(batch.len());
        for &bi in &batch {
            let (x, label, id) = &items[bi];
            losses.push(ddm_loss_node(&mut g, &bundle, &doc_nodes, x, *label, id)?);
        }
        let loss = mean_loss(&mut g, &losses)?;
        let loss_val = g.value(loss)[0];
        g.backward(loss)?;
        let (dlg_g, doc_g, _) = split_grads(g.param_grads());
        let next_dlg = bundle.dlg.step + 1;
        adamw_step(&mut bundle.dlg, &dlg_g, &cfg.optim, next_dlg)?;
        let next_doc = bundle.doc.step + 1;
        adamw_step(&mut bundle.doc, &doc_g, &cfg.optim, next_doc)?;
        let tick = step % cfg.eval_every == 0 || step == cfg.max_steps;
        let doc_acc = if tick && !split.dev.is_empty() {
            Some(doc_selection_accuracy(&bundle, &split.dev, kb, &doc_tokens)?)
        } else {
            None
        };
        log.push(TrainRecord {
            step,
            stage: Stage::Ddm.as_str().into(),
            loss: loss_val,
            frozen: false,
            doc_acc,
            bslot_acc: None,
            value_acc: None,
        })?;
        if let (Some(acc), Some(t)) = (doc_acc, cfg.early_stop_doc_acc) {
            if acc >= t {
                break;
            }
        }
    }
    bundle.trained_stages.insert("DDM".into());
    Ok((bundle, log))
}

/// Stage two: masked-action language modeling over the guideline-filtered
/// dialogues under the marginal objective, with the generator frozen for a
/// Bernoulli(freeze_prob) share of the optimizer steps.
pub fn train_mlm(
    mut bundle: ModelBundle,
    split: &CorpusSplit,
    kb: &KnowledgeBase,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainLog)> {
    cfg.validate()?;
    if cfg.stage != Stage::Mlm {
        return Err(Error::Config(format!(
            "masked-LM training invoked with stage {}",
            cfg.stage.as_str()
        )));
    }
    if !cfg.skip_warmup_check && !bundle.trained_stages.contains("DDM") {
        return Err(Error::Config(
            "masked-LM training expects a matching warm-up first; set skip_warmup_check to run cold".into(),
        ));
    }
    let filtered = filter_mlm_dialogues(&split.train, kb);
    let usable: Vec<&Dialogue> = filtered
        .into_iter()
        .filter(|d| d.actions().next().is_some())
        .collect();
    if usable.is_empty() {
        return Err(Error::Config(
            "no dialogue survives the guideline filter with at least one action".into(),
        ));
    }
    let doc_tokens = bundle.doc_tokens(kb);
    let k = cfg.top_k.min(kb.len());
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut mask_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6d61_736b);
    let mut freeze_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6672_7a00);
    let mut order: Vec<usize> = (0..usable.len()).collect();
    let mut pos = 0usize;
    let mut log = TrainLog::new();
    for step in 1..=cfg.max_steps {
        let frozen = freeze_mask_sample(&mut freeze_rng, cfg.freeze_prob);
        let batch = cycle_batch(&mut order, &mut pos, cfg.optim.batch_size, &mut shuffle_rng);
        let mut g = Graph::new();
        let doc_nodes = doc_embedding_nodes(&mut g, &bundle, &doc_tokens)?;
        let mut losses = Vec::with_capacity(batch.len());
        for &bi in &batch {
            let d = usable[bi];
            let (x, target) = mask_actions(d, cfg.mask_rate, &mut mask_rng, bundle.style)?;
            let mut y = bundle.vocab.encode(&target);
            y.push(EOS);
            losses.push(marginal_loss_node(
                &mut g, &bundle, kb, &doc_nodes, &x, &y, k, &d.id,
            )?);
        }
        let loss = mean_loss(&mut g, &losses)?;
        let loss_val = g.value(loss)[0];
        g.backward(loss)?;
        let (dlg_g, doc_g, gen_g) = split_grads(g.param_grads());
        let next_dlg = bundle.dlg.step + 1;
        adamw_step(&mut bundle.dlg, &dlg_g, &cfg.optim, next_dlg)?;
        let next_doc = bundle.doc.step + 1;
        adamw_step(&mut bundle.doc, &doc_g, &cfg.optim, next_doc)?;
        if !frozen {
            let next_gen = bundle.gen.step + 1;
            adamw_step(&mut bundle.gen, &gen_g, &cfg.optim, next_gen)?;
        }
        let tick = step % cfg.eval_every == 0 || step == cfg.max_steps;
        let doc_acc = if tick && !split.dev.is_empty() {
            Some(doc_selection_accuracy(&bundle, &split.dev, kb, &doc_tokens)?)
        } else {
            None
        };
        log.push(TrainRecord {
            step,
            stage: Stage::Mlm.as_str().into(),
            loss: loss_val,
            frozen,
            doc_acc,
            bslot_acc: None,
            value_acc: None,
        })?;
    }
    bundle.trained_stages.insert("MLM".into());
    Ok((bundle, log))
}

/// Flatten a split into (context, target) pairs for a downstream task,
/// dropping examples whose context serializes to nothing.
pub fn build_task_examples(
    dialogues: &[Dialogue],
    task: Task,
    style: ActionStyle,
) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for d in dialogues {
        match task {
            Task::Ast => {
                for ex in make_ast_examples(d, style)? {
                    out.push(ex);
                }
            }
            Task::Wd => out.push(make_wd_example(d, style)?),
        }
    }
    Ok(out
        .into_iter()
        .filter(|(x, _)| !tokenize(x).is_empty())
        .collect())
}

/// Decode-and-score a capped slice of dev examples; returns (b-slot
/// accuracy, value accuracy).
fn dev_task_accuracy(
    bundle: &ModelBundle,
    kb: &KnowledgeBase,
    doc_tokens: &[Vec<usize>],
    examples: &[(String, String)],
    k: usize,
) -> Result<(f64, f64)> {
    let take = examples.len().min(DEV_TICK_CAP);
    let mut cache = DocEmbeddingCache::new();
    let mut golds = Vec::with_capacity(take);
    let mut preds = Vec::with_capacity(take);
    for (x, target) in &examples[..take] {
        let gold = parse_action_target(target, bundle.style)?;
        let (pred, _) = marginal_predict_cached(bundle, x, kb, doc_tokens, &mut cache, k)?;
        preds.push(parse_action_target(&pred, bundle.style).ok());
        golds.push(gold);
    }
    let s = action_accuracy(&golds, &preds)?;
    Ok((s.bslot_acc, s.value_acc))
}

/// Stage three: fine-tune everything on next-action or whole-workflow
/// examples under the marginal objective. No freezing here; the returned
/// bundle is the checkpoint with the best dev b-slot accuracy when dev
/// examples exist, otherwise the final state.
pub fn train_task(
    mut bundle: ModelBundle,
    split: &CorpusSplit,
    kb: &KnowledgeBase,
    cfg: &TrainConfig,
) -> Result<(ModelBundle, TrainLog)> {
    cfg.validate()?;
    let Some(task) = cfg.stage.task() else {
        return Err(Error::Config(format!(
            "task fine-tuning invoked with stage {}",
            cfg.stage.as_str()
        )));
    };
    let train_ex = build_task_examples(&split.train, task, bundle.style)?;
    if train_ex.is_empty() {
        return Err(Error::Config("no task examples in the train split".into()));
    }
    let dev_ex = build_task_examples(&split.dev, task, bundle.style)?;
    let doc_tokens = bundle.doc_tokens(kb);
    let k = cfg.top_k.min(kb.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut pos = 0usize;
    let mut log = TrainLog::new();
    let mut best: Option<(f64, ParamStore, ParamStore, ParamStore)> = None;
    for step in 1..=cfg.max_steps {
        let batch = cycle_batch(&mut order, &mut pos, cfg.optim.batch_size, &mut rng);
        let mut g = Graph::new();
        let doc_nodes = doc_embedding_nodes(&mut g, &bundle, &doc_tokens)?;
        let mut losses = Vec::with_capacity(batch.len());
        for &bi in &batch {
            let (x, target) = &train_ex[bi];
            let mut y = bundle.vocab.encode(target);
            y.push(EOS);
            losses.push(marginal_loss_node(
                &mut g,
                &bundle,
                kb,
                &doc_nodes,
                x,
                &y,
                k,
                &format!("example {bi}"),
            )?);
        }
        let loss = mean_loss(&mut g, &losses)?;
        let loss_val = g.value(loss)[0];
        g.backward(loss)?;
        let (dlg_g, doc_g, gen_g) = split_grads(g.param_grads());
        let next_dlg = bundle.dlg.step + 1;
        adamw_step(&mut bundle.dlg, &dlg_g, &cfg.optim, next_dlg)?;
        let next_doc = bundle.doc.step + 1;
        adamw_step(&mut bundle.doc, &doc_g, &cfg.optim, next_doc)?;
        let next_gen = bundle.gen.step + 1;
        adamw_step(&mut bundle.gen, &gen_g, &cfg.optim, next_gen)?;
        let tick = step % cfg.eval_every == 0 || step == cfg.max_steps;
        let (bslot_acc, value_acc) = if tick && !dev_ex.is_empty() {
            let (b, v) = dev_task_accuracy(&bundle, kb, &doc_tokens, &dev_ex, k)?;
            if best.as_ref().map_or(true, |(bb, ..)| b > *bb) {
                best = Some((b, bundle.dlg.clone(), bundle.doc.clone(), bundle.gen.clone()));
            }
            (Some(b), Some(v))
        } else {
            (None, None)
        };
        log.push(TrainRecord {
            step,
            stage: cfg.stage.as_str().into(),
            loss: loss_val,
            frozen: false,
            doc_acc: None,
            bslot_acc,
            value_acc,
        })?;
    }
    if let Some((_, dlg, doc, gen)) = best {
        bundle.dlg = dlg;
        bundle.doc = doc;
        bundle.gen = gen;
    }
    bundle.trained_stages.insert(cfg.stage.as_str().into());
    Ok((bundle, log))
}

/// Train the generator alone on task examples with a fixed input mode
/// (no retrieval, or the full static guide). This is the comparison system:
/// same architecture, no marginalization, towers untouched.
pub fn train_baseline(
    mut bundle: ModelBundle,
    split: &CorpusSplit,
    kb: &KnowledgeBase,
    cfg: &TrainConfig,
    mode: InputMode,
) -> Result<(ModelBundle, TrainLog)> {
    cfg.validate()?;
    let Some(task) = cfg.stage.task() else {
        return Err(Error::Config(format!(
            "baseline training invoked with stage {}",
            cfg.stage.as_str()
        )));
    };
    if mode == InputMode::Retrieved {
        return Err(Error::Config(
            "baseline training does not retrieve; use the marginal pipeline".into(),
        ));
    }
    let train_ex = build_task_examples(&split.train, task, bundle.style)?;
    if train_ex.is_empty() {
        return Err(Error::Config("no task examples in the train split".into()));
    }
    let dev_ex = build_task_examples(&split.dev, task, bundle.style)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_ex.len()).collect();
    let mut pos = 0usize;
    let mut log = TrainLog::new();
    let mut best: Option<(f64, ParamStore)> = None;
    for step in 1..=cfg.max_steps {
        let batch = cycle_batch(&mut order, &mut pos, cfg.optim.batch_size, &mut rng);
        let mut g = Graph::new();
        let mut losses = Vec::with_capacity(batch.len());
        for &bi in &batch {
            let (x, target) = &train_ex[bi];
            let input =
                build_conditioned_input(x, None, mode, kb, &bundle.vocab, bundle.gen_cfg.max_input)?;
            let mut y = bundle.vocab.encode(target);
            y.push(EOS);
            let ll = cond_loglik_node(&mut g, &bundle.gen, &bundle.gen_cfg, &input, &y)?;
            losses.push(g.scale(ll, -1.0));
        }
        let loss = mean_loss(&mut g, &losses)?;
        let loss_val = g.value(loss)[0];
        if !loss_val.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite baseline loss at step {step}"
            )));
        }
        g.backward(loss)?;
        let (_, _, gen_g) = split_grads(g.param_grads());
        let next_gen = bundle.gen.step + 1;
        adamw_step(&mut bundle.gen, &gen_g, &cfg.optim, next_gen)?;
        let tick = step % cfg.eval_every == 0 || step == cfg.max_steps;
        let (bslot_acc, value_acc) = if tick && !dev_ex.is_empty() {
            let (b, v) = dev_baseline_accuracy(&bundle, kb, &dev_ex, mode)?;
            if best.as_ref().map_or(true, |(bb, _)| b > *bb) {
                best = Some((b, bundle.gen.clone()));
            }
            (Some(b), Some(v))
        } else {
            (None, None)
        };
        log.push(TrainRecord {
            step,
            stage: cfg.stage.as_str().into(),
            loss: loss_val,
            frozen: false,
            doc_acc: None,
            bslot_acc,
            value_acc,
        })?;
    }
    if let Some((_, gen)) = best {
        bundle.gen = gen;
    }
    bundle
        .trained_stages
        .insert(format!("BASELINE-{}", mode.as_str()));
    Ok((bundle, log))
}

/// Decode-and-score dev examples for a baseline input mode.
pub fn dev_baseline_accuracy(
    bundle: &ModelBundle,
    kb: &KnowledgeBase,
    examples: &[(String, String)],
    mode: InputMode,
) -> Result<(f64, f64)> {
    let take = examples.len().min(DEV_TICK_CAP);
    let mut golds = Vec::with_capacity(take);
    let mut preds = Vec::with_capacity(take);
    for (x, target) in &examples[..take] {
        golds.push(parse_action_target(target, bundle.style)?);
        let input =
            build_conditioned_input(x, None, mode, kb, &bundle.vocab, bundle.gen_cfg.max_input)?;
        let out = generate(&bundle.gen, &bundle.gen_cfg, &input)?;
        let decoded = bundle.vocab.decode(strip_eos(&out))?;
        preds.push(parse_action_target(&decoded, bundle.style).ok());
    }
    let s = action_accuracy(&golds, &preds)?;
    Ok((s.bslot_acc, s.value_acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::synth_corpus;
    use crate::neural::{grad_check, Decode};

    fn tiny_shapes(hidden: usize) -> (EncoderConfig, GenModelConfig) {
        (
            EncoderConfig {
                layers: 1,
                hidden,
                heads: 2,
                max_seq: 64,
                vocab: 0,
            },
            GenModelConfig {
                enc_layers: 1,
                dec_layers: 1,
                hidden,
                heads: 2,
                max_input: 128,
                max_target: 48,
                vocab: 0,
                decode: Decode::Greedy,
            },
        )
    }

    fn tiny_bundle(
        n_docs: usize,
        n_dialogues: usize,
        bslots: usize,
        hidden: usize,
        seed: u64,
    ) -> (ModelBundle, CorpusSplit, KnowledgeBase) {
        let (split, kb) = synth_corpus(n_docs, n_dialogues, bslots, seed).unwrap();
        let (enc, gen) = tiny_shapes(hidden);
        let bundle =
            ModelBundle::for_corpus(&split, &kb, DatasetKind::Synthetic, enc, gen, seed).unwrap();
        (bundle, split, kb)
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut cfg = TrainConfig::new(Stage::Ddm, 10, 5, 1);
        assert!(cfg.validate().is_ok());
        cfg.freeze_prob = 1.5;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.freeze_prob = 0.9;
        cfg.top_k = 0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        cfg.top_k = 5;
        cfg.mask_rate = 0.0;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn presets_exist_and_unknown_names_do_not() {
        let (enc, gen, opt) = model_preset("desk-scale").unwrap();
        assert_eq!((enc.layers, enc.hidden), (2, 64));
        assert_eq!((gen.enc_layers, gen.hidden), (2, 64));
        assert_eq!(opt.batch_size, 16);
        let (enc, _, opt) = model_preset("paper-reference").unwrap();
        assert_eq!((enc.layers, enc.hidden), (4, 512));
        assert_eq!(opt.learning_rate, 1e-5);
        assert_eq!(opt.batch_size, 32);
        assert!(matches!(model_preset("galactic"), Err(Error::Config(_))));
    }

    #[test]
    fn train_config_json_round_trip_applies_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"stage":"MLM","max_steps":50,"eval_every":10,"seed":7}"#,
        )
        .unwrap();
        let cfg = TrainConfig::from_json_file(&path).unwrap();
        assert_eq!(cfg.stage, Stage::Mlm);
        assert_eq!(cfg.top_k, 5);
        assert_eq!(cfg.freeze_prob, 0.9);
        assert_eq!(cfg.mask_rate, 0.5);
        std::fs::write(&path, r#"{"stage":"MLM","max_steps":50,"eval_every":10,"seed":7,"optin":{}}"#).unwrap();
        assert!(TrainConfig::from_json_file(&path).is_err());
    }

    #[test]
    fn bundle_vocab_covers_document_bslots() {
        let (bundle, _, kb) = tiny_bundle(3, 9, 12, 16, 5);
        for doc in kb.docs() {
            for b in &doc.bslots {
                assert!(bundle.vocab.contains(b), "{b} missing from vocabulary");
            }
        }
        assert_eq!(bundle.enc_cfg.vocab, bundle.vocab.len());
        assert_eq!(bundle.gen_cfg.vocab, bundle.vocab.len());
    }

    #[test]
    fn bundle_rejects_an_undersized_target_window() {
        let (split, kb) = synth_corpus(3, 9, 12, 5).unwrap();
        let (enc, mut gen) = tiny_shapes(16);
        gen.max_target = 2;
        let r = ModelBundle::for_corpus(&split, &kb, DatasetKind::Synthetic, enc, gen, 5);
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn bundle_save_load_round_trip_is_bit_identical() {
        let (bundle, _, _) = tiny_bundle(2, 6, 10, 16, 6);
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let back = ModelBundle::load(dir.path()).unwrap();
        assert_eq!(back.vocab, bundle.vocab);
        assert_eq!(back.enc_cfg, bundle.enc_cfg);
        assert_eq!(back.trained_stages, bundle.trained_stages);
        for (name, t) in &bundle.gen.params {
            assert_eq!(back.gen.params[name].data(), t.data(), "{name}");
        }
        for (name, t) in &bundle.dlg.m {
            assert_eq!(back.dlg.m[name].data(), t.data(), "{name} moment");
        }
    }

    #[test]
    fn bundle_load_rejects_tampered_metadata() {
        let (bundle, _, _) = tiny_bundle(2, 6, 10, 16, 6);
        let dir = tempfile::tempdir().unwrap();
        bundle.save(dir.path()).unwrap();
        let meta_path = dir.path().join("bundle.json");
        let text = std::fs::read_to_string(&meta_path).unwrap();
        std::fs::write(&meta_path, text.replace("\"layers\": 1", "\"layers\": 2")).unwrap();
        assert!(ModelBundle::load(dir.path()).is_err());
    }

    #[test]
    fn train_log_enforces_increasing_steps_and_survives_csv() {
        let mut log = TrainLog::new();
        let rec = |step, doc_acc| TrainRecord {
            step,
            stage: "DDM".into(),
            loss: 1.25,
            frozen: false,
            doc_acc,
            bslot_acc: None,
            value_acc: None,
        };
        log.push(rec(1, None)).unwrap();
        log.push(rec(2, Some(0.5))).unwrap();
        assert!(log.push(rec(2, None)).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("log.csv");
        log.write_csv(&path).unwrap();
        let back = TrainLog::read_csv(&path).unwrap();
        assert_eq!(back, log);
        assert_eq!(back.last_doc_acc(), Some(0.5));
    }

    #[test]
    fn freeze_sampling_matches_its_probability() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        assert!((0..100).all(|_| freeze_mask_sample(&mut rng, 1.0)));
        assert!((0..100).all(|_| !freeze_mask_sample(&mut rng, 0.0)));
        let mut rng = ChaCha8Rng::seed_from_u64(4242);
        let n = (0..1000)
            .filter(|_| freeze_mask_sample(&mut rng, 0.9))
            .count();
        assert!((880..=920).contains(&n), "{n} frozen of 1000");
    }

    use crate::corpus::{Action, Document, Turn};

    fn doc_with(id: &str, bslots: &[&str]) -> Document {
        Document {
            id: id.into(),
            intent_text: format!("handle {id}"),
            bslots: bslots.iter().map(|s| s.to_string()).collect(),
            required_values: vec![],
            optional_values: vec![],
            result_values: vec![],
        }
    }

    fn dialogue_acting(id: &str, bslots: &[&str]) -> Dialogue {
        let mut turns = vec![Turn::Customer {
            text: "hi, i need a hand".into(),
        }];
        turns.extend(bslots.iter().map(|b| Turn::Action {
            action: Action::new(*b, vec![]).unwrap(),
        }));
        Dialogue {
            id: id.into(),
            turns,
            intent_labels: vec![],
        }
    }

    #[test]
    fn guideline_filter_keeps_subsets_only() {
        let kb = KnowledgeBase::new(vec![
            doc_with("refunds", &["verify-identity", "issue-refund"]),
            doc_with("shipping", &["check-order", "update-shipping"]),
        ])
        .unwrap();
        let dialogues = vec![
            dialogue_acting("inside-one", &["verify-identity"]),
            dialogue_acting("exactly-one", &["verify-identity", "issue-refund"]),
            dialogue_acting("spans-two", &["verify-identity", "check-order"]),
            dialogue_acting("unknown-slot", &["escalate-ticket"]),
        ];
        let kept = filter_mlm_dialogues(&dialogues, &kb);
        let ids: Vec<&str> = kept.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["inside-one", "exactly-one"]);

        let (split, kb) = synth_corpus(4, 20, 14, 8).unwrap();
        assert_eq!(
            filter_mlm_dialogues(&split.train, &kb).len(),
            split.train.len()
        );
    }

    #[test]
    fn single_document_base_scores_perfectly_untrained() {
        let (bundle, split, kb) = tiny_bundle(2, 8, 10, 16, 3);
        let solo = KnowledgeBase::new(vec![kb.get(0).clone()]).unwrap();
        let doc_tokens = bundle.doc_tokens(&solo);
        let usable: Vec<Dialogue> = split
            .train
            .iter()
            .cloned()
            .map(|mut d| {
                d.intent_labels.clear();
                d
            })
            .collect();
        assert!(!usable.is_empty());
        let acc = doc_selection_accuracy(&bundle, &usable, &solo, &doc_tokens).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn marginal_with_full_k_matches_brute_force() {
        let (bundle, split, kb) = tiny_bundle(3, 9, 12, 16, 11);
        let d = &split.train[0];
        let x = dialogue_text(d, bundle.style).unwrap();
        let actions: Vec<_> = d.actions().cloned().collect();
        let target = render_action_target(&actions, bundle.style);
        let mut y = bundle.vocab.encode(&target);
        y.push(EOS);
        let doc_tokens = bundle.doc_tokens(&kb);

        let mut g = Graph::new();
        let doc_nodes = doc_embedding_nodes(&mut g, &bundle, &doc_tokens).unwrap();
        let loss = marginal_loss_node(&mut g, &bundle, &kb, &doc_nodes, &x, &y, kb.len(), "t")
            .unwrap();
        let got = g.value(loss)[0];

        let x_ids = bundle.vocab.encode(&x);
        let x_emb = crate::retriever::embed_text(&bundle.dlg, &bundle.enc_cfg, Tower::Dialogue, &x_ids)
            .unwrap();
        let mut scores = Vec::new();
        for t in &doc_tokens {
            let e = crate::retriever::embed_text(&bundle.doc, &bundle.enc_cfg, Tower::Document, t)
                .unwrap();
            scores.push(crate::retriever::relevance(&x_emb, &e).unwrap());
        }
        let probs = crate::retriever::softmax_scores(&scores);
        let mut total = 0.0;
        for (i, p) in probs.iter().enumerate() {
            let input = build_conditioned_input(
                &x,
                Some(kb.get(i)),
                InputMode::Retrieved,
                &kb,
                &bundle.vocab,
                bundle.gen_cfg.max_input,
            )
            .unwrap();
            let ll =
                crate::generator::cond_loglik(&bundle.gen, &bundle.gen_cfg, &input, &y).unwrap();
            total += p * ll.exp();
        }
        let expect = -total.ln();
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn single_document_marginal_is_plain_likelihood() {
        let (bundle, split, kb) = tiny_bundle(2, 8, 10, 16, 13);
        let solo = KnowledgeBase::new(vec![kb.get(0).clone()]).unwrap();
        let d = &split.train[0];
        let x = dialogue_text(d, bundle.style).unwrap();
        let mut y = bundle.vocab.encode("alpha");
        y[0] = 10.min(bundle.vocab.len() - 1);
        y.push(EOS);
        let doc_tokens = bundle.doc_tokens(&solo);
        let mut g = Graph::new();
        let doc_nodes = doc_embedding_nodes(&mut g, &bundle, &doc_tokens).unwrap();
        let loss =
            marginal_loss_node(&mut g, &bundle, &solo, &doc_nodes, &x, &y, 1, "t").unwrap();
        let input = build_conditioned_input(
            &x,
            Some(solo.get(0)),
            InputMode::Retrieved,
            &solo,
            &bundle.vocab,
            bundle.gen_cfg.max_input,
        )
        .unwrap();
        let ll = crate::generator::cond_loglik(&bundle.gen, &bundle.gen_cfg, &input, &y).unwrap();
        assert_eq!(g.value(loss)[0], -ll);
    }

    #[test]
    fn marginal_respects_log_sum_exp_bounds() {
        let (bundle, split, kb) = tiny_bundle(4, 12, 14, 16, 17);
        let d = &split.train[1];
        let x = dialogue_text(d, bundle.style).unwrap();
        let actions: Vec<_> = d.actions().cloned().collect();
        let target = render_action_target(&actions, bundle.style);
        let mut y = bundle.vocab.encode(&target);
        y.push(EOS);
        let doc_tokens = bundle.doc_tokens(&kb);
        let k = 3;
        let mut g = Graph::new();
        let doc_nodes = doc_embedding_nodes(&mut g, &bundle, &doc_tokens).unwrap();
        let loss = marginal_loss_node(&mut g, &bundle, &kb, &doc_nodes, &x, &y, k, "t").unwrap();
        let got = g.value(loss)[0];

        let x_ids = bundle.vocab.encode(&x);
        let x_emb = crate::retriever::embed_text(&bundle.dlg, &bundle.enc_cfg, Tower::Dialogue, &x_ids)
            .unwrap();
        let mut scores = Vec::new();
        for t in &doc_tokens {
            let e = crate::retriever::embed_text(&bundle.doc, &bundle.enc_cfg, Tower::Document, t)
                .unwrap();
            scores.push(crate::retriever::relevance(&x_emb, &e).unwrap());
        }
        let picked = top_k_indices(&scores, k).unwrap();
        let mut lls = Vec::new();
        for &i in &picked {
            let input = build_conditioned_input(
                &x,
                Some(kb.get(i)),
                InputMode::Retrieved,
                &kb,
                &bundle.vocab,
                bundle.gen_cfg.max_input,
            )
            .unwrap();
            lls.push(
                crate::generator::cond_loglik(&bundle.gen, &bundle.gen_cfg, &input, &y).unwrap(),
            );
        }
        let max_ll = lls.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let min_ll = lls.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(got >= -max_ll - 1e-9, "loss {got} below −max ll {}", -max_ll);
        assert!(got <= -min_ll + 1e-9, "loss {got} above −min ll {}", -min_ll);
    }

    #[test]
    fn matching_gradient_survives_finite_differences() {
        let (split, kb) = synth_corpus(2, 6, 8, 21).unwrap();
        let (mut enc, gen) = tiny_shapes(8);
        enc.max_seq = 32;
        let bundle =
            ModelBundle::for_corpus(&split, &kb, DatasetKind::Synthetic, enc, gen, 21).unwrap();
        let d = &split.train[0];
        let x = dialogue_text(d, bundle.style).unwrap();
        let doc_tokens = bundle.doc_tokens(&kb);
        let mut combined = ParamStore::new();
        for src in [&bundle.dlg, &bundle.doc] {
            for (name, t) in &src.params {
                combined.insert(name, t.clone());
            }
        }
        let template = bundle.clone();
        let f = |s: &ParamStore, g: &mut Graph| {
            let b = ModelBundle {
                dlg: s.clone(),
                doc: s.clone(),
                ..template.clone()
            };
            let doc_nodes = doc_embedding_nodes(g, &b, &doc_tokens)?;
            ddm_loss_node(g, &b, &doc_nodes, &x, 1, "gc")
        };
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let err = grad_check(f, &combined, 1e-5, 128, &mut rng).unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn marginal_gradient_survives_finite_differences() {
        let (split, kb_full) = synth_corpus(2, 6, 8, 19).unwrap();
        let (mut enc, mut gen) = tiny_shapes(8);
        enc.max_seq = 32;
        gen.max_input = 64;
        let bundle =
            ModelBundle::for_corpus(&split, &kb_full, DatasetKind::Synthetic, enc, gen, 19)
                .unwrap();
        let d = &split.train[0];
        let x = dialogue_text(d, bundle.style).unwrap();
        let actions: Vec<_> = d.actions().cloned().collect();
        let target = render_action_target(&actions[..1], bundle.style);
        let mut y = bundle.vocab.encode(&target);
        y.push(EOS);
        let doc_tokens = bundle.doc_tokens(&kb_full);

        let mut combined = ParamStore::new();
        for src in [&bundle.dlg, &bundle.doc, &bundle.gen] {
            for (name, t) in &src.params {
                combined.insert(name, t.clone());
            }
        }
        let template = bundle.clone();
        let f = |s: &ParamStore, g: &mut Graph| {
            let b = ModelBundle {
                dlg: s.clone(),
                doc: s.clone(),
                gen: s.clone(),
                ..template.clone()
            };
            let doc_nodes = doc_embedding_nodes(g, &b, &doc_tokens)?;
            marginal_loss_node(g, &b, &kb_full, &doc_nodes, &x, &y, kb_full.len(), "gc")
        };
        // The marginal loss leaves some tower coordinates with gradients
        // near 1e-8, where central differences at small eps drown in f64
        // rounding. A coarser step keeps the comparison meaningful.
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let err = grad_check(f, &combined, 3e-4, 160, &mut rng).unwrap();
        assert!(err < 1e-3, "rel err {err}");
    }

    #[test]
    fn warm_up_trains_towers_only_and_logs_accuracy() {
        let (bundle, split, kb) = tiny_bundle(3, 30, 12, 16, 29);
        let gen_before: Vec<(String, Vec<f64>)> = bundle
            .gen
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t.data().to_vec()))
            .collect();
        let mut cfg = TrainConfig::new(Stage::Ddm, 12, 4, 29);
        cfg.optim.batch_size = 6;
        let (trained, log) = train_ddm(bundle, &split, &kb, &cfg).unwrap();
        assert_eq!(log.records().len(), 12);
        assert!(log.records().iter().all(|r| r.stage == "DDM" && !r.frozen));
        assert!(log.records()[3].doc_acc.is_some());
        assert!(log.records()[0].doc_acc.is_none());
        for (name, data) in gen_before {
            assert_eq!(trained.gen.params[&name].data(), &data[..], "{name}");
        }
        assert!(trained.trained_stages.contains("DDM"));
        let steps: Vec<usize> = log.records().iter().map(|r| r.step).collect();
        let mut sorted = steps.clone();
        sorted.dedup();
        assert_eq!(steps, sorted);
    }

    #[test]
    fn warm_up_early_stop_cuts_the_run_short() {
        let (bundle, split, kb) = tiny_bundle(2, 16, 10, 16, 31);
        let mut cfg = TrainConfig::new(Stage::Ddm, 400, 2, 31);
        cfg.optim.batch_size = 4;
        cfg.early_stop_doc_acc = Some(0.0);
        let (_, log) = train_ddm(bundle, &split, &kb, &cfg).unwrap();
        assert_eq!(log.records().len(), 2);
    }

    #[test]
    fn masked_stage_requires_warm_up_unless_overridden() {
        let (bundle, split, kb) = tiny_bundle(2, 8, 10, 16, 37);
        let cfg = TrainConfig::new(Stage::Mlm, 2, 2, 37);
        assert!(matches!(
            train_mlm(bundle.clone(), &split, &kb, &cfg),
            Err(Error::Config(_))
        ));
        let mut cfg = cfg;
        cfg.skip_warmup_check = true;
        cfg.optim.batch_size = 2;
        cfg.top_k = 2;
        assert!(train_mlm(bundle, &split, &kb, &cfg).is_ok());
    }

    #[test]
    fn forced_freezing_pins_the_generator_bitwise() {
        let (bundle, split, kb) = tiny_bundle(2, 10, 10, 16, 41);
        let mut cfg = TrainConfig::new(Stage::Mlm, 8, 8, 41);
        cfg.freeze_prob = 1.0;
        cfg.skip_warmup_check = true;
        cfg.optim.batch_size = 2;
        cfg.top_k = 2;
        let gen_before = bundle.gen.clone();
        let dlg_before = bundle.dlg.clone();
        let (trained, log) = train_mlm(bundle, &split, &kb, &cfg).unwrap();
        assert!(log.records().iter().all(|r| r.frozen));
        for (name, t) in &gen_before.params {
            assert_eq!(trained.gen.params[name].data(), t.data(), "{name}");
        }
        for (name, t) in &gen_before.m {
            assert_eq!(trained.gen.m[name].data(), t.data(), "{name} moment");
        }
        assert_eq!(trained.gen.step, gen_before.step);
        let moved = dlg_before
            .params
            .iter()
            .any(|(n, t)| trained.dlg.params[n].data() != t.data());
        assert!(moved, "dialogue tower never moved");
    }

    #[test]
    fn unfrozen_steps_do_move_the_generator() {
        let (bundle, split, kb) = tiny_bundle(2, 10, 10, 16, 43);
        let mut cfg = TrainConfig::new(Stage::Mlm, 4, 4, 43);
        cfg.freeze_prob = 0.0;
        cfg.skip_warmup_check = true;
        cfg.optim.batch_size = 2;
        cfg.top_k = 2;
        let gen_before = bundle.gen.clone();
        let (trained, log) = train_mlm(bundle, &split, &kb, &cfg).unwrap();
        assert!(log.records().iter().all(|r| !r.frozen));
        let moved = gen_before
            .params
            .iter()
            .any(|(n, t)| trained.gen.params[n].data() != t.data());
        assert!(moved);
        assert_eq!(trained.gen.step, 4);
    }

    #[test]
    fn identical_seeds_reproduce_checkpoints_bitwise() {
        let run = || {
            let (bundle, split, kb) = tiny_bundle(2, 12, 10, 16, 47);
            let mut cfg = TrainConfig::new(Stage::Ddm, 6, 3, 47);
            cfg.optim.batch_size = 4;
            let (b, _) = train_ddm(bundle, &split, &kb, &cfg).unwrap();
            let mut cfg = TrainConfig::new(Stage::Mlm, 5, 5, 48);
            cfg.optim.batch_size = 2;
            cfg.top_k = 2;
            let (b, _) = train_mlm(b, &split, &kb, &cfg).unwrap();
            let dir = tempfile::tempdir().unwrap();
            b.save(dir.path()).unwrap();
            let mut blobs = Vec::new();
            for f in ["bundle.json", "dlg.ckpt", "doc.ckpt", "gen.ckpt"] {
                blobs.push(std::fs::read(dir.path().join(f)).unwrap());
            }
            blobs
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn task_training_overfits_a_small_train_split() {
        let (split_full, kb) = synth_corpus(2, 10, 8, 53).unwrap();
        let split = CorpusSplit {
            train: split_full.train[..6].to_vec(),
            dev: split_full.train[..6].to_vec(),
            test: vec![],
            held_out_bslots: BTreeSet::new(),
        };
        let (enc, gen) = tiny_shapes(16);
        let bundle =
            ModelBundle::for_corpus(&split, &kb, DatasetKind::Synthetic, enc, gen, 53).unwrap();
        let mut cfg = TrainConfig::new(Stage::Ast, 400, 50, 53);
        cfg.optim.batch_size = 6;
        cfg.optim.learning_rate = 3e-3;
        cfg.top_k = 2;
        let (trained, log) = train_task(bundle, &split, &kb, &cfg).unwrap();
        let best = log
            .records()
            .iter()
            .filter_map(|r| r.bslot_acc)
            .fold(0.0f64, f64::max);
        assert!(best >= 0.95, "best dev b-slot accuracy {best}");
        assert!(trained.trained_stages.contains("AST"));
        assert!(log.records().iter().all(|r| r.stage == "AST"));
    }

    #[test]
    fn baseline_trains_the_generator_alone() {
        let (bundle, split, kb) = tiny_bundle(2, 10, 10, 16, 59);
        let mut cfg = TrainConfig::new(Stage::Ast, 4, 4, 59);
        cfg.optim.batch_size = 4;
        let dlg_before = bundle.dlg.clone();
        let doc_before = bundle.doc.clone();
        let gen_before = bundle.gen.clone();
        let (trained, log) = train_baseline(bundle, &split, &kb, &cfg, InputMode::None).unwrap();
        assert_eq!(log.records().len(), 4);
        for (n, t) in &dlg_before.params {
            assert_eq!(trained.dlg.params[n].data(), t.data());
        }
        for (n, t) in &doc_before.params {
            assert_eq!(trained.doc.params[n].data(), t.data());
        }
        let moved = gen_before
            .params
            .iter()
            .any(|(n, t)| trained.gen.params[n].data() != t.data());
        assert!(moved, "generator never moved");
        assert!(trained.trained_stages.contains("BASELINE-none"));
        assert!(matches!(
            train_baseline(trained, &split, &kb, &cfg, InputMode::Retrieved),
            Err(Error::Config(_))
        ));
    }
}
