//! Document labeling for retriever warm-up and the action holdout used to
//! measure out-of-distribution generalization.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::types::{CorpusSplit, Dialogue, KnowledgeBase};
use crate::error::{Error, Result};

/// The document a dialogue should retrieve. A ground-truth intent label
/// wins outright; otherwise the document sharing the most b-slots with the
/// dialogue's actions is chosen, ties going to the lowest document index.
pub fn overlap_label(d: &Dialogue, kb: &KnowledgeBase) -> Result<String> {
    if d.intent_labels.is_empty() {
        action_overlap_label(d, kb)
    } else {
        intent_label(d, kb)
    }
}

/// The document sharing the most action b-slots with the dialogue,
/// ignoring any intent annotation. Ties go to the lowest document index.
pub fn action_overlap_label(d: &Dialogue, kb: &KnowledgeBase) -> Result<String> {
    if kb.is_empty() {
        return Err(Error::Input("knowledge base is empty".into()));
    }
    let bslots = d.bslot_set();
    if bslots.is_empty() {
        return Err(Error::Label(format!("dialogue {} has no actions", d.id)));
    }
    let mut best = 0usize;
    let mut best_overlap = usize::MIN;
    for (i, doc) in kb.docs().iter().enumerate() {
        let overlap = doc
            .bslots
            .iter()
            .filter(|b| bslots.contains(b.as_str()))
            .count();
        if i == 0 || overlap > best_overlap {
            best = i;
            best_overlap = overlap;
        }
    }
    Ok(kb.get(best).id.clone())
}

/// The document named by the dialogue's intent annotation; absence is a
/// label error.
pub fn intent_label(d: &Dialogue, kb: &KnowledgeBase) -> Result<String> {
    let Some(label) = d.intent_labels.first() else {
        return Err(Error::Label(format!(
            "dialogue {} carries no intent label",
            d.id
        )));
    };
    if kb.index_of(&label.document_id).is_none() {
        return Err(Error::Label(format!(
            "dialogue {} labels unknown document {}",
            d.id, label.document_id
        )));
    }
    Ok(label.document_id.clone())
}

/// Hold out a seeded fraction of the distinct b-slots and drop every train
/// dialogue that uses one, so held-out actions are never a training target.
/// Dev and test are untouched.
pub fn holdout_split(split: CorpusSplit, fraction: f64, seed: u64) -> Result<CorpusSplit> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "holdout fraction must be in (0, 1), got {fraction}"
        )));
    }
    let all: BTreeSet<String> = split
        .all_dialogues()
        .flat_map(|d| d.actions().map(|a| a.bslot.clone()))
        .collect();
    if all.len() < 2 {
        return Err(Error::Config(format!(
            "holdout needs at least 2 distinct b-slots, found {}",
            all.len()
        )));
    }
    let ordered: Vec<&String> = all.iter().collect();
    let n_held = (fraction * ordered.len() as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let held: BTreeSet<String> = rand::seq::index::sample(&mut rng, ordered.len(), n_held)
        .iter()
        .map(|i| ordered[i].clone())
        .collect();
    let train: Vec<Dialogue> = split
        .train
        .into_iter()
        .filter(|d| d.actions().all(|a| !held.contains(&a.bslot)))
        .collect();
    if train.is_empty() {
        eprintln!(
            "warning: holdout of {n_held} b-slots removed every train dialogue"
        );
    }
    Ok(CorpusSplit {
        train,
        dev: split.dev,
        test: split.test,
        held_out_bslots: held,
    })
}
