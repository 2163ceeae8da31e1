//! Synthetic corpus generation with known ground truth.
//!
//! Every dialogue performs a prefix (length ≥ 2) of exactly one document's
//! b-slot sequence, and that document id is recorded as the intent label.
//! Documents are sampled under a no-containment constraint: the first two
//! b-slots of any document are never jointly contained in another document,
//! so the action-overlap argmax over the knowledge base is always the
//! generating document. Document popularity is long-tailed (weight 1/(i+1)),
//! which skews b-slot frequencies the way real agent workflows are skewed.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::types::{
    Action, CorpusSplit, Dialogue, Document, IntentLabel, KnowledgeBase, Turn,
};
use crate::error::{Error, Result};

const VERBS: [&str; 20] = [
    "verify", "update", "search", "check", "validate", "notify", "offer", "record", "confirm",
    "select", "reset", "apply", "issue", "lookup", "schedule", "cancel", "escalate", "log",
    "review", "enter",
];

const NOUNS: [&str; 20] = [
    "identity", "account", "order", "shipping", "membership", "faq", "balance", "payment",
    "address", "subscription", "refund", "ticket", "policy", "promo", "invoice", "credentials",
    "appointment", "status", "notes", "details",
];

const VALUES: [&str; 12] = [
    "gold",
    "silver",
    "platinum",
    "overnight",
    "standard",
    "express",
    "premium",
    "basic",
    "annual",
    "monthly",
    "jdoe@example.com",
    "msmith@example.com",
];

const MIN_DOC_LEN: usize = 3;
const MAX_DOC_LEN: usize = 5;
const DOC_ATTEMPTS: usize = 10_000;

fn bslot_name(i: usize) -> String {
    let v = i % VERBS.len();
    let n = (i / VERBS.len() + i) % NOUNS.len();
    format!("{}-{}", VERBS[v], NOUNS[n])
}

fn verb_noun(bslot: &str) -> (&str, &str) {
    bslot.split_once('-').expect("synthetic b-slots are verb-noun")
}

/// Long-tailed document choice: weight of document i is 1/(i+1).
fn sample_doc(rng: &mut ChaCha8Rng, n_docs: usize) -> usize {
    let total: f64 = (0..n_docs).map(|i| 1.0 / (i + 1) as f64).sum();
    let mut u = rng.random::<f64>() * total;
    for i in 0..n_docs {
        u -= 1.0 / (i + 1) as f64;
        if u <= 0.0 {
            return i;
        }
    }
    n_docs - 1
}

/// Generate a corpus whose retrieval and action ground truth is known by
/// construction. `seed` fully determines the output.
pub fn synth_corpus(
    n_docs: usize,
    n_dialogues: usize,
    bslot_vocab_size: usize,
    seed: u64,
) -> Result<(CorpusSplit, KnowledgeBase)> {
    if n_docs < 2 {
        return Err(Error::Config(format!("need at least 2 documents, got {n_docs}")));
    }
    if n_dialogues < n_docs {
        return Err(Error::Config(format!(
            "need at least one dialogue per document: {n_dialogues} < {n_docs}"
        )));
    }
    if bslot_vocab_size < MAX_DOC_LEN || bslot_vocab_size > VERBS.len() * NOUNS.len() {
        return Err(Error::Config(format!(
            "b-slot vocab size {bslot_vocab_size} outside supported range {}..={}",
            MAX_DOC_LEN,
            VERBS.len() * NOUNS.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pool: Vec<String> = (0..bslot_vocab_size).map(bslot_name).collect();

    let mut docs: Vec<Document> = Vec::with_capacity(n_docs);
    let mut doc_sets: Vec<BTreeSet<String>> = Vec::with_capacity(n_docs);
    for i in 0..n_docs {
        let mut accepted = None;
        for _ in 0..DOC_ATTEMPTS {
            let len = rng.random_range(MIN_DOC_LEN..=MAX_DOC_LEN);
            let picks = rand::seq::index::sample(&mut rng, bslot_vocab_size, len);
            let bslots: Vec<String> = picks.iter().map(|p| pool[p].clone()).collect();
            let set: BTreeSet<String> = bslots.iter().cloned().collect();
            // The opening pair of any document must identify it uniquely:
            // no other document may contain both of those b-slots.
            let head_free = |head: &[String], other: &BTreeSet<String>| {
                !(other.contains(&head[0]) && other.contains(&head[1]))
            };
            let ok = doc_sets.iter().enumerate().all(|(j, other)| {
                head_free(&bslots[..2], other) && head_free(&docs[j].bslots[..2], &set)
            });
            if ok {
                accepted = Some((bslots, set));
                break;
            }
        }
        let Some((bslots, set)) = accepted else {
            return Err(Error::Config(format!(
                "b-slot vocab of {bslot_vocab_size} too small to build {n_docs} distinct documents"
            )));
        };
        let (v0, n0) = verb_noun(&bslots[0]);
        let (v1, n1) = verb_noun(&bslots[1]);
        docs.push(Document {
            id: format!("doc-{i:02}"),
            intent_text: format!("help the customer {v0} the {n0} and {v1} the {n1}"),
            bslots,
            required_values: vec![],
            optional_values: vec![],
            result_values: vec![],
        });
        doc_sets.push(set);
    }

    let openers = [
        |v: &str, n: &str| format!("hi, i need you to {v} my {n}"),
        |v: &str, n: &str| format!("hello there, could you {v} the {n} for me?"),
        |v: &str, n: &str| format!("hey, i would like some help to {v} my {n}"),
    ];
    let greets = [
        "sure, i can help you with that.",
        "of course, give me one second.",
        "happy to help, let me take a look.",
    ];
    let acks = ["done.", "all set.", "that is taken care of."];
    let value_lines = [
        |v: &str| format!("please use {v}"),
        |v: &str| format!("i would prefer {v}"),
        |v: &str| format!("let us go with {v}"),
    ];

    let mut dialogues = Vec::with_capacity(n_dialogues);
    for idx in 0..n_dialogues {
        // The first n_docs dialogues cover each document once; the rest
        // follow the long-tailed popularity distribution.
        let di = if idx < n_docs { idx } else { sample_doc(&mut rng, n_docs) };
        let doc = &docs[di];
        let prefix_len = rng.random_range(2..=doc.bslots.len());
        let mut turns = Vec::new();
        let (v0, n0) = verb_noun(&doc.bslots[0]);
        turns.push(Turn::Customer {
            text: openers[rng.random_range(0..openers.len())](v0, n0),
        });
        turns.push(Turn::Agent {
            text: greets[rng.random_range(0..greets.len())].to_string(),
        });
        for bslot in &doc.bslots[..prefix_len] {
            let values = if rng.random::<f64>() < 0.35 {
                let v = VALUES[rng.random_range(0..VALUES.len())];
                turns.push(Turn::Customer {
                    text: value_lines[rng.random_range(0..value_lines.len())](v),
                });
                vec![v.to_string()]
            } else {
                vec![]
            };
            turns.push(Turn::Action {
                action: Action::new(bslot.clone(), values).expect("well-formed by construction"),
            });
            if rng.random::<f64>() < 0.4 {
                turns.push(Turn::Agent {
                    text: acks[rng.random_range(0..acks.len())].to_string(),
                });
            }
        }
        if rng.random::<f64>() < 0.3 {
            turns.push(Turn::Customer { text: "thank you".to_string() });
        }
        dialogues.push(Dialogue {
            id: format!("dlg-{idx:04}"),
            turns,
            intent_labels: vec![IntentLabel { turn_index: 0, document_id: doc.id.clone() }],
        });
    }

    let mut order: Vec<usize> = (0..n_dialogues).collect();
    order.shuffle(&mut rng);
    let n_train = n_dialogues * 8 / 10;
    let n_dev = (n_dialogues - n_train) / 2;
    let mut split = CorpusSplit::default();
    let mut slots: Vec<Option<Dialogue>> = dialogues.into_iter().map(Some).collect();
    for (pos, &idx) in order.iter().enumerate() {
        let d = slots[idx].take().expect("each dialogue assigned once");
        if pos < n_train {
            split.train.push(d);
        } else if pos < n_train + n_dev {
            split.dev.push(d);
        } else {
            split.test.push(d);
        }
    }
    let kb = KnowledgeBase::new(docs)?;
    Ok((split, kb))
}
