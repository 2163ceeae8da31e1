//! Core data model: actions, turns, dialogues, documents, splits.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A single agent action: the button slot that was pressed plus the ordered
/// values entered with it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Action {
    pub bslot: String,
    pub values: Vec<String>,
}

impl Action {
    pub fn new(bslot: impl Into<String>, values: Vec<String>) -> Result<Self> {
        let bslot = bslot.into();
        if bslot.trim().is_empty() {
            return Err(Error::Input("action b-slot is empty".into()));
        }
        if values.iter().any(|v| v.trim().is_empty()) {
            return Err(Error::Input(format!(
                "action {bslot} carries an empty value"
            )));
        }
        Ok(Action { bslot, values })
    }
}

/// One dialogue turn. The variant encodes who produced it and what it can
/// carry: utterance text for people, an action for the system trace.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Turn {
    Agent { text: String },
    Customer { text: String },
    Action { action: Action },
}

impl Turn {
    pub fn action(&self) -> Option<&Action> {
        match self {
            Turn::Action { action } => Some(action),
            _ => None,
        }
    }

    pub fn is_action(&self) -> bool {
        matches!(self, Turn::Action { .. })
    }
}

/// Ground-truth intent annotation: from `turn_index` onward the dialogue
/// pursues the intent documented by `document_id`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IntentLabel {
    pub turn_index: usize,
    pub document_id: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub id: String,
    pub turns: Vec<Turn>,
    pub intent_labels: Vec<IntentLabel>,
}

impl Dialogue {
    pub fn validate(&self) -> Result<()> {
        if self.turns.is_empty() {
            return Err(Error::parse(&self.id, "dialogue has no turns"));
        }
        let mut prev: Option<usize> = None;
        for label in &self.intent_labels {
            if label.turn_index >= self.turns.len() {
                return Err(Error::parse(
                    &self.id,
                    &format!("intent label turn_index {} out of range", label.turn_index),
                ));
            }
            if let Some(p) = prev {
                if label.turn_index <= p {
                    return Err(Error::parse(
                        &self.id,
                        "intent label turn indices are not strictly increasing",
                    ));
                }
            }
            prev = Some(label.turn_index);
        }
        Ok(())
    }

    pub fn actions(&self) -> impl Iterator<Item = &Action> {
        self.turns.iter().filter_map(Turn::action)
    }

    /// Distinct b-slots used by this dialogue's action turns.
    pub fn bslot_set(&self) -> BTreeSet<&str> {
        self.actions().map(|a| a.bslot.as_str()).collect()
    }
}

/// A procedural instruction record: what customer inquiry it answers and
/// which actions resolve it, either as an ordered b-slot sequence or as an
/// SGD-style slot schema.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub id: String,
    pub intent_text: String,
    #[serde(default)]
    pub bslots: Vec<String>,
    #[serde(default)]
    pub required_values: Vec<String>,
    #[serde(default)]
    pub optional_values: Vec<String>,
    #[serde(default)]
    pub result_values: Vec<String>,
}

impl Document {
    pub fn validate(&self) -> Result<()> {
        if self.bslots.is_empty() && self.result_values.is_empty() {
            return Err(Error::parse(
                &self.id,
                "document has neither b-slots nor result values",
            ));
        }
        Ok(())
    }
}

/// The closed document collection scored by the retriever. Order is stable
/// and defines the softmax index order.
#[derive(Debug, Clone, Default)]
pub struct KnowledgeBase {
    documents: Vec<Document>,
    index: BTreeMap<String, usize>,
}

impl KnowledgeBase {
    pub fn new(documents: Vec<Document>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, doc) in documents.iter().enumerate() {
            doc.validate()?;
            if index.insert(doc.id.clone(), i).is_some() {
                return Err(Error::Integrity(format!(
                    "duplicate document id: {}",
                    doc.id
                )));
            }
        }
        Ok(KnowledgeBase { documents, index })
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    pub fn docs(&self) -> &[Document] {
        &self.documents
    }

    pub fn get(&self, idx: usize) -> &Document {
        &self.documents[idx]
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn by_id(&self, id: &str) -> Option<&Document> {
        self.index_of(id).map(|i| &self.documents[i])
    }
}

#[derive(Debug, Clone, Default)]
pub struct CorpusSplit {
    pub train: Vec<Dialogue>,
    pub dev: Vec<Dialogue>,
    pub test: Vec<Dialogue>,
    pub held_out_bslots: BTreeSet<String>,
}

impl CorpusSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train.len(), self.dev.len(), self.test.len())
    }

    pub fn all_dialogues(&self) -> impl Iterator<Item = &Dialogue> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

/// How actions are rendered as text: `b: v1, v2` or space-joined `b v`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActionStyle {
    Colon,
    Space,
}

/// Which normalized corpus family a file claims to be.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Abcd,
    Sgd,
    Synthetic,
}

impl DatasetKind {
    pub fn action_style(self) -> ActionStyle {
        match self {
            DatasetKind::Abcd | DatasetKind::Synthetic => ActionStyle::Colon,
            DatasetKind::Sgd => ActionStyle::Space,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DatasetKind::Abcd => "abcd",
            DatasetKind::Sgd => "sgd",
            DatasetKind::Synthetic => "synthetic",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "abcd" => Ok(DatasetKind::Abcd),
            "sgd" => Ok(DatasetKind::Sgd),
            "synthetic" => Ok(DatasetKind::Synthetic),
            other => Err(Error::parse("dataset", &format!("unknown kind {other}"))),
        }
    }
}

/// Lowercase and collapse runs of whitespace. Punctuation stays attached to
/// its word.
pub fn normalize_text(s: &str) -> String {
    s.to_lowercase().split_whitespace().collect::<Vec<_>>().join(" ")
}
