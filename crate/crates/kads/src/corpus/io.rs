//! Normalized corpus files: one UTF-8 JSON document holding the dataset
//! kind, the document collection, and every dialogue with its split.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::types::{
    normalize_text, Action, CorpusSplit, DatasetKind, Dialogue, Document, IntentLabel,
    KnowledgeBase, Turn,
};
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct RawCorpus {
    dataset: String,
    documents: Vec<Document>,
    dialogues: Vec<RawDialogue>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawDialogue {
    id: String,
    split: String,
    turns: Vec<RawTurn>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    intent_labels: Vec<IntentLabel>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawTurn {
    speaker: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bslot: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    values: Option<Vec<String>>,
}

fn turn_from_raw(dialogue_id: &str, raw: RawTurn) -> Result<Turn> {
    let field_err = |msg: &str| Error::parse(dialogue_id, msg);
    match raw.speaker.as_str() {
        "agent" | "customer" => {
            if raw.bslot.is_some() || raw.values.is_some() {
                return Err(field_err(&format!(
                    "{} turn carries action fields",
                    raw.speaker
                )));
            }
            let text = raw
                .text
                .ok_or_else(|| field_err(&format!("{} turn missing text", raw.speaker)))?;
            let text = normalize_text(&text);
            if raw.speaker == "agent" {
                Ok(Turn::Agent { text })
            } else {
                Ok(Turn::Customer { text })
            }
        }
        "action" => {
            if raw.text.is_some() {
                return Err(field_err("action turn carries text"));
            }
            let bslot = raw
                .bslot
                .ok_or_else(|| field_err("action turn missing bslot"))?;
            let values = raw
                .values
                .unwrap_or_default()
                .iter()
                .map(|v| normalize_text(v))
                .collect();
            let action = Action::new(normalize_text(&bslot), values)
                .map_err(|e| field_err(&e.to_string()))?;
            Ok(Turn::Action { action })
        }
        other => Err(field_err(&format!("unknown speaker {other}"))),
    }
}

fn turn_to_raw(turn: &Turn) -> RawTurn {
    match turn {
        Turn::Agent { text } => RawTurn {
            speaker: "agent".into(),
            text: Some(text.clone()),
            bslot: None,
            values: None,
        },
        Turn::Customer { text } => RawTurn {
            speaker: "customer".into(),
            text: Some(text.clone()),
            bslot: None,
            values: None,
        },
        Turn::Action { action } => RawTurn {
            speaker: "action".into(),
            text: None,
            bslot: Some(action.bslot.clone()),
            values: Some(action.values.clone()),
        },
    }
}

/// Load a normalized corpus file, checking it against the expected dataset
/// kind and every structural invariant. Returns the splits and the
/// knowledge base.
pub fn load_corpus(path: &Path, schema: DatasetKind) -> Result<(CorpusSplit, KnowledgeBase)> {
    let bytes = std::fs::read(path)?;
    let raw: RawCorpus = serde_json::from_slice(&bytes)
        .map_err(|e| Error::parse(&path.display().to_string(), &e.to_string()))?;
    let declared = DatasetKind::parse(&raw.dataset)?;
    if declared != schema {
        return Err(Error::parse(
            "dataset",
            &format!(
                "file declares {} but {} was requested",
                declared.as_str(),
                schema.as_str()
            ),
        ));
    }
    let documents = raw
        .documents
        .into_iter()
        .map(|mut d| {
            d.intent_text = normalize_text(&d.intent_text);
            for list in [
                &mut d.bslots,
                &mut d.required_values,
                &mut d.optional_values,
                &mut d.result_values,
            ] {
                for item in list.iter_mut() {
                    *item = normalize_text(item);
                }
            }
            d
        })
        .collect();
    let kb = KnowledgeBase::new(documents)?;
    let mut split = CorpusSplit::default();
    for rd in raw.dialogues {
        let mut turns = Vec::with_capacity(rd.turns.len());
        for t in rd.turns {
            turns.push(turn_from_raw(&rd.id, t)?);
        }
        let d = Dialogue {
            id: rd.id,
            turns,
            intent_labels: rd.intent_labels,
        };
        d.validate()?;
        for label in &d.intent_labels {
            if kb.index_of(&label.document_id).is_none() {
                return Err(Error::parse(
                    &d.id,
                    &format!("intent label names unknown document {}", label.document_id),
                ));
            }
        }
        match rd.split.as_str() {
            "train" => split.train.push(d),
            "dev" => split.dev.push(d),
            "test" => split.test.push(d),
            other => {
                return Err(Error::parse(&d.id, &format!("unknown split {other}")));
            }
        }
    }
    Ok((split, kb))
}

/// Write a corpus in the normalized JSON form read by [`load_corpus`].
pub fn save_corpus(
    path: &Path,
    kind: DatasetKind,
    split: &CorpusSplit,
    kb: &KnowledgeBase,
) -> Result<()> {
    let mut dialogues = Vec::new();
    for (name, list) in [("train", &split.train), ("dev", &split.dev), ("test", &split.test)] {
        for d in list {
            dialogues.push(RawDialogue {
                id: d.id.clone(),
                split: name.into(),
                turns: d.turns.iter().map(turn_to_raw).collect(),
                intent_labels: d.intent_labels.clone(),
            });
        }
    }
    let raw = RawCorpus {
        dataset: kind.as_str().into(),
        documents: kb.docs().to_vec(),
        dialogues,
    };
    let json = serde_json::to_vec_pretty(&raw)?;
    std::fs::write(path, json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal_json() -> &'static str {
        r#"{
            "dataset": "abcd",
            "documents": [
                {"id": "doc-a", "intent_text": "reset things", "bslots": ["reset"]}
            ],
            "dialogues": [
                {"id": "d1", "split": "train", "turns": [
                    {"speaker": "customer", "text": "hi"},
                    {"speaker": "action", "bslot": "reset", "values": []}
                ], "intent_labels": [{"turn_index": 0, "document_id": "doc-a"}]}
            ]
        }"#
    }

    #[test]
    fn minimal_corpus_loads() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, minimal_json()).unwrap();
        let (split, kb) = load_corpus(&path, DatasetKind::Abcd).unwrap();
        assert_eq!(split.sizes(), (1, 0, 0));
        assert_eq!(kb.len(), 1);
        assert_eq!(split.train[0].actions().count(), 1);
    }

    #[test]
    fn parse_error_names_the_dialogue() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let bad = minimal_json().replace(r#""bslot": "reset", "#, "");
        std::fs::write(&path, bad).unwrap();
        match load_corpus(&path, DatasetKind::Abcd) {
            Err(Error::Parse { context, message }) => {
                assert_eq!(context, "d1");
                assert!(message.contains("bslot"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dataset_kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, minimal_json()).unwrap();
        assert!(load_corpus(&path, DatasetKind::Sgd).is_err());
    }

    #[test]
    fn duplicate_document_id_is_integrity_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        let dup = minimal_json().replace(
            r#"{"id": "doc-a", "intent_text": "reset things", "bslots": ["reset"]}"#,
            r#"{"id": "doc-a", "intent_text": "reset things", "bslots": ["reset"]},
               {"id": "doc-a", "intent_text": "again", "bslots": ["reset"]}"#,
        );
        std::fs::write(&path, dup).unwrap();
        assert!(matches!(
            load_corpus(&path, DatasetKind::Abcd),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn save_then_load_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, minimal_json()).unwrap();
        let (split, kb) = load_corpus(&path, DatasetKind::Abcd).unwrap();
        let path2 = dir.path().join("c2.json");
        save_corpus(&path2, DatasetKind::Abcd, &split, &kb).unwrap();
        let (split2, kb2) = load_corpus(&path2, DatasetKind::Abcd).unwrap();
        assert_eq!(split.train, split2.train);
        assert_eq!(kb.docs(), kb2.docs());
    }
}
