//! Word-level vocabulary shared by the retriever towers and the generator.
//!
//! Tokens come from the train split's serialized dialogues plus the rendering
//! of every knowledge-base document. Folding the documents in matters: action
//! names that never occur in training targets still get real ids, which is
//! what lets the generator copy them out of a retrieved document at test
//! time instead of emitting [UNK].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::corpus::{render_document, serialize_context, ActionStyle, Dialogue, KnowledgeBase, Task};
use crate::error::{Error, Result};
use crate::neural::sha256_hex;

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const MASK: usize = 3;
pub const SEP: usize = 4;
pub const AGENT: usize = 5;
pub const CUSTOMER: usize = 6;
pub const ACTION: usize = 7;
pub const DOC: usize = 8;
pub const UNK: usize = 9;

pub const SPECIAL_TOKENS: [&str; 10] = [
    "[PAD]",
    "[BOS]",
    "[EOS]",
    "[MASK]",
    "[SEP]",
    "[agent]",
    "[customer]",
    "[action]",
    "[DOC]",
    "[UNK]",
];

const SEPARATORS: [char; 3] = [';', ':', ','];

/// Whitespace tokenization that peels separator punctuation (`;` `:` `,`)
/// off word edges into standalone tokens. Interior punctuation stays put,
/// so `3:30` and `1,000` survive a round trip.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let core_start = chunk.len() - chunk.trim_start_matches(SEPARATORS).len();
        let core_end = chunk.trim_end_matches(SEPARATORS).len().max(core_start);
        for ch in chunk[..core_start].chars() {
            out.push(ch.to_string());
        }
        if core_start < core_end {
            out.push(chunk[core_start..core_end].to_string());
        }
        for ch in chunk[core_end..].chars() {
            out.push(ch.to_string());
        }
    }
    out
}

/// Inverse of [`tokenize`] for renderer-produced text: separator tokens
/// reattach to the preceding word with no space.
pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    let mut out = String::new();
    for (i, t) in tokens.iter().enumerate() {
        let t = t.as_ref();
        let attaches = t.len() == 1 && t.starts_with(SEPARATORS);
        if i > 0 && !attaches {
            out.push(' ');
        }
        out.push_str(t);
    }
    out
}

/// Token-id bijection with ten fixed special tokens at ids 0..=9 and the
/// corpus words sorted after them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    id_to_token: Vec<String>,
    token_to_id: BTreeMap<String, usize>,
}

impl Vocab {
    /// Collect the vocabulary from the train dialogues and every document
    /// rendering. Dev and test text contributes nothing; unseen eval words
    /// become [UNK].
    pub fn build(train: &[Dialogue], kb: &KnowledgeBase, style: ActionStyle) -> Result<Vocab> {
        let mut words = BTreeSet::new();
        for d in train {
            let s = serialize_context(d, d.turns.len() - 1, Task::Ast, style)?;
            words.extend(tokenize(&s));
        }
        for doc in kb.docs() {
            words.extend(tokenize(&render_document(doc)));
        }
        for sp in SPECIAL_TOKENS {
            words.remove(sp);
        }
        let mut id_to_token: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(words);
        Ok(Vocab::from_tokens(id_to_token))
    }

    fn from_tokens(id_to_token: Vec<String>) -> Vocab {
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { id_to_token, token_to_id }
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.token_to_id.contains_key(token)
    }

    /// Id for a token, falling back to [UNK] for out-of-vocabulary words.
    pub fn id(&self, token: &str) -> usize {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Result<&str> {
        self.id_to_token
            .get(id)
            .map(|s| s.as_str())
            .ok_or_else(|| Error::Vocab(format!("token id {id} out of range ({})", self.len())))
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        tokenize(text).iter().map(|t| self.id(t)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        let tokens: Vec<&str> = ids
            .iter()
            .map(|&id| self.token(id))
            .collect::<Result<_>>()?;
        Ok(detokenize(&tokens))
    }

    /// Content hash over the ordered token list; two vocabularies agree iff
    /// their hashes do.
    pub fn hash(&self) -> String {
        sha256_hex(self.id_to_token.join("\n").as_bytes())
    }
}

impl TryFrom<Vec<String>> for Vocab {
    type Error = Error;

    fn try_from(id_to_token: Vec<String>) -> Result<Vocab> {
        if id_to_token.len() < SPECIAL_TOKENS.len() {
            return Err(Error::Vocab("vocabulary shorter than the special tokens".into()));
        }
        for (i, sp) in SPECIAL_TOKENS.iter().enumerate() {
            if id_to_token[i] != *sp {
                return Err(Error::Vocab(format!(
                    "special token {sp} missing from id {i}, found {}",
                    id_to_token[i]
                )));
            }
        }
        let distinct: BTreeSet<&String> = id_to_token.iter().collect();
        if distinct.len() != id_to_token.len() {
            return Err(Error::Vocab("duplicate token in vocabulary".into()));
        }
        Ok(Vocab::from_tokens(id_to_token))
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Vec<String> {
        v.id_to_token
    }
}
