//! Data model, corpus ingestion, serialization, labeling, masking, and the
//! synthetic corpus generator.

pub mod examples;
pub mod io;
pub mod label;
pub mod render;
pub mod synth;
pub mod types;

pub use examples::{make_ast_examples, make_wd_example, mask_actions, MASK_TOKEN};
pub use io::{load_corpus, save_corpus};
pub use label::{action_overlap_label, holdout_split, intent_label, overlap_label};
pub use render::{
    parse_action_target, render_action_target, render_document, serialize_context, Task,
    PREFIX_ACTION, PREFIX_AGENT, PREFIX_CUSTOMER,
};
pub use synth::synth_corpus;
pub use types::{
    normalize_text, Action, ActionStyle, CorpusSplit, DatasetKind, Dialogue, Document,
    IntentLabel, KnowledgeBase, Turn,
};
