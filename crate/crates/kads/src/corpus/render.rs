//! Text rendering: dialogue serialization with prefix tokens, document
//! rendering, and the action-target format with its parser.

use crate::corpus::types::{Action, ActionStyle, Dialogue, Document, Turn};
use crate::error::{Error, Result};

/// Which task a serialized context feeds. AST keeps every turn category;
/// WD keeps only the spoken turns so the actions stay unobserved.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Task {
    Ast,
    Wd,
}

pub const PREFIX_AGENT: &str = "[agent]";
pub const PREFIX_CUSTOMER: &str = "[customer]";
pub const PREFIX_ACTION: &str = "[action]";

/// Render one action list as a target string. Actions are joined by "; ".
/// Colon style writes `b: v1, v2` (bare `b` without values); space style
/// writes one `b v` segment per value.
pub fn render_action_target(actions: &[Action], style: ActionStyle) -> String {
    let mut segments = Vec::new();
    for a in actions {
        match style {
            ActionStyle::Colon => {
                if a.values.is_empty() {
                    segments.push(a.bslot.clone());
                } else {
                    segments.push(format!("{}: {}", a.bslot, a.values.join(", ")));
                }
            }
            ActionStyle::Space => {
                if a.values.is_empty() {
                    segments.push(a.bslot.clone());
                } else {
                    for v in &a.values {
                        segments.push(format!("{} {}", a.bslot, v));
                    }
                }
            }
        }
    }
    segments.join("; ")
}

/// Parse a rendered target back into actions. Inverse of
/// [`render_action_target`] on well-formed strings; anything else is an
/// error so that malformed model output can be scored as wrong.
pub fn parse_action_target(s: &str, style: ActionStyle) -> Result<Vec<Action>> {
    let s = s.trim();
    if s.is_empty() {
        return Ok(Vec::new());
    }
    let mut actions = Vec::new();
    for segment in s.split(';') {
        let segment = segment.trim();
        if segment.is_empty() {
            return Err(Error::parse("action target", "empty action segment"));
        }
        match style {
            ActionStyle::Colon => {
                if let Some((b, vals)) = segment.split_once(':') {
                    let values: Vec<String> = vals
                        .split(',')
                        .map(|v| v.trim().to_string())
                        .collect();
                    if values.iter().any(String::is_empty) {
                        return Err(Error::parse("action target", "empty value"));
                    }
                    actions.push(Action::new(b.trim(), values)?);
                } else {
                    actions.push(Action::new(segment, vec![])?);
                }
            }
            ActionStyle::Space => {
                let mut parts = segment.split_whitespace();
                let b = parts.next().expect("segment is non-empty");
                let rest: Vec<&str> = parts.collect();
                let values = if rest.is_empty() {
                    vec![]
                } else {
                    vec![rest.join(" ")]
                };
                actions.push(Action::new(b, values)?);
            }
        }
    }
    Ok(actions)
}

/// Render a document for the retriever and the generator input. Documents
/// with an ordered b-slot sequence use `intent [SEP] b1; b2; ...`; schema
/// documents list their slot sections instead.
pub fn render_document(doc: &Document) -> String {
    if !doc.bslots.is_empty() {
        return format!("{} [SEP] {}", doc.intent_text, doc.bslots.join("; "));
    }
    let mut out = format!("{} [SEP]", doc.intent_text);
    for (tag, vals) in [
        ("[required]", &doc.required_values),
        ("[optional]", &doc.optional_values),
        ("[result]", &doc.result_values),
    ] {
        if !vals.is_empty() {
            out.push(' ');
            out.push_str(tag);
            out.push(' ');
            out.push_str(&vals.join("; "));
        }
    }
    out
}

/// Serialize the dialogue up to and including `upto_turn` as
/// `p_0 x_0 p_1 x_1 ...` with [agent]/[customer]/[action] prefixes. WD mode
/// drops action turns entirely.
pub fn serialize_context(
    d: &Dialogue,
    upto_turn: usize,
    task: Task,
    style: ActionStyle,
) -> Result<String> {
    if upto_turn >= d.turns.len() {
        return Err(Error::Bounds(format!(
            "turn {upto_turn} out of range for dialogue {} with {} turns",
            d.id,
            d.turns.len()
        )));
    }
    let mut parts = Vec::new();
    for turn in &d.turns[..=upto_turn] {
        match turn {
            Turn::Agent { text } => {
                parts.push(format!("{PREFIX_AGENT} {text}"));
            }
            Turn::Customer { text } => {
                parts.push(format!("{PREFIX_CUSTOMER} {text}"));
            }
            Turn::Action { action } => {
                if task == Task::Ast {
                    let rendered =
                        render_action_target(std::slice::from_ref(action), style);
                    parts.push(format!("{PREFIX_ACTION} {rendered}"));
                }
            }
        }
    }
    Ok(parts.join(" "))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn act(b: &str, values: &[&str]) -> Action {
        Action::new(b, values.iter().map(|v| v.to_string()).collect()).unwrap()
    }

    #[test]
    fn colon_style_matches_format() {
        assert_eq!(render_action_target(&[act("search shirt", &[])], ActionStyle::Colon), "search shirt");
        assert_eq!(
            render_action_target(&[act("pull up account", &["johndoe@gmail.com"])], ActionStyle::Colon),
            "pull up account: johndoe@gmail.com"
        );
        assert_eq!(
            render_action_target(&[act("verify", &["a", "b"]), act("update", &[])], ActionStyle::Colon),
            "verify: a, b; update"
        );
    }

    #[test]
    fn space_style_emits_one_segment_per_value() {
        assert_eq!(
            render_action_target(
                &[act("offer", &["temperature"]), act("offer", &["precipitation"])],
                ActionStyle::Space
            ),
            "offer temperature; offer precipitation"
        );
    }

    #[test]
    fn colon_round_trip() {
        let actions = vec![
            act("pull up account", &["johndoe@gmail.com"]),
            act("verify identity", &["gold", "standard"]),
            act("search faq", &[]),
        ];
        let s = render_action_target(&actions, ActionStyle::Colon);
        assert_eq!(parse_action_target(&s, ActionStyle::Colon).unwrap(), actions);
    }

    #[test]
    fn parse_rejects_dangling_separator() {
        assert!(parse_action_target("a; ", ActionStyle::Colon).is_err());
        assert!(parse_action_target("b: ", ActionStyle::Colon).is_err());
    }

    #[test]
    fn single_bslot_document_renders_flat() {
        let doc = Document {
            id: "d".into(),
            intent_text: "intent".into(),
            bslots: vec!["reset".into()],
            required_values: vec![],
            optional_values: vec![],
            result_values: vec![],
        };
        assert_eq!(render_document(&doc), "intent [SEP] reset");
    }

    #[test]
    fn schema_document_lists_sections() {
        let doc = Document {
            id: "d".into(),
            intent_text: "get the weather of a certain location on a date".into(),
            bslots: vec![],
            required_values: vec!["city".into()],
            optional_values: vec!["date".into()],
            result_values: ["precipitation", "humidity", "wind", "temperature", "city", "date"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        };
        assert_eq!(
            render_document(&doc),
            "get the weather of a certain location on a date [SEP] [required] city [optional] date [result] precipitation; humidity; wind; temperature; city; date"
        );
    }

    #[test]
    fn single_customer_turn_serializes_with_prefix() {
        let d = Dialogue {
            id: "d".into(),
            turns: vec![Turn::Customer { text: "hi".into() }],
            intent_labels: vec![],
        };
        assert_eq!(
            serialize_context(&d, 0, Task::Ast, ActionStyle::Colon).unwrap(),
            "[customer] hi"
        );
    }

    #[test]
    fn wd_serialization_drops_action_turns() {
        let d = Dialogue {
            id: "d".into(),
            turns: vec![
                Turn::Customer { text: "hi".into() },
                Turn::Action { action: act("reset", &[]) },
                Turn::Agent { text: "done".into() },
            ],
            intent_labels: vec![],
        };
        let s = serialize_context(&d, 2, Task::Wd, ActionStyle::Colon).unwrap();
        assert_eq!(s, "[customer] hi [agent] done");
        assert!(!s.contains("[action]"));
    }

    #[test]
    fn out_of_range_turn_is_a_bounds_error() {
        let d = Dialogue {
            id: "d".into(),
            turns: vec![Turn::Customer { text: "hi".into() }],
            intent_labels: vec![],
        };
        assert!(matches!(
            serialize_context(&d, 1, Task::Ast, ActionStyle::Colon),
            Err(Error::Bounds(_))
        ));
    }

    #[test]
    fn ast_serialization_is_prefix_stable() {
        let d = Dialogue {
            id: "d".into(),
            turns: vec![
                Turn::Customer { text: "hi there".into() },
                Turn::Agent { text: "hello".into() },
                Turn::Action { action: act("verify identity", &["gold"]) },
            ],
            intent_labels: vec![],
        };
        let mut prev = String::new();
        for t in 0..d.turns.len() {
            let s = serialize_context(&d, t, Task::Ast, ActionStyle::Colon).unwrap();
            assert!(s.starts_with(&prev));
            prev = s;
        }
    }
}
