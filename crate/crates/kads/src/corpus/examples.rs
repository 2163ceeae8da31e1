//! Turning dialogues into training examples: next-action prediction pairs,
//! whole-workflow recovery pairs, and masked-action reconstruction pairs.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::corpus::render::{
    render_action_target, serialize_context, Task, PREFIX_ACTION, PREFIX_AGENT, PREFIX_CUSTOMER,
};
use crate::corpus::types::{ActionStyle, Dialogue, Turn};
use crate::error::{Error, Result};

pub const MASK_TOKEN: &str = "[MASK]";

/// One next-action example per action turn: the context is everything
/// strictly before the turn (empty when the dialogue opens with an action)
/// and the target is that turn's action alone.
pub fn make_ast_examples(d: &Dialogue, style: ActionStyle) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, turn) in d.turns.iter().enumerate() {
        if let Turn::Action { action } = turn {
            let input = if i == 0 {
                String::new()
            } else {
                serialize_context(d, i - 1, Task::Ast, style)?
            };
            let target = render_action_target(std::slice::from_ref(action), style);
            out.push((input, target));
        }
    }
    Ok(out)
}

/// The workflow-discovery example: spoken turns in, the full ordered action
/// sequence out.
pub fn make_wd_example(d: &Dialogue, style: ActionStyle) -> Result<(String, String)> {
    let input = serialize_context(d, d.turns.len() - 1, Task::Wd, style)?;
    let actions: Vec<_> = d.actions().cloned().collect();
    let target = render_action_target(&actions, style);
    Ok((input, target))
}

/// Masked-action reconstruction: each action turn is independently replaced
/// by a single [MASK] with probability `mask_rate` (redrawn until at least
/// one turn is masked), and the target lists the masked actions in order.
pub fn mask_actions(
    d: &Dialogue,
    mask_rate: f64,
    rng: &mut ChaCha8Rng,
    style: ActionStyle,
) -> Result<(String, String)> {
    if !(mask_rate > 0.0 && mask_rate <= 1.0) {
        return Err(Error::Config(format!(
            "mask_rate must be in (0, 1], got {mask_rate}"
        )));
    }
    let n_actions = d.turns.iter().filter(|t| t.is_action()).count();
    if n_actions == 0 {
        return Err(Error::Skip(format!("dialogue {} has no action turns", d.id)));
    }
    let mut masked = vec![false; n_actions];
    loop {
        for m in masked.iter_mut() {
            *m = rng.random::<f64>() < mask_rate;
        }
        if masked.iter().any(|&m| m) {
            break;
        }
    }
    let mut parts = Vec::new();
    let mut targets = Vec::new();
    let mut action_idx = 0;
    for turn in &d.turns {
        match turn {
            Turn::Agent { text } => parts.push(format!("{PREFIX_AGENT} {text}")),
            Turn::Customer { text } => parts.push(format!("{PREFIX_CUSTOMER} {text}")),
            Turn::Action { action } => {
                if masked[action_idx] {
                    parts.push(format!("{PREFIX_ACTION} {MASK_TOKEN}"));
                    targets.push(action.clone());
                } else {
                    let rendered = render_action_target(std::slice::from_ref(action), style);
                    parts.push(format!("{PREFIX_ACTION} {rendered}"));
                }
                action_idx += 1;
            }
        }
    }
    Ok((parts.join(" "), render_action_target(&targets, style)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::types::Action;
    use rand::SeedableRng;

    fn act(b: &str) -> Turn {
        Turn::Action {
            action: Action::new(b, vec![]).unwrap(),
        }
    }

    fn dialogue(turns: Vec<Turn>) -> Dialogue {
        Dialogue {
            id: "d".into(),
            turns,
            intent_labels: vec![],
        }
    }

    #[test]
    fn one_example_per_action_turn() {
        let d = dialogue(vec![
            Turn::Customer { text: "hi".into() },
            act("check-balance"),
            Turn::Agent { text: "ok".into() },
            act("notify-customer"),
        ]);
        let ex = make_ast_examples(&d, ActionStyle::Colon).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(ex[0], ("[customer] hi".into(), "check-balance".into()));
        assert_eq!(
            ex[1].0,
            "[customer] hi [action] check-balance [agent] ok"
        );
        assert_eq!(ex[1].1, "notify-customer");
    }

    #[test]
    fn leading_action_turn_gets_empty_context() {
        let d = dialogue(vec![act("reset-password"), Turn::Agent { text: "done".into() }]);
        let ex = make_ast_examples(&d, ActionStyle::Colon).unwrap();
        assert_eq!(ex[0], (String::new(), "reset-password".into()));
    }

    #[test]
    fn no_action_turns_yield_no_ast_examples() {
        let d = dialogue(vec![Turn::Customer { text: "hi".into() }]);
        assert!(make_ast_examples(&d, ActionStyle::Colon).unwrap().is_empty());
    }

    #[test]
    fn wd_target_lists_actions_in_order() {
        let d = dialogue(vec![
            Turn::Customer { text: "hi".into() },
            act("a-one"),
            act("b-two"),
            Turn::Agent { text: "bye".into() },
            act("c-three"),
        ]);
        let (input, target) = make_wd_example(&d, ActionStyle::Colon).unwrap();
        assert_eq!(input, "[customer] hi [agent] bye");
        assert_eq!(target, "a-one; b-two; c-three");
    }

    #[test]
    fn wd_of_actionless_dialogue_has_empty_target() {
        let d = dialogue(vec![Turn::Customer { text: "hi".into() }]);
        let (_, target) = make_wd_example(&d, ActionStyle::Colon).unwrap();
        assert_eq!(target, "");
    }

    #[test]
    fn full_mask_rate_masks_every_action() {
        let d = dialogue(vec![
            Turn::Customer { text: "hi".into() },
            act("a-one"),
            act("b-two"),
        ]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (input, target) = mask_actions(&d, 1.0, &mut rng, ActionStyle::Colon).unwrap();
        assert_eq!(input.matches(MASK_TOKEN).count(), 2);
        assert!(!input.contains("a-one"));
        assert_eq!(target, "a-one; b-two");
    }

    #[test]
    fn at_least_one_action_is_always_masked() {
        let d = dialogue(vec![act("a-one"), act("b-two"), act("c-three")]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let (input, target) = mask_actions(&d, 0.05, &mut rng, ActionStyle::Colon).unwrap();
            assert!(input.contains(MASK_TOKEN));
            assert!(!target.is_empty());
        }
    }

    #[test]
    fn masked_fraction_tracks_the_rate() {
        let d = dialogue((0..10).map(|i| act(&format!("slot-{i}"))).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut masked = 0usize;
        let total = 1000usize;
        for _ in 0..total / 10 {
            let (input, _) = mask_actions(&d, 0.5, &mut rng, ActionStyle::Colon).unwrap();
            masked += input.matches(MASK_TOKEN).count();
        }
        let frac = masked as f64 / total as f64;
        assert!((0.45..=0.55).contains(&frac), "masked fraction {frac}");
    }

    #[test]
    fn actionless_dialogue_is_skipped() {
        let d = dialogue(vec![Turn::Customer { text: "hi".into() }]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            mask_actions(&d, 0.5, &mut rng, ActionStyle::Colon),
            Err(Error::Skip(_))
        ));
    }
}
