//! Conditional action-sequence generator p(y|X,z): conditioned-input
//! assembly, teacher-forced log-likelihood, and decoding.

pub mod vocab;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{render_document, Document, KnowledgeBase};
use crate::error::{Error, Result};
use crate::neural::{
    generator_decode, generator_encode, Decode, GenModelConfig, Graph, NodeId, ParamStore,
};
use crate::retriever::{top_k_retrieve, DocEmbeddingCache, RetrievalDistribution};
use crate::training::ModelBundle;
pub use vocab::{
    detokenize, tokenize, Vocab, ACTION, AGENT, BOS, CUSTOMER, DOC, EOS, MASK, PAD, SEP,
    SPECIAL_TOKENS, UNK,
};

/// How the dialogue context is combined with document knowledge before it
/// reaches the generator. `Retrieved` is the full system; the other two are
/// the baseline conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputMode {
    Retrieved,
    None,
    StaticGuide,
}

impl InputMode {
    pub fn as_str(self) -> &'static str {
        match self {
            InputMode::Retrieved => "retrieved",
            InputMode::None => "none",
            InputMode::StaticGuide => "static_guide",
        }
    }
}

/// Assemble the generator's input token sequence.
///
/// `retrieved` yields "[DOC] <document> [SEP] <X>", `none` yields the bare
/// context, and `static_guide` yields "<X> [SEP]" followed by every document
/// rendering in knowledge-base order. The first two modes drop the oldest
/// context tokens when the result would overflow `max_input_len`; the static
/// guide must fit whole or it is a length error, since truncating it would
/// silently delete documents.
pub fn build_conditioned_input(
    x: &str,
    z: Option<&Document>,
    mode: InputMode,
    kb: &KnowledgeBase,
    vocab: &Vocab,
    max_input_len: usize,
) -> Result<Vec<usize>> {
    let x_ids = vocab.encode(x);
    match mode {
        InputMode::Retrieved => {
            let z = z.ok_or_else(|| {
                Error::Input("retrieved mode needs a document to condition on".into())
            })?;
            let mut ids = vec![DOC];
            ids.extend(vocab.encode(&render_document(z)));
            ids.push(SEP);
            if ids.len() >= max_input_len {
                return Err(Error::Length(format!(
                    "document rendering alone fills the {max_input_len}-token input window"
                )));
            }
            let room = max_input_len - ids.len();
            ids.extend(tail(&x_ids, room));
            Ok(ids)
        }
        InputMode::None => Ok(tail(&x_ids, max_input_len).to_vec()),
        InputMode::StaticGuide => {
            let mut ids = x_ids;
            ids.push(SEP);
            for doc in kb.docs() {
                ids.extend(vocab.encode(&render_document(doc)));
            }
            if ids.len() > max_input_len {
                return Err(Error::Length(format!(
                    "static guide input of {} tokens exceeds max_input_len {max_input_len}",
                    ids.len()
                )));
            }
            Ok(ids)
        }
    }
}

fn tail(ids: &[usize], n: usize) -> &[usize] {
    if ids.len() <= n {
        ids
    } else {
        &ids[ids.len() - n..]
    }
}

fn check_ids(ids: &[usize], vocab_size: usize, what: &str) -> Result<()> {
    for &id in ids {
        if id >= vocab_size {
            return Err(Error::Vocab(format!(
                "{what} token id {id} outside vocabulary of {vocab_size}"
            )));
        }
    }
    Ok(())
}

/// Graph node holding log p(target | input) under teacher forcing, shape
/// [1,1]. Gradients flow into the generator parameters only.
pub fn cond_loglik_node(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &GenModelConfig,
    input_ids: &[usize],
    target_ids: &[usize],
) -> Result<NodeId> {
    check_ids(input_ids, cfg.vocab, "input")?;
    check_ids(target_ids, cfg.vocab, "target")?;
    if target_ids.last() != Some(&EOS) {
        return Err(Error::Input("target sequence must end with [EOS]".into()));
    }
    if target_ids.len() > cfg.max_target {
        return Err(Error::Length(format!(
            "target of {} tokens exceeds max_target_len {}",
            target_ids.len(),
            cfg.max_target
        )));
    }
    let memory = generator_encode(g, store, cfg, input_ids)?;
    let mut prefix = Vec::with_capacity(target_ids.len());
    prefix.push(BOS);
    prefix.extend_from_slice(&target_ids[..target_ids.len() - 1]);
    let logits = generator_decode(g, store, cfg, memory, &prefix)?;
    let nll = g.cross_entropy(logits, target_ids)?;
    Ok(g.scale(nll, -1.0))
}

/// Eager log p(target | input); always ≤ 0.
pub fn cond_loglik(
    store: &ParamStore,
    cfg: &GenModelConfig,
    input_ids: &[usize],
    target_ids: &[usize],
) -> Result<f64> {
    let mut g = Graph::new();
    let node = cond_loglik_node(&mut g, store, cfg, input_ids, target_ids)?;
    Ok(g.value(node)[0])
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
    row.iter().map(|v| v - lse).collect()
}

/// Decode an output sequence for the given conditioned input, stopping at
/// [EOS] or `max_target_len` tokens. The returned sequence keeps the final
/// [EOS] when one was emitted. Deterministic for both decode strategies.
pub fn generate(
    store: &ParamStore,
    cfg: &GenModelConfig,
    input_ids: &[usize],
) -> Result<Vec<usize>> {
    check_ids(input_ids, cfg.vocab, "input")?;
    match cfg.decode {
        Decode::Greedy => decode_greedy(store, cfg, input_ids),
        Decode::Beam(width) => decode_beam(store, cfg, input_ids, width),
    }
}

fn decode_greedy(
    store: &ParamStore,
    cfg: &GenModelConfig,
    input_ids: &[usize],
) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let memory = generator_encode(&mut g, store, cfg, input_ids)?;
    let mut prefix = vec![BOS];
    let mut out = Vec::new();
    for _ in 0..cfg.max_target {
        let logits = generator_decode(&mut g, store, cfg, memory, &prefix)?;
        let vals = g.value(logits);
        let row = &vals[vals.len() - cfg.vocab..];
        let next = argmax(row);
        out.push(next);
        if next == EOS {
            break;
        }
        prefix.push(next);
    }
    Ok(out)
}

#[derive(Clone)]
struct Beam {
    tokens: Vec<usize>,
    logp: f64,
    done: bool,
}

fn decode_beam(
    store: &ParamStore,
    cfg: &GenModelConfig,
    input_ids: &[usize],
    width: usize,
) -> Result<Vec<usize>> {
    let mut g = Graph::new();
    let memory = generator_encode(&mut g, store, cfg, input_ids)?;
    let mut beams = vec![Beam { tokens: vec![], logp: 0.0, done: false }];
    for _ in 0..cfg.max_target {
        if beams.iter().all(|b| b.done) {
            break;
        }
        let mut candidates = Vec::new();
        for beam in &beams {
            if beam.done {
                candidates.push(beam.clone());
                continue;
            }
            let mut prefix = Vec::with_capacity(beam.tokens.len() + 1);
            prefix.push(BOS);
            prefix.extend_from_slice(&beam.tokens);
            let logits = generator_decode(&mut g, store, cfg, memory, &prefix)?;
            let vals = g.value(logits);
            let logp_row = log_softmax_row(&vals[vals.len() - cfg.vocab..]);
            for (tok, lp) in logp_row.iter().enumerate() {
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                candidates.push(Beam {
                    tokens,
                    logp: beam.logp + lp,
                    done: tok == EOS,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.logp
                .partial_cmp(&a.logp)
                .expect("log probabilities are finite")
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(width);
        beams = candidates;
    }
    let mut best = beams
        .into_iter()
        .max_by(|a, b| a.logp.partial_cmp(&b.logp).unwrap().then_with(|| b.tokens.cmp(&a.tokens)))
        .expect("at least one beam");
    if !best.done && best.tokens.len() >= cfg.max_target {
        best.tokens.truncate(cfg.max_target);
    }
    Ok(best.tokens)
}

/// Strip one trailing [EOS] so a decoded sequence can be detokenized into
/// an action string.
pub fn strip_eos(ids: &[usize]) -> &[usize] {
    match ids.last() {
        Some(&EOS) => &ids[..ids.len() - 1],
        _ => ids,
    }
}

/// Predict an action string by decoding one candidate per retained document
/// and keeping the candidate with the highest marginal probability
/// Σ p(y|X,z)·p̂(z|X) over the same retained set. Ties go to the
/// lexicographically smaller token sequence. `k` is clamped to the size of
/// the knowledge base.
pub fn marginal_predict_cached(
    bundle: &ModelBundle,
    x: &str,
    kb: &KnowledgeBase,
    doc_tokens: &[Vec<usize>],
    cache: &mut DocEmbeddingCache,
    k: usize,
) -> Result<(String, RetrievalDistribution)> {
    if kb.is_empty() {
        return Err(Error::Input("knowledge base is empty".into()));
    }
    if k == 0 {
        return Err(Error::Config("prediction needs k of at least 1".into()));
    }
    let k = k.min(kb.len());
    let x_ids = bundle.vocab.encode(x);
    let dist = top_k_retrieve(
        &bundle.dlg,
        &bundle.doc,
        &bundle.enc_cfg,
        &x_ids,
        kb,
        doc_tokens,
        k,
        Some(cache),
    )?;
    let mut inputs = Vec::with_capacity(k);
    let mut candidates: BTreeSet<Vec<usize>> = BTreeSet::new();
    for doc_id in &dist.doc_ids {
        let doc = kb.by_id(doc_id).expect("retrieved ids come from the kb");
        let input = build_conditioned_input(
            x,
            Some(doc),
            InputMode::Retrieved,
            kb,
            &bundle.vocab,
            bundle.gen_cfg.max_input,
        )?;
        let out = generate(&bundle.gen, &bundle.gen_cfg, &input)?;
        let mut cand = strip_eos(&out).to_vec();
        cand.truncate(bundle.gen_cfg.max_target - 1);
        candidates.insert(cand);
        inputs.push(input);
    }
    let mut best: Option<(f64, Vec<usize>)> = None;
    for cand in candidates {
        let mut y = cand.clone();
        y.push(EOS);
        let mut terms = Vec::with_capacity(inputs.len());
        for (input, p) in inputs.iter().zip(&dist.probs) {
            let ll = cond_loglik(&bundle.gen, &bundle.gen_cfg, input, &y)?;
            terms.push(p.ln() + ll);
        }
        let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let logp = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
        if best.as_ref().map_or(true, |(bp, _)| logp > *bp) {
            best = Some((logp, cand));
        }
    }
    let (_, tokens) = best.expect("at least one candidate");
    Ok((bundle.vocab.decode(&tokens)?, dist))
}

/// [`marginal_predict_cached`] with the document token sequences and the
/// embedding cache built on the spot.
pub fn marginal_predict(
    bundle: &ModelBundle,
    x: &str,
    kb: &KnowledgeBase,
    k: usize,
) -> Result<(String, RetrievalDistribution)> {
    let doc_tokens = bundle.doc_tokens(kb);
    let mut cache = DocEmbeddingCache::new();
    marginal_predict_cached(bundle, x, kb, &doc_tokens, &mut cache, k)
}

/// Predict with a fixed input mode and no retrieval: the baseline decoder.
pub fn baseline_predict(
    bundle: &ModelBundle,
    x: &str,
    kb: &KnowledgeBase,
    mode: InputMode,
) -> Result<String> {
    let input = build_conditioned_input(x, None, mode, kb, &bundle.vocab, bundle.gen_cfg.max_input)?;
    let out = generate(&bundle.gen, &bundle.gen_cfg, &input)?;
    bundle.vocab.decode(strip_eos(&out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Action, ActionStyle, Dialogue, Turn};
    use crate::neural::{adamw_step, init_generator, OptimConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(vocab: usize) -> GenModelConfig {
        GenModelConfig {
            enc_layers: 1,
            dec_layers: 1,
            hidden: 16,
            heads: 2,
            max_input: 32,
            max_target: 8,
            vocab,
            decode: Decode::Greedy,
        }
    }

    fn init_store(cfg: &GenModelConfig, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        init_generator(&mut store, cfg, &mut rng);
        store
    }

    fn tiny_vocab() -> (Vec<Dialogue>, KnowledgeBase, Vocab) {
        let d = Dialogue {
            id: "d0".into(),
            turns: vec![
                Turn::Customer { text: "please update my plan now".into() },
                Turn::Action {
                    action: Action::new("alpha-beta", vec!["gold".into()]).unwrap(),
                },
            ],
            intent_labels: vec![],
        };
        let kb = KnowledgeBase::new(vec![
            Document {
                id: "doc-0".into(),
                intent_text: "update the plan".into(),
                bslots: vec!["alpha-beta".into(), "gamma-delta".into()],
                required_values: vec![],
                optional_values: vec![],
                result_values: vec![],
            },
            Document {
                id: "doc-1".into(),
                intent_text: "reset credentials".into(),
                bslots: vec!["epsilon-zeta".into()],
                required_values: vec![],
                optional_values: vec![],
                result_values: vec![],
            },
        ])
        .unwrap();
        let v = Vocab::build(std::slice::from_ref(&d), &kb, ActionStyle::Colon).unwrap();
        (vec![d], kb, v)
    }

    #[test]
    fn retrieved_input_has_the_documented_layout() {
        let (_, kb, v) = tiny_vocab();
        let ids =
            build_conditioned_input("update my plan", Some(kb.get(0)), InputMode::Retrieved, &kb, &v, 64)
                .unwrap();
        let text = v.decode(&ids).unwrap();
        assert_eq!(
            text,
            "[DOC] update the plan [SEP] alpha-beta; gamma-delta [SEP] update my plan"
        );
        assert_eq!(ids[0], DOC);
    }

    #[test]
    fn none_mode_is_the_identity() {
        let (_, kb, v) = tiny_vocab();
        let ids = build_conditioned_input("please update", None, InputMode::None, &kb, &v, 64)
            .unwrap();
        assert_eq!(ids, v.encode("please update"));
    }

    #[test]
    fn none_mode_keeps_the_most_recent_tokens() {
        let (_, kb, v) = tiny_vocab();
        let full = v.encode("please update my plan now");
        let ids =
            build_conditioned_input("please update my plan now", None, InputMode::None, &kb, &v, 3)
                .unwrap();
        assert_eq!(ids, full[full.len() - 3..].to_vec());
    }

    #[test]
    fn static_guide_appends_every_document() {
        let (_, kb, v) = tiny_vocab();
        let ids = build_conditioned_input("please", None, InputMode::StaticGuide, &kb, &v, 64)
            .unwrap();
        let text = v.decode(&ids).unwrap();
        assert_eq!(
            text,
            "please [SEP] update the plan [SEP] alpha-beta; gamma-delta reset credentials [SEP] epsilon-zeta"
        );
    }

    #[test]
    fn static_guide_overflow_is_a_length_error() {
        let (_, kb, v) = tiny_vocab();
        let r = build_conditioned_input("hello", None, InputMode::StaticGuide, &kb, &v, 10);
        assert!(matches!(r, Err(Error::Length(_))));
    }

    #[test]
    fn retrieved_mode_without_document_is_rejected() {
        let (_, kb, v) = tiny_vocab();
        let r = build_conditioned_input("hello", None, InputMode::Retrieved, &kb, &v, 64);
        assert!(matches!(r, Err(Error::Input(_))));
    }

    #[test]
    fn loglik_is_negative_and_normalized() {
        let cfg = tiny_cfg(12);
        let store = init_store(&cfg, 7);
        let ll = cond_loglik(&store, &cfg, &[10, 11], &[11, EOS]).unwrap();
        assert!(ll < 0.0);
        let p = ll.exp();
        assert!(p > 0.0 && p <= 1.0);
    }

    #[test]
    fn untrained_loglik_tracks_uniform_over_vocab() {
        let cfg = tiny_cfg(40);
        let store = init_store(&cfg, 11);
        let target = [12, 25, 33, 14, EOS];
        let ll = cond_loglik(&store, &cfg, &[10, 11, 12], &target).unwrap();
        let uniform = -(target.len() as f64) * (cfg.vocab as f64).ln();
        assert!(
            (ll / uniform - 1.0).abs() < 0.2,
            "loglik {ll} vs uniform {uniform}"
        );
    }

    #[test]
    fn short_target_mass_stays_under_one() {
        let cfg = tiny_cfg(5);
        let store = init_store(&cfg, 3);
        let input = [0usize, 3];
        let mut mass = cond_loglik(&store, &cfg, &input, &[EOS]).unwrap().exp();
        for t in 0..5usize {
            mass += cond_loglik(&store, &cfg, &input, &[t, EOS]).unwrap().exp();
        }
        assert!(mass <= 1.0 + 1e-6, "mass {mass}");
        assert!(mass > 0.05);
    }

    #[test]
    fn teacher_forced_rows_are_distributions() {
        let cfg = tiny_cfg(12);
        let store = init_store(&cfg, 5);
        let mut g = Graph::new();
        let memory = generator_encode(&mut g, &store, &cfg, &[10, 11, 4]).unwrap();
        let logits = generator_decode(&mut g, &store, &cfg, memory, &[BOS, 10, 11]).unwrap();
        let probs = g.softmax(logits);
        for row in g.value(probs).chunks(cfg.vocab) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn target_must_end_with_eos() {
        let cfg = tiny_cfg(12);
        let store = init_store(&cfg, 5);
        assert!(matches!(
            cond_loglik(&store, &cfg, &[10], &[11, 10]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn unknown_ids_are_vocab_errors() {
        let cfg = tiny_cfg(12);
        let store = init_store(&cfg, 5);
        assert!(matches!(
            cond_loglik(&store, &cfg, &[12], &[11, EOS]),
            Err(Error::Vocab(_))
        ));
        assert!(matches!(
            cond_loglik(&store, &cfg, &[10], &[12, EOS]),
            Err(Error::Vocab(_))
        ));
        assert!(matches!(generate(&store, &cfg, &[12]), Err(Error::Vocab(_))));
    }

    #[test]
    fn loglik_is_covariant_under_token_relabeling() {
        let cfg = tiny_cfg(12);
        let store = init_store(&cfg, 9);
        let input = [10, 4, 11];
        let target = [11, 10, EOS];
        let base = cond_loglik(&store, &cfg, &input, &target).unwrap();

        // Swap ids 10 and 11 everywhere: in the embedding table and in the data.
        let mut relabeled = store.clone();
        let tok = relabeled.params.get_mut("gen.tok").unwrap();
        let h = cfg.hidden;
        for c in 0..h {
            tok.data_mut().swap(10 * h + c, 11 * h + c);
        }
        let swap = |id: usize| match id {
            10 => 11,
            11 => 10,
            other => other,
        };
        let input2: Vec<usize> = input.iter().map(|&i| swap(i)).collect();
        let target2: Vec<usize> = target.iter().map(|&i| swap(i)).collect();
        let moved = cond_loglik(&relabeled, &cfg, &input2, &target2).unwrap();
        assert!((base - moved).abs() < 1e-12);
    }

    #[test]
    fn loglik_gradient_never_reaches_the_retriever_towers() {
        let cfg = tiny_cfg(12);
        let mut store = init_store(&cfg, 13);
        let enc_cfg = crate::neural::EncoderConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            max_seq: 16,
            vocab: 12,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        crate::neural::init_encoder(&mut store, "dlg", &enc_cfg, &mut rng);
        crate::neural::init_encoder(&mut store, "doc", &enc_cfg, &mut rng);

        let mut g = Graph::new();
        let ll = cond_loglik_node(&mut g, &store, &cfg, &[10, 11], &[11, EOS]).unwrap();
        let loss = g.scale(ll, -1.0);
        g.backward(loss).unwrap();
        let grads = g.param_grads();
        assert!(
            grads.keys().all(|n| n.starts_with("gen.")),
            "tower parameter entered the likelihood graph"
        );
        assert!(grads
            .iter()
            .any(|(n, g)| n.starts_with("gen.") && g.iter().any(|&x| x != 0.0)));
    }

    #[test]
    fn loglik_gradient_survives_finite_differences() {
        let cfg = tiny_cfg(12);
        let store = init_store(&cfg, 15);
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let err = crate::neural::grad_check(
            |s, g| cond_loglik_node(g, s, &cfg, &[10, 4, 11, 8], &[11, 10, EOS]),
            &store,
            1e-5,
            128,
            &mut rng,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }

    #[test]
    fn greedy_decoding_is_deterministic_and_bounded() {
        let cfg = tiny_cfg(12);
        let store = init_store(&cfg, 17);
        let a = generate(&store, &cfg, &[10, 11, 4]).unwrap();
        let b = generate(&store, &cfg, &[10, 11, 4]).unwrap();
        assert_eq!(a, b);
        assert!(a.len() <= cfg.max_target);
    }

    #[test]
    fn beam_width_one_matches_greedy() {
        let greedy_cfg = tiny_cfg(12);
        let beam_cfg = GenModelConfig { decode: Decode::Beam(1), ..greedy_cfg.clone() };
        let store = init_store(&greedy_cfg, 23);
        for input in [vec![10usize, 11], vec![4, 10, 4], vec![11, 11, 10, 4]] {
            let a = generate(&store, &greedy_cfg, &input).unwrap();
            let b = generate(&store, &beam_cfg, &input).unwrap();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn overfitting_one_example_reproduces_its_target() {
        let cfg = tiny_cfg(12);
        let mut store = init_store(&cfg, 31);
        let input = [8, 10, 11, 4, 10];
        let target = [11, 10, EOS];
        let optim = OptimConfig { learning_rate: 3e-3, ..OptimConfig::default() };
        for step in 1..=250 {
            let mut g = Graph::new();
            let ll = cond_loglik_node(&mut g, &store, &cfg, &input, &target).unwrap();
            let loss = g.scale(ll, -1.0);
            g.backward(loss).unwrap();
            let grads = g.param_grads();
            adamw_step(&mut store, &grads, &optim, step).unwrap();
        }
        let decoded = generate(&store, &cfg, &input).unwrap();
        assert_eq!(decoded, target.to_vec());
        let ll = cond_loglik(&store, &cfg, &input, &target).unwrap();
        assert!(ll > -0.1, "loglik after overfit {ll}");
        let beam_cfg = GenModelConfig { decode: Decode::Beam(3), ..cfg };
        assert_eq!(generate(&store, &beam_cfg, &input).unwrap(), target.to_vec());
    }

    #[test]
    fn strip_eos_only_trims_a_trailing_marker() {
        assert_eq!(strip_eos(&[10, 11, EOS]), &[10, 11]);
        assert_eq!(strip_eos(&[10, EOS, 11]), &[10, EOS, 11]);
        assert_eq!(strip_eos(&[]), &[] as &[usize]);
    }
}
