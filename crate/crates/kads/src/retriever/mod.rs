//! Dual-encoder retriever: two separate transformer towers embed dialogues
//! and documents, relevance is the embedding inner product, and retrieval
//! distributions are softmaxes over the scores of the whole knowledge base.

use crate::corpus::KnowledgeBase;
use crate::error::{Error, Result};
use crate::neural::graph::{Graph, NodeId};
use crate::neural::store::ParamStore;
use crate::neural::transformer::{encoder_forward, EncoderConfig};

/// Which tower embeds the input. The towers share nothing, not even the
/// token table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tower {
    Dialogue,
    Document,
}

impl Tower {
    pub fn prefix(self) -> &'static str {
        match self {
            Tower::Dialogue => "dlg",
            Tower::Document => "doc",
        }
    }
}

/// A pooled text embedding; entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVec(Vec<f64>);

impl EmbeddingVec {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(bad) = data.iter().find(|x| !x.is_finite()) {
            return Err(Error::Numeric(format!("non-finite embedding entry {bad}")));
        }
        Ok(EmbeddingVec(data))
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// Scores and probabilities over an ordered document subset (the full base
/// or a top-k selection).
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalDistribution {
    pub doc_ids: Vec<String>,
    pub probs: Vec<f64>,
    pub scores: Vec<f64>,
}

impl RetrievalDistribution {
    /// Index (within this distribution) of the highest-probability entry.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for i in 1..self.probs.len() {
            if self.probs[i] > self.probs[best] {
                best = i;
            }
        }
        best
    }
}

/// Clip a token sequence to the tower's window: dialogues keep their most
/// recent tokens, documents keep their opening tokens.
pub fn truncate_tokens(tokens: &[usize], tower: Tower, max_seq: usize) -> &[usize] {
    if tokens.len() <= max_seq {
        return tokens;
    }
    match tower {
        Tower::Dialogue => &tokens[tokens.len() - max_seq..],
        Tower::Document => &tokens[..max_seq],
    }
}

/// Build the mean-pooled embedding node for one text, shape [1, hidden].
pub fn embed_node(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &EncoderConfig,
    tower: Tower,
    tokens: &[usize],
) -> Result<NodeId> {
    if tokens.is_empty() {
        return Err(Error::Input("cannot embed an empty token sequence".into()));
    }
    let tokens = truncate_tokens(tokens, tower, cfg.max_seq);
    let seq = encoder_forward(g, store, tower.prefix(), cfg, tokens)?;
    Ok(g.mean_pool(seq))
}

/// Embed one text to a plain vector (inference path).
pub fn embed_text(
    store: &ParamStore,
    cfg: &EncoderConfig,
    tower: Tower,
    tokens: &[usize],
) -> Result<EmbeddingVec> {
    let mut g = Graph::new();
    let node = embed_node(&mut g, store, cfg, tower, tokens)?;
    EmbeddingVec::new(g.value(node).to_vec())
}

/// Inner-product relevance between a dialogue and a document embedding.
pub fn relevance(x_emb: &EmbeddingVec, z_emb: &EmbeddingVec) -> Result<f64> {
    if x_emb.dim() != z_emb.dim() {
        return Err(Error::Shape {
            op: "relevance",
            left: vec![x_emb.dim()],
            right: vec![z_emb.dim()],
        });
    }
    Ok(x_emb
        .as_slice()
        .iter()
        .zip(z_emb.as_slice())
        .map(|(a, b)| a * b)
        .sum())
}

/// Softmax over a score row; stable under score shifts.
pub fn softmax_scores(scores: &[f64]) -> Vec<f64> {
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Full distribution from precomputed scores in knowledge-base order.
pub fn distribution_from_scores(doc_ids: Vec<String>, scores: Vec<f64>) -> RetrievalDistribution {
    let probs = softmax_scores(&scores);
    RetrievalDistribution { doc_ids, probs, scores }
}

/// Indices of the k highest scores, ties broken toward the lower index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > scores.len() {
        return Err(Error::Config(format!(
            "top-k of {k} out of range for {} documents",
            scores.len()
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are finite")
            .then(a.cmp(&b))
    });
    let mut picked = order[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Truncate to the k best documents and renormalize by a softmax over the
/// retained scores.
pub fn top_k_from_scores(
    doc_ids: &[String],
    scores: &[f64],
    k: usize,
) -> Result<RetrievalDistribution> {
    let picked = top_k_indices(scores, k)?;
    let sub_scores: Vec<f64> = picked.iter().map(|&i| scores[i]).collect();
    let sub_ids: Vec<String> = picked.iter().map(|&i| doc_ids[i].clone()).collect();
    Ok(distribution_from_scores(sub_ids, sub_scores))
}

/// Document embeddings, reused while the document tower's parameters stay
/// at one version and rebuilt transparently when they move.
#[derive(Debug, Default)]
pub struct DocEmbeddingCache {
    store_version: Option<u64>,
    embs: Vec<EmbeddingVec>,
}

impl DocEmbeddingCache {
    pub fn new() -> Self {
        DocEmbeddingCache::default()
    }

    pub fn get_or_build(
        &mut self,
        store: &ParamStore,
        cfg: &EncoderConfig,
        doc_tokens: &[Vec<usize>],
    ) -> Result<&[EmbeddingVec]> {
        if self.store_version != Some(store.version) || self.embs.len() != doc_tokens.len() {
            let mut embs = Vec::with_capacity(doc_tokens.len());
            for tokens in doc_tokens {
                embs.push(embed_text(store, cfg, Tower::Document, tokens)?);
            }
            self.embs = embs;
            self.store_version = Some(store.version);
        }
        Ok(&self.embs)
    }
}

/// Score every document against a dialogue and softmax the scores. The two
/// towers may live in one parameter store or in separate ones; `doc_tokens`
/// must parallel `kb` order. Passing a cache reuses document embeddings
/// across calls; results are identical either way.
pub fn retrieval_distribution(
    dlg_store: &ParamStore,
    doc_store: &ParamStore,
    cfg: &EncoderConfig,
    x_tokens: &[usize],
    kb: &KnowledgeBase,
    doc_tokens: &[Vec<usize>],
    cache: Option<&mut DocEmbeddingCache>,
) -> Result<RetrievalDistribution> {
    let scores = relevance_scores(dlg_store, doc_store, cfg, x_tokens, kb, doc_tokens, cache)?;
    let doc_ids = kb.docs().iter().map(|d| d.id.clone()).collect();
    Ok(distribution_from_scores(doc_ids, scores))
}

/// The k most relevant documents with renormalized probabilities.
pub fn top_k_retrieve(
    dlg_store: &ParamStore,
    doc_store: &ParamStore,
    cfg: &EncoderConfig,
    x_tokens: &[usize],
    kb: &KnowledgeBase,
    doc_tokens: &[Vec<usize>],
    k: usize,
    cache: Option<&mut DocEmbeddingCache>,
) -> Result<RetrievalDistribution> {
    let scores = relevance_scores(dlg_store, doc_store, cfg, x_tokens, kb, doc_tokens, cache)?;
    let doc_ids: Vec<String> = kb.docs().iter().map(|d| d.id.clone()).collect();
    top_k_from_scores(&doc_ids, &scores, k)
}

fn relevance_scores(
    dlg_store: &ParamStore,
    doc_store: &ParamStore,
    cfg: &EncoderConfig,
    x_tokens: &[usize],
    kb: &KnowledgeBase,
    doc_tokens: &[Vec<usize>],
    cache: Option<&mut DocEmbeddingCache>,
) -> Result<Vec<f64>> {
    if kb.is_empty() {
        return Err(Error::Input("knowledge base is empty".into()));
    }
    if doc_tokens.len() != kb.len() {
        return Err(Error::Shape {
            op: "retrieval_distribution",
            left: vec![doc_tokens.len()],
            right: vec![kb.len()],
        });
    }
    let x_emb = embed_text(dlg_store, cfg, Tower::Dialogue, x_tokens)?;
    let mut local = DocEmbeddingCache::new();
    let cache = match cache {
        Some(c) => c,
        None => &mut local,
    };
    let embs = cache.get_or_build(doc_store, cfg, doc_tokens)?;
    embs.iter().map(|e| relevance(&x_emb, e)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Document;
    use crate::neural::gradcheck::grad_check;
    use crate::neural::transformer::init_encoder;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_setup(vocab: usize) -> (ParamStore, EncoderConfig) {
        let cfg = EncoderConfig {
            layers: 1,
            hidden: 16,
            heads: 2,
            max_seq: 16,
            vocab,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        init_encoder(&mut store, "dlg", &cfg, &mut rng);
        init_encoder(&mut store, "doc", &cfg, &mut rng);
        (store, cfg)
    }

    fn kb_of(n: usize) -> (KnowledgeBase, Vec<Vec<usize>>) {
        let docs = (0..n)
            .map(|i| Document {
                id: format!("doc-{i}"),
                intent_text: "t".into(),
                bslots: vec!["b".into()],
                required_values: vec![],
                optional_values: vec![],
                result_values: vec![],
            })
            .collect();
        let tokens = (0..n).map(|i| vec![i % 7, (i + 1) % 7, 3]).collect();
        (KnowledgeBase::new(docs).unwrap(), tokens)
    }

    #[test]
    fn relevance_is_the_inner_product() {
        let a = EmbeddingVec::new(vec![1.0, 0.0]).unwrap();
        let b = EmbeddingVec::new(vec![0.0, 1.0]).unwrap();
        assert_eq!(relevance(&a, &b).unwrap(), 0.0);
        let v = EmbeddingVec::new(vec![1.0, 2.0]).unwrap();
        let w = EmbeddingVec::new(vec![3.0, 4.0]).unwrap();
        assert_eq!(relevance(&v, &w).unwrap(), 11.0);
        assert!(relevance(&v, &v).unwrap() >= 0.0);
    }

    #[test]
    fn relevance_rejects_dim_mismatch() {
        let a = EmbeddingVec::new(vec![1.0]).unwrap();
        let b = EmbeddingVec::new(vec![1.0, 2.0]).unwrap();
        assert!(matches!(relevance(&a, &b), Err(Error::Shape { .. })));
    }

    #[test]
    fn identical_inputs_embed_identically() {
        let (store, cfg) = tiny_setup(9);
        let e1 = embed_text(&store, &cfg, Tower::Dialogue, &[1, 2, 3]).unwrap();
        let e2 = embed_text(&store, &cfg, Tower::Dialogue, &[1, 2, 3]).unwrap();
        assert_eq!(e1, e2);
        assert_eq!(e1.dim(), 16);
    }

    #[test]
    fn towers_are_independent() {
        let (store, cfg) = tiny_setup(9);
        let d = embed_text(&store, &cfg, Tower::Dialogue, &[1, 2, 3]).unwrap();
        let k = embed_text(&store, &cfg, Tower::Document, &[1, 2, 3]).unwrap();
        assert_ne!(d, k);
    }

    #[test]
    fn dialogue_truncation_keeps_the_tail() {
        let tokens: Vec<usize> = (0..20).collect();
        assert_eq!(truncate_tokens(&tokens, Tower::Dialogue, 16), &tokens[4..]);
        assert_eq!(truncate_tokens(&tokens, Tower::Document, 16), &tokens[..16]);
    }

    #[test]
    fn empty_input_is_an_input_error() {
        let (store, cfg) = tiny_setup(9);
        assert!(matches!(
            embed_text(&store, &cfg, Tower::Dialogue, &[]),
            Err(Error::Input(_))
        ));
    }

    #[test]
    fn closed_form_two_doc_distribution() {
        let d = distribution_from_scores(
            vec!["a".into(), "b".into()],
            vec![0.0, 2f64.ln()],
        );
        assert!((d.probs[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((d.probs[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn single_document_distribution_is_certain() {
        let (store, cfg) = tiny_setup(9);
        let (kb, toks) = kb_of(1);
        let d = retrieval_distribution(&store, &store, &cfg, &[1, 2], &kb, &toks, None).unwrap();
        assert_eq!(d.probs, vec![1.0]);
    }

    #[test]
    fn identical_documents_get_a_uniform_distribution() {
        let (store, cfg) = tiny_setup(9);
        let (kb, _) = kb_of(4);
        let toks = vec![vec![1, 2, 3]; 4];
        let d = retrieval_distribution(&store, &store, &cfg, &[5, 6], &kb, &toks, None).unwrap();
        for p in &d.probs {
            assert!((p - 0.25).abs() < 1e-9);
        }
    }

    #[test]
    fn shift_invariance_of_scores() {
        let scores = vec![0.2, -1.0, 3.1, 0.0, 0.7];
        let ids: Vec<String> = (0..5).map(|i| format!("d{i}")).collect();
        let base = distribution_from_scores(ids.clone(), scores.clone());
        let shifted: Vec<f64> = scores.iter().map(|s| s + 100.0).collect();
        let moved = distribution_from_scores(ids.clone(), shifted);
        for (a, b) in base.probs.iter().zip(&moved.probs) {
            assert!((a - b).abs() < 1e-9);
        }
        let k1 = top_k_from_scores(&ids, &scores, 3).unwrap();
        let shifted2: Vec<f64> = scores.iter().map(|s| s + 100.0).collect();
        let k2 = top_k_from_scores(&ids, &shifted2, 3).unwrap();
        assert_eq!(k1.doc_ids, k2.doc_ids);
        for (a, b) in k1.probs.iter().zip(&k2.probs) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn top_k_matches_exhaustive_sort_and_nests() {
        let mut rng = ChaCha8Rng::seed_from_u64(40);
        for _ in 0..50 {
            let scores: Vec<f64> = (0..8).map(|_| rng.random::<f64>() * 4.0 - 2.0).collect();
            let mut order: Vec<usize> = (0..8).collect();
            order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
            for k in 1..=8usize {
                let picked = top_k_indices(&scores, k).unwrap();
                let mut expect = order[..k].to_vec();
                expect.sort_unstable();
                assert_eq!(picked, expect);
                if k < 8 {
                    let next = top_k_indices(&scores, k + 1).unwrap();
                    assert!(picked.iter().all(|i| next.contains(i)));
                }
            }
        }
    }

    #[test]
    fn top_k_equals_full_distribution_at_full_k() {
        let (store, cfg) = tiny_setup(9);
        let (kb, toks) = kb_of(5);
        let full = retrieval_distribution(&store, &store, &cfg, &[1, 2], &kb, &toks, None).unwrap();
        let top = top_k_retrieve(&store, &store, &cfg, &[1, 2], &kb, &toks, 5, None).unwrap();
        assert_eq!(full.doc_ids, top.doc_ids);
        for (a, b) in full.probs.iter().zip(&top.probs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn top_k_renormalizes_consistently() {
        let scores = vec![1.2, -0.3, 0.8, 2.0, -1.1, 0.0];
        let ids: Vec<String> = (0..6).map(|i| format!("d{i}")).collect();
        let full = distribution_from_scores(ids.clone(), scores.clone());
        let top = top_k_from_scores(&ids, &scores, 3).unwrap();
        let kept: f64 = top
            .doc_ids
            .iter()
            .map(|id| full.probs[full.doc_ids.iter().position(|d| d == id).unwrap()])
            .sum();
        for (i, id) in top.doc_ids.iter().enumerate() {
            let fi = full.doc_ids.iter().position(|d| d == id).unwrap();
            assert!((top.probs[i] - full.probs[fi] / kept).abs() < 1e-9);
        }
    }

    #[test]
    fn top_k_of_one_is_certain_on_the_argmax() {
        let scores = vec![0.1, 5.0, -2.0];
        let ids: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let top = top_k_from_scores(&ids, &scores, 1).unwrap();
        assert_eq!(top.doc_ids, vec!["b".to_string()]);
        assert_eq!(top.probs, vec![1.0]);
    }

    #[test]
    fn k_out_of_range_is_a_config_error() {
        assert!(matches!(top_k_indices(&[1.0, 2.0], 0), Err(Error::Config(_))));
        assert!(matches!(top_k_indices(&[1.0, 2.0], 3), Err(Error::Config(_))));
    }

    #[test]
    fn cache_is_transparent_and_invalidates_on_update() {
        let (mut store, cfg) = tiny_setup(9);
        let (kb, toks) = kb_of(4);
        let mut cache = DocEmbeddingCache::new();
        let with_cache =
            retrieval_distribution(&store, &store, &cfg, &[1, 2], &kb, &toks, Some(&mut cache)).unwrap();
        let without = retrieval_distribution(&store, &store, &cfg, &[1, 2], &kb, &toks, None).unwrap();
        assert_eq!(with_cache, without);
        // Mutate the document tower; the cache must rebuild, not serve stale vectors.
        store.params.get_mut("doc.tok").unwrap().data_mut()[0] += 1.0;
        store.bump_version();
        let after =
            retrieval_distribution(&store, &store, &cfg, &[1, 2], &kb, &toks, Some(&mut cache)).unwrap();
        let fresh = retrieval_distribution(&store, &store, &cfg, &[1, 2], &kb, &toks, None).unwrap();
        assert_eq!(after, fresh);
    }

    #[test]
    fn embedding_norm_gradient_survives_finite_differences() {
        let cfg = EncoderConfig {
            layers: 1,
            hidden: 8,
            heads: 2,
            max_seq: 16,
            vocab: 6,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        init_encoder(&mut store, "dlg", &cfg, &mut rng);
        let mut check_rng = ChaCha8Rng::seed_from_u64(3);
        let err = grad_check(
            |s, g| {
                let emb = embed_node(g, s, &cfg, Tower::Dialogue, &[1, 4, 2])?;
                g.matmul_nt(emb, emb)
            },
            &store,
            1e-5,
            96,
            &mut check_rng,
        )
        .unwrap();
        assert!(err < 1e-5, "rel err {err}");
    }
}
