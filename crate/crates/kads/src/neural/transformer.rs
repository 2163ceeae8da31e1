//! Transformer builders: embedding tables, pre-norm blocks, and the
//! encoder/decoder wiring used by the retriever towers and the generator.
//!
//! Every function takes the parameter store plus a name prefix and builds
//! nodes on a [`Graph`]; nothing here owns weights. The generator ties its
//! output projection to the token embedding table, so rare tokens that only
//! ever appear inside document text can still be produced by the decoder.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::graph::{AttnMask, Graph, NodeId};
use crate::neural::store::ParamStore;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_seq: usize,
    /// Set once the vocabulary is built; 0 means "not yet".
    #[serde(default)]
    pub vocab: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            layers: 2,
            hidden: 64,
            heads: 4,
            max_seq: 256,
            vocab: 0,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if self.max_seq < 16 {
            return Err(Error::Config(format!(
                "encoder max_seq must be at least 16, got {}",
                self.max_seq
            )));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible into {} heads",
                self.hidden, self.heads
            )));
        }
        if self.vocab == 0 {
            return Err(Error::Config("encoder vocab size is unset".into()));
        }
        Ok(())
    }
}

/// Decoding strategy for generation.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "lowercase")]
pub enum Decode {
    Greedy,
    Beam(usize),
}

impl Default for Decode {
    fn default() -> Self {
        Decode::Greedy
    }
}

/// Generator shape: an input encoder stack plus a causal decoder stack with
/// cross-attention, sharing one token table for input, target, and output.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct GenModelConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_input: usize,
    pub max_target: usize,
    /// Set once the vocabulary is built; 0 means "not yet".
    #[serde(default)]
    pub vocab: usize,
    #[serde(default)]
    pub decode: Decode,
}

impl Default for GenModelConfig {
    fn default() -> Self {
        GenModelConfig {
            enc_layers: 2,
            dec_layers: 2,
            hidden: 64,
            heads: 4,
            max_input: 384,
            max_target: 64,
            vocab: 0,
            decode: Decode::Greedy,
        }
    }
}

impl GenModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.enc_layers == 0 || self.dec_layers == 0 || self.hidden == 0 {
            return Err(Error::Config("generator dimensions must be positive".into()));
        }
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} not divisible into {} heads",
                self.hidden, self.heads
            )));
        }
        if self.max_input == 0 || self.max_target == 0 {
            return Err(Error::Config("generator sequence caps must be positive".into()));
        }
        if self.vocab == 0 {
            return Err(Error::Config("generator vocab size is unset".into()));
        }
        if let Decode::Beam(w) = self.decode {
            if w == 0 {
                return Err(Error::Config("beam width must be at least 1".into()));
            }
        }
        Ok(())
    }
}

const INIT_STD: f64 = 0.02;

fn init_block(store: &mut ParamStore, prefix: &str, h: usize, rng: &mut ChaCha8Rng) {
    for name in ["ln1", "ln2"] {
        store.insert_full(&format!("{prefix}.{name}.g"), vec![h], 1.0);
        store.insert_zeros(&format!("{prefix}.{name}.b"), vec![h]);
    }
    for name in ["wq", "wk", "wv", "wo"] {
        store.insert_randn(&format!("{prefix}.attn.{name}"), vec![h, h], INIT_STD, rng);
    }
    store.insert_randn(&format!("{prefix}.ffn.w1"), vec![h, 4 * h], INIT_STD, rng);
    store.insert_zeros(&format!("{prefix}.ffn.b1"), vec![4 * h]);
    store.insert_randn(&format!("{prefix}.ffn.w2"), vec![4 * h, h], INIT_STD, rng);
    store.insert_zeros(&format!("{prefix}.ffn.b2"), vec![h]);
}

fn init_cross(store: &mut ParamStore, prefix: &str, h: usize, rng: &mut ChaCha8Rng) {
    store.insert_full(&format!("{prefix}.lnx.g"), vec![h], 1.0);
    store.insert_zeros(&format!("{prefix}.lnx.b"), vec![h]);
    for name in ["cq", "ck", "cv", "co"] {
        store.insert_randn(&format!("{prefix}.cross.{name}"), vec![h, h], INIT_STD, rng);
    }
}

/// Allocate all parameters of one encoder tower under `prefix`.
pub fn init_encoder(
    store: &mut ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    rng: &mut ChaCha8Rng,
) {
    store.insert_randn(&format!("{prefix}.tok"), vec![cfg.vocab, cfg.hidden], INIT_STD, rng);
    store.insert_randn(&format!("{prefix}.pos"), vec![cfg.max_seq, cfg.hidden], INIT_STD, rng);
    for l in 0..cfg.layers {
        init_block(store, &format!("{prefix}.l{l}"), cfg.hidden, rng);
    }
    store.insert_full(&format!("{prefix}.lnf.g"), vec![cfg.hidden], 1.0);
    store.insert_zeros(&format!("{prefix}.lnf.b"), vec![cfg.hidden]);
}

/// Allocate all generator parameters: shared token table, input encoder
/// stack, and causal decoder stack with cross-attention.
pub fn init_generator(store: &mut ParamStore, cfg: &GenModelConfig, rng: &mut ChaCha8Rng) {
    store.insert_randn("gen.tok", vec![cfg.vocab, cfg.hidden], INIT_STD, rng);
    store.insert_randn("gen.enc.pos", vec![cfg.max_input, cfg.hidden], INIT_STD, rng);
    store.insert_randn("gen.dec.pos", vec![cfg.max_target, cfg.hidden], INIT_STD, rng);
    for l in 0..cfg.enc_layers {
        init_block(store, &format!("gen.enc.l{l}"), cfg.hidden, rng);
    }
    for l in 0..cfg.dec_layers {
        let p = format!("gen.dec.l{l}");
        init_block(store, &p, cfg.hidden, rng);
        init_cross(store, &p, cfg.hidden, rng);
    }
    store.insert_full("gen.enc.lnf.g", vec![cfg.hidden], 1.0);
    store.insert_zeros("gen.enc.lnf.b", vec![cfg.hidden]);
    store.insert_full("gen.dec.lnf.g", vec![cfg.hidden], 1.0);
    store.insert_zeros("gen.dec.lnf.b", vec![cfg.hidden]);
}

fn ln_affine(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let gain = g.param(&format!("{prefix}.g"), store.get(&format!("{prefix}.g"))?);
    let bias = g.param(&format!("{prefix}.b"), store.get(&format!("{prefix}.b"))?);
    let n = g.layer_norm(x);
    let n = g.mul(n, gain)?;
    g.add(n, bias)
}

fn self_attn(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    x: NodeId,
    mask: AttnMask,
) -> Result<NodeId> {
    let h = ln_affine(g, store, &format!("{prefix}.ln1"), x)?;
    let wq = g.param(&format!("{prefix}.attn.wq"), store.get(&format!("{prefix}.attn.wq"))?);
    let wk = g.param(&format!("{prefix}.attn.wk"), store.get(&format!("{prefix}.attn.wk"))?);
    let wv = g.param(&format!("{prefix}.attn.wv"), store.get(&format!("{prefix}.attn.wv"))?);
    let wo = g.param(&format!("{prefix}.attn.wo"), store.get(&format!("{prefix}.attn.wo"))?);
    let q = g.matmul(h, wq)?;
    let k = g.matmul(h, wk)?;
    let v = g.matmul(h, wv)?;
    let a = g.attention(q, k, v, heads, mask)?;
    let o = g.matmul(a, wo)?;
    g.add(x, o)
}

fn cross_attn(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    heads: usize,
    x: NodeId,
    memory: NodeId,
) -> Result<NodeId> {
    let h = ln_affine(g, store, &format!("{prefix}.lnx"), x)?;
    let cq = g.param(&format!("{prefix}.cross.cq"), store.get(&format!("{prefix}.cross.cq"))?);
    let ck = g.param(&format!("{prefix}.cross.ck"), store.get(&format!("{prefix}.cross.ck"))?);
    let cv = g.param(&format!("{prefix}.cross.cv"), store.get(&format!("{prefix}.cross.cv"))?);
    let co = g.param(&format!("{prefix}.cross.co"), store.get(&format!("{prefix}.cross.co"))?);
    let q = g.matmul(h, cq)?;
    let k = g.matmul(memory, ck)?;
    let v = g.matmul(memory, cv)?;
    let a = g.attention(q, k, v, heads, AttnMask::Full)?;
    let o = g.matmul(a, co)?;
    g.add(x, o)
}

fn ffn(g: &mut Graph, store: &ParamStore, prefix: &str, x: NodeId) -> Result<NodeId> {
    let h = ln_affine(g, store, &format!("{prefix}.ln2"), x)?;
    let w1 = g.param(&format!("{prefix}.ffn.w1"), store.get(&format!("{prefix}.ffn.w1"))?);
    let b1 = g.param(&format!("{prefix}.ffn.b1"), store.get(&format!("{prefix}.ffn.b1"))?);
    let w2 = g.param(&format!("{prefix}.ffn.w2"), store.get(&format!("{prefix}.ffn.w2"))?);
    let b2 = g.param(&format!("{prefix}.ffn.b2"), store.get(&format!("{prefix}.ffn.b2"))?);
    let u = g.matmul(h, w1)?;
    let u = g.add(u, b1)?;
    let u = g.gelu(u);
    let o = g.matmul(u, w2)?;
    let o = g.add(o, b2)?;
    g.add(x, o)
}

fn embed(
    g: &mut Graph,
    store: &ParamStore,
    tok_name: &str,
    pos_name: &str,
    ids: &[usize],
    max_seq: usize,
) -> Result<NodeId> {
    if ids.is_empty() {
        return Err(Error::Input("cannot embed an empty sequence".into()));
    }
    if ids.len() > max_seq {
        return Err(Error::Length(format!(
            "sequence of {} tokens exceeds the maximum of {max_seq}",
            ids.len()
        )));
    }
    let tok = g.param(tok_name, store.get(tok_name)?);
    let pos = g.param(pos_name, store.get(pos_name)?);
    let te = g.lookup(tok, ids)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pe = g.lookup(pos, &positions)?;
    g.add(te, pe)
}

/// Full bidirectional encoder pass over `ids`: returns the [len, hidden]
/// sequence after the final layer norm.
pub fn encoder_forward(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    cfg: &EncoderConfig,
    ids: &[usize],
) -> Result<NodeId> {
    let mut x = embed(
        g,
        store,
        &format!("{prefix}.tok"),
        &format!("{prefix}.pos"),
        ids,
        cfg.max_seq,
    )?;
    for l in 0..cfg.layers {
        let p = format!("{prefix}.l{l}");
        x = self_attn(g, store, &p, cfg.heads, x, AttnMask::Full)?;
        x = ffn(g, store, &p, x)?;
    }
    ln_affine(g, store, &format!("{prefix}.lnf"), x)
}

/// Encode the generator's conditioned input sequence to a [len, hidden]
/// memory for cross-attention.
pub fn generator_encode(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &GenModelConfig,
    input_ids: &[usize],
) -> Result<NodeId> {
    let mut x = embed(g, store, "gen.tok", "gen.enc.pos", input_ids, cfg.max_input)?;
    for l in 0..cfg.enc_layers {
        let p = format!("gen.enc.l{l}");
        x = self_attn(g, store, &p, cfg.heads, x, AttnMask::Full)?;
        x = ffn(g, store, &p, x)?;
    }
    ln_affine(g, store, "gen.enc.lnf", x)
}

/// Teacher-forced decoder pass: causal self-attention over the target
/// prefix, cross-attention into `memory`, and tied-embedding logits of
/// shape [prefix_len, vocab].
pub fn generator_decode(
    g: &mut Graph,
    store: &ParamStore,
    cfg: &GenModelConfig,
    memory: NodeId,
    prefix_ids: &[usize],
) -> Result<NodeId> {
    let mut x = embed(g, store, "gen.tok", "gen.dec.pos", prefix_ids, cfg.max_target)?;
    for l in 0..cfg.dec_layers {
        let p = format!("gen.dec.l{l}");
        x = self_attn(g, store, &p, cfg.heads, x, AttnMask::Causal)?;
        x = cross_attn(g, store, &p, cfg.heads, x, memory)?;
        x = ffn(g, store, &p, x)?;
    }
    let x = ln_affine(g, store, "gen.dec.lnf", x)?;
    let tok = g.param("gen.tok", store.get("gen.tok")?);
    g.matmul_nt(x, tok)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_encoder() -> (ParamStore, EncoderConfig) {
        let cfg = EncoderConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            max_seq: 16,
            vocab: 11,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        init_encoder(&mut store, "enc", &cfg, &mut rng);
        (store, cfg)
    }

    fn tiny_generator() -> (ParamStore, GenModelConfig) {
        let cfg = GenModelConfig {
            enc_layers: 1,
            dec_layers: 2,
            hidden: 16,
            heads: 2,
            max_input: 16,
            max_target: 8,
            vocab: 13,
            decode: Decode::Greedy,
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        init_generator(&mut store, &cfg, &mut rng);
        (store, cfg)
    }

    #[test]
    fn encoder_output_shape_tracks_input_length() {
        let (store, cfg) = tiny_encoder();
        let mut g = Graph::new();
        let out = encoder_forward(&mut g, &store, "enc", &cfg, &[1, 2, 3, 4, 5]).unwrap();
        assert_eq!(g.shape(out), (5, 16));
    }

    #[test]
    fn encoder_rejects_overlong_input() {
        let (store, cfg) = tiny_encoder();
        let mut g = Graph::new();
        let ids: Vec<usize> = (0..17).map(|i| i % 11).collect();
        assert!(matches!(
            encoder_forward(&mut g, &store, "enc", &cfg, &ids),
            Err(Error::Length(_))
        ));
    }

    #[test]
    fn encoder_forward_is_deterministic() {
        let (store, cfg) = tiny_encoder();
        let run = || {
            let mut g = Graph::new();
            let out = encoder_forward(&mut g, &store, "enc", &cfg, &[7, 0, 7]).unwrap();
            g.value(out).to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn decoder_logits_are_causal_in_the_prefix() {
        // Changing a later prefix token must not change earlier logit rows.
        let (store, cfg) = tiny_generator();
        let logits = |prefix: &[usize]| {
            let mut g = Graph::new();
            let mem = generator_encode(&mut g, &store, &cfg, &[1, 2, 3]).unwrap();
            let out = generator_decode(&mut g, &store, &cfg, mem, prefix).unwrap();
            g.value(out).to_vec()
        };
        let a = logits(&[1, 5, 6]);
        let b = logits(&[1, 5, 9]);
        let vocab = 13;
        for j in 0..2 * vocab {
            assert!((a[j] - b[j]).abs() < 1e-12, "row {} differs", j / vocab);
        }
        assert!(
            (0..vocab).any(|j| (a[2 * vocab + j] - b[2 * vocab + j]).abs() > 1e-9),
            "last row should differ"
        );
    }

    #[test]
    fn decoder_attends_to_the_input_memory() {
        let (store, cfg) = tiny_generator();
        let logits = |input: &[usize]| {
            let mut g = Graph::new();
            let mem = generator_encode(&mut g, &store, &cfg, input).unwrap();
            let out = generator_decode(&mut g, &store, &cfg, mem, &[1]).unwrap();
            g.value(out).to_vec()
        };
        let a = logits(&[1, 2, 3]);
        let b = logits(&[1, 2, 4]);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
    }

    #[test]
    fn tied_projection_reuses_the_token_table() {
        let (store, cfg) = tiny_generator();
        let mut g = Graph::new();
        let mem = generator_encode(&mut g, &store, &cfg, &[1, 2]).unwrap();
        let out = generator_decode(&mut g, &store, &cfg, mem, &[1, 3]).unwrap();
        let loss = g.cross_entropy(out, &[3, 2]).unwrap();
        g.backward(loss).unwrap();
        // One shared table: its gradient entry exists exactly once.
        let grads = g.param_grads();
        assert!(grads.contains_key("gen.tok"));
        assert_eq!(grads.keys().filter(|k| k.ends_with(".tok")).count(), 1);
    }
}
