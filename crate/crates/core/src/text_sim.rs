//! Deterministic stand-in for a frozen text encoder.
//!
//! Label names are tokenized, each token maps to a seeded embedding, and a
//! frozen two-layer perceptron turns the mean of a token sequence into a
//! `d`-dimensional label embedding. The encoder weights never receive
//! gradients, but the encoding is differentiable with respect to its input,
//! so gradients reach learnable soft-prompt tokens.
//!
//! The mean pooling makes the encoder order-insensitive; prompt-token
//! ordering effects cannot be studied with it.

use crate::error::{Error, Result};
use crate::rng::{fnv1a, stream_rng};
use crate::tensor::{Tape, Tensor};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::Path;

pub const HARD_PROMPT_TEMPLATE: &str = "This photo contains [CLS].";

/// The C candidate label names; unique and nonempty.
#[derive(Clone, Debug)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.is_empty() {
            return Err(Error::EmptyInput("vocabulary has no labels".into()));
        }
        for (i, a) in names.iter().enumerate() {
            if a.trim().is_empty() {
                return Err(Error::Config(format!("label {i} is empty")));
            }
            for b in names.iter().skip(i + 1) {
                if a == b {
                    return Err(Error::Config(format!("duplicate label name {a:?}")));
                }
            }
        }
        Ok(Vocabulary { names })
    }

    /// One label name per line, UTF-8.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let names: Vec<String> = text
            .lines()
            .map(|l| l.trim().to_string())
            .filter(|l| !l.is_empty())
            .collect();
        Vocabulary::new(names)
    }

    /// Built-in label names for synthetic runs: `"context object"`
    /// compounds grouped four-per-context, so labels that share a scene in
    /// the synthetic generator are also lexically related — the synthetic
    /// stand-in for co-occurring categories being semantically close
    /// ("baseball bat" / "baseball glove").
    pub fn synthetic(c: usize) -> Result<Self> {
        const CONTEXTS: &[&str] = &[
            "kitchen", "harbor", "forest", "street", "meadow", "studio", "desert", "stadium",
            "garden", "market",
        ];
        const OBJECTS: &[&str] = &[
            "pan", "knife", "kettle", "bowl", "boat", "buoy", "net", "crane", "pine", "fern",
            "moss", "owl", "car", "sign", "bench", "lamp", "cow", "fence", "brook", "hay",
            "easel", "canvas", "tripod", "stool", "dune", "cactus", "lizard", "rock", "goal",
            "flag", "drum", "torch", "rose", "spade", "pot", "vine", "stall", "scale", "crate",
            "basket",
        ];
        let names = (0..c)
            .map(|i| {
                let group = i / SCENE_GROUP_SIZE;
                if i < OBJECTS.len() && group < CONTEXTS.len() {
                    format!("{} {}", CONTEXTS[group], OBJECTS[i])
                } else {
                    format!("zone{group} thing{i}")
                }
            })
            .collect();
        Vocabulary::new(names)
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

/// Lowercase split on non-alphanumeric characters.
pub fn tokenize(text: &str) -> Result<Vec<String>> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("tokenize: empty text".into()));
    }
    let tokens: Vec<String> = text
        .to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect();
    if tokens.is_empty() {
        return Err(Error::EmptyInput(format!("tokenize: no tokens in {text:?}")));
    }
    Ok(tokens)
}

/// Seeded map from token strings to embeddings; the same token always maps
/// to the same vector under a fixed seed.
#[derive(Clone, Debug)]
pub struct TokenEmbeddingTable {
    seed: u64,
    pub dim: usize,
}

/// Labels per lexical context group in the synthetic vocabulary; matches
/// the scene width of the synthetic generator so co-occurrence and lexical
/// similarity line up.
pub const SCENE_GROUP_SIZE: usize = 4;

/// Closed-class words that appear in prompt templates.
const STOP_WORDS: &[&str] = &[
    "a", "an", "and", "contains", "in", "is", "of", "on", "photo", "picture", "the", "this",
    "with",
];
const STOP_WORD_SCALE: f64 = 0.05;

impl TokenEmbeddingTable {
    pub fn new(seed: u64, dim: usize) -> Self {
        TokenEmbeddingTable { seed, dim }
    }

    pub fn embed(&self, token: &str) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(
            self.seed ^ fnv1a(token).wrapping_mul(0x2545f4914f6cdd1d),
        );
        // Frequent function words get small norms, mirroring trained word
        // embeddings where stop-words carry little discriminative mass;
        // otherwise a shared prompt template drowns out the one content
        // token under mean-pooling.
        let scale = if STOP_WORDS.contains(&token) { STOP_WORD_SCALE } else { 1.0 };
        (0..self.dim).map(|_| rng.gen_range(-1.0..1.0) * scale).collect()
    }

    /// Mean of the token embeddings of `text`.
    pub fn embed_text(&self, text: &str) -> Result<Vec<f64>> {
        let tokens = tokenize(text)?;
        let mut out = vec![0.0; self.dim];
        for t in &tokens {
            for (o, v) in out.iter_mut().zip(self.embed(t)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= tokens.len() as f64;
        }
        Ok(out)
    }
}

/// Frozen perceptron `d_tok -> d_tok -> d` with tanh after the hidden
/// layer. Weights are seeded at construction and never updated.
#[derive(Clone, Debug)]
pub struct PseudoTextEncoder {
    pub d_tok: usize,
    pub d: usize,
    /// `(weights, bias, in_dim, out_dim)` per layer; tanh after every
    /// layer except the last.
    layers: Vec<(Vec<f64>, Vec<f64>, usize, usize)>,
}

/// Hidden tanh layers in the frozen encoder.
const ENCODER_HIDDEN_LAYERS: usize = 1;
/// Init bound multiplier of the final (linear) encoder layer.
const ENCODER_OUTPUT_GAIN: f64 = 9.0;

impl PseudoTextEncoder {
    pub fn new(seed: u64, d_tok: usize, d: usize) -> Self {
        // Expansive init (gain > 1): small input differences — e.g. a
        // one-token change inside a long shared template — must survive
        // the tanh stack with enough margin for downstream attention to
        // separate the labels. Several mildly chaotic layers decorrelate
        // inputs that share most of their mass.
        let bound = 3.0 / (d_tok as f64).sqrt();
        let mut rng = stream_rng(seed, "pseudo_text_encoder");
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let mut layers = Vec::new();
        // Zero biases keep the encoder odd (encode(0) = 0): a nonzero bias
        // would add one shared vector to every label embedding, and that
        // shared component turns into per-sample ranking noise downstream.
        for _ in 0..ENCODER_HIDDEN_LAYERS {
            layers.push((draw(d_tok * d_tok), vec![0.0; d_tok], d_tok, d_tok));
        }
        // Wider output layer: embedding norms around 3–4 √d keep the
        // dot-product attention scores downstream (scaled by 1/√d against
        // ±1/√d-initialized projections) large enough that softmax maps
        // start informative rather than uniform.
        let out_bound = ENCODER_OUTPUT_GAIN / (d_tok as f64).sqrt();
        let out_w: Vec<f64> =
            (0..d_tok * d).map(|_| rng.gen_range(-out_bound..out_bound)).collect();
        layers.push((out_w, vec![0.0; d], d_tok, d));
        PseudoTextEncoder { d_tok, d, layers }
    }

    /// Hash of the weight bytes; used by tests to assert the encoder stays
    /// frozen.
    pub fn weight_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for (w, b, _, _) in &self.layers {
            for v in w.iter().chain(b) {
                for byte in v.to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }

    /// Plain (tape-free) encoding of one pooled vector.
    pub fn encode_vec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.d_tok {
            return Err(Error::Dimension(format!(
                "encoder input len {} vs d_tok {}",
                x.len(),
                self.d_tok
            )));
        }
        let last = self.layers.len() - 1;
        let mut cur = x.to_vec();
        for (idx, (w, b, din, dout)) in self.layers.iter().enumerate() {
            let mut next = b.clone();
            for (j, nj) in next.iter_mut().enumerate() {
                for i in 0..*din {
                    *nj += cur[i] * w[i * dout + j];
                }
                if idx != last {
                    *nj = nj.tanh();
                }
            }
            cur = next;
        }
        Ok(cur)
    }

    /// Mean-pools a nonempty sequence, then encodes it.
    pub fn encode_sequence(&self, seq: &[Vec<f64>]) -> Result<Vec<f64>> {
        if seq.is_empty() {
            return Err(Error::EmptyInput("encode_sequence: empty sequence".into()));
        }
        let mut pooled = vec![0.0; self.d_tok];
        for v in seq {
            if v.len() != self.d_tok {
                return Err(Error::Dimension(format!(
                    "sequence element len {} vs d_tok {}",
                    v.len(),
                    self.d_tok
                )));
            }
            for (p, x) in pooled.iter_mut().zip(v) {
                *p += x;
            }
        }
        for p in &mut pooled {
            *p /= seq.len() as f64;
        }
        self.encode_vec(&pooled)
    }

    /// Encodes each row of `x` (`[n, d_tok]`) on the tape. The weights are
    /// loaded as constants, so gradients flow into `x` but never into the
    /// encoder.
    pub fn encode_rows_on_tape(&self, tape: &Tape, x: &Tensor) -> Result<Tensor> {
        if x.shape.len() != 2 || x.shape[1] != self.d_tok {
            return Err(Error::Dimension(format!(
                "encoder rows: {:?} vs d_tok {}",
                x.shape, self.d_tok
            )));
        }
        let last = self.layers.len() - 1;
        let mut cur = x.clone();
        for (idx, (w, b, din, dout)) in self.layers.iter().enumerate() {
            let wt = tape.constant(vec![*din, *dout], w.clone());
            let bt = tape.constant(vec![*dout], b.clone());
            cur = tape.linear(&cur, &wt, Some(&bt))?;
            if idx != last {
                cur = tape.tanh(&cur);
            }
        }
        Ok(cur)
    }
}

/// `s_j`: word embedding of each label name, `[C, d_tok]` row-major.
pub fn name_embeddings(vocab: &Vocabulary, table: &TokenEmbeddingTable) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(vocab.len() * table.dim);
    for name in vocab.names() {
        out.extend(table.embed_text(name)?);
    }
    Ok(out)
}

/// Hard-prompt label embeddings `T_hard` (`[C, d]`): the template with
/// `[CLS]` replaced by each label name, tokenized, pooled and encoded.
/// Static for a whole run, so callers cache the result.
pub fn build_hard_prompts(
    vocab: &Vocabulary,
    table: &TokenEmbeddingTable,
    enc: &PseudoTextEncoder,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(vocab.len() * enc.d);
    for name in vocab.names() {
        let text = HARD_PROMPT_TEMPLATE.replace("[CLS]", name);
        let pooled = table.embed_text(&text)?;
        out.extend(enc.encode_vec(&pooled)?);
    }
    Ok(out)
}

/// Label embeddings from the bare names (no template, no prompts); used as
/// the static category centers of the baseline modes.
pub fn build_name_encodings(
    vocab: &Vocabulary,
    table: &TokenEmbeddingTable,
    enc: &PseudoTextEncoder,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(vocab.len() * enc.d);
    for name in vocab.names() {
        let pooled = table.embed_text(name)?;
        out.extend(enc.encode_vec(&pooled)?);
    }
    Ok(out)
}

/// Soft-prompt label embeddings `T_soft` (tape-free reference path):
/// row `j` encodes the sequence `[p_1 .. p_L, s_j]`.
pub fn build_soft_prompts(
    vocab: &Vocabulary,
    table: &TokenEmbeddingTable,
    enc: &PseudoTextEncoder,
    bank: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(vocab.len() * enc.d);
    for name in vocab.names() {
        let mut seq: Vec<Vec<f64>> = bank.to_vec();
        seq.push(table.embed_text(name)?);
        out.extend(enc.encode_sequence(&seq)?);
    }
    Ok(out)
}

/// Tape version of [`build_soft_prompts`]: `s_names` is the constant
/// `[C, d_tok]` matrix of name embeddings and `prompt_mean` the mean of the
/// L prompt tokens (absent when L = 0). Row `j` pools to
/// `(L * prompt_mean + s_j) / (L + 1)`, identical to mean-pooling the full
/// sequence.
pub fn build_soft_prompts_on_tape(
    tape: &Tape,
    enc: &PseudoTextEncoder,
    s_names: &Tensor,
    prompt_mean: Option<&Tensor>,
    l: usize,
) -> Result<Tensor> {
    let pooled = match prompt_mean {
        Some(q) if l > 0 => {
            let scale_s = 1.0 / (l as f64 + 1.0);
            let s_scaled = tape.scale(s_names, scale_s);
            let q_scaled = tape.scale(q, l as f64 * scale_s);
            tape.add_row_vec(&s_scaled, &q_scaled)?
        }
        _ => tape.constant(s_names.shape.clone(), tape.values(s_names)),
    };
    enc.encode_rows_on_tape(tape, &pooled)
}
