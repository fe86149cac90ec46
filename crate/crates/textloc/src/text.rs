//! Hint text encoding: template vocabulary, tokenization, and the
//! intra/inter hint transformer encoders.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

use crate::attention::{htm_block, init_htm, AttentionConfig};
use crate::autodiff::{Graph, NodeId};
use crate::error::{Result, TextLocError};
use crate::nn::{param, ParamStore};
use crate::scene::{Direction, SceneSpec};

const TEMPLATE_WORDS: &[&str] = &["the", "pose", "is", "on", "of", "a"];

const ALL_DIRECTIONS: [Direction; 9] = [
    Direction::North,
    Direction::NorthEast,
    Direction::East,
    Direction::SouthEast,
    Direction::South,
    Direction::SouthWest,
    Direction::West,
    Direction::NorthWest,
    Direction::OnTop,
];

/// Token table over the closed hint-template grammar plus a reserved
/// unknown id (the last id).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(mut tokens: Vec<String>) -> Self {
        tokens.sort();
        tokens.dedup();
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocabulary { tokens, index }
    }

    /// Closure of every word the hint template can produce for this scene.
    pub fn from_scene_spec(spec: &SceneSpec) -> Self {
        let mut words: Vec<String> = Vec::new();
        for w in TEMPLATE_WORDS {
            words.push((*w).to_string());
        }
        for d in ALL_DIRECTIONS {
            words.extend(split_words(&d.to_string()));
        }
        for (name, _) in &spec.color_palette {
            words.extend(split_words(name));
        }
        for name in &spec.class_palette {
            words.extend(split_words(name));
        }
        Vocabulary::from_tokens(words)
    }

    /// Rebuild the lookup index after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn unknown_id(&self) -> usize {
        self.tokens.len()
    }

    /// Number of ids, including the unknown id.
    pub fn size(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn id_of(&self, token: &str) -> usize {
        self.index
            .get(token)
            .copied()
            .unwrap_or_else(|| self.unknown_id())
    }

    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        split_words(text).iter().map(|w| self.id_of(w)).collect()
    }
}

/// Lowercase, strip punctuation (keeping intra-word hyphens), split on
/// whitespace.
pub fn split_words(text: &str) -> Vec<String> {
    let cleaned: String = text
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' {
                c
            } else {
                ' '
            }
        })
        .collect();
    cleaned
        .split_whitespace()
        .map(|w| w.trim_matches('-').to_string())
        .filter(|w| !w.is_empty())
        .collect()
}

/// Standard sinusoidal positional encodings, len x d.
pub fn sinusoidal_positional_encoding(len: usize, d: usize) -> Array2<f64> {
    let mut pe = Array2::zeros((len, d));
    for pos in 0..len {
        for i in 0..d {
            let exponent = 2.0 * ((i / 2) as f64) / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            pe[[pos, i]] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    pe
}

pub fn init_text_encoder(
    store: &mut ParamStore,
    prefix: &str,
    vocab_size: usize,
    cfg: &AttentionConfig,
    rng: &mut rand_chacha::ChaCha20Rng,
) {
    store.init_matrix(&format!("{prefix}.embed"), vocab_size, cfg.model_dim, rng);
    init_htm(store, &format!("{prefix}.intra"), cfg, rng);
    init_htm(store, &format!("{prefix}.inter"), cfg, rng);
}

/// Token embeddings + sinusoidal positions through one pooled transformer
/// block. Returns a d-vector node.
pub fn intra_hint_encode(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    token_ids: &[usize],
    cfg: &AttentionConfig,
) -> Result<NodeId> {
    if token_ids.is_empty() {
        return Err(TextLocError::Argument("intra_hint_encode: empty token sequence".into()));
    }
    let embed = param(g, store, &format!("{prefix}.embed"));
    let vocab_size = g.value(embed).shape()[0];
    for &id in token_ids {
        if id >= vocab_size {
            return Err(TextLocError::Index(format!(
                "token id {id} outside vocabulary of size {vocab_size}"
            )));
        }
    }
    let rows = g.gather_rows(embed, token_ids);
    let pe = g.constant(sinusoidal_positional_encoding(token_ids.len(), cfg.model_dim));
    let x = g.add(rows, pe);
    htm_block(g, store, &format!("{prefix}.intra"), x, cfg)
}

/// Pool an unordered set of per-hint vectors (m x d) into a unit-norm
/// description vector. No positional encodings.
pub fn inter_hint_encode(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    hint_vectors: NodeId,
    cfg: &AttentionConfig,
) -> Result<NodeId> {
    let pooled = htm_block(g, store, &format!("{prefix}.inter"), hint_vectors, cfg)?;
    Ok(g.normalize_l2(pooled))
}

/// Full text path: tokenize each hint, encode, pool into F^T.
/// Also returns the stacked per-hint vectors (m x d) for the fine stage.
pub fn encode_hints(
    g: &mut Graph,
    store: &ParamStore,
    prefix: &str,
    vocab: &Vocabulary,
    hints: &[String],
    cfg: &AttentionConfig,
) -> Result<(NodeId, NodeId)> {
    if hints.is_empty() {
        return Err(TextLocError::Argument("encode_hints: empty hint list".into()));
    }
    let mut vecs = Vec::with_capacity(hints.len());
    for h in hints {
        let ids = vocab.tokenize(h);
        if ids.is_empty() {
            return Err(TextLocError::Argument(format!("hint with no tokens: {h:?}")));
        }
        vecs.push(intra_hint_encode(g, store, prefix, &ids, cfg)?);
    }
    let stacked = g.stack_rows(&vecs);
    let pooled = inter_hint_encode(g, store, prefix, stacked, cfg)?;
    Ok((pooled, stacked))
}
