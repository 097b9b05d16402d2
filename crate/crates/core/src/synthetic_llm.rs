//! A seeded, frozen toy causal transformer standing in for the language
//! model, and a generator for small synthetic retrieval tasks.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hidden_states::{LayeredStates, Qrels, TextRecord, TrainExample};
use crate::ops::{affine, gelu, layer_norm, masked_softmax};
use crate::tensor::Mat;

const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmulatorConfig {
    pub seed: u64,
    pub vocab_size: usize,
    pub d_model: usize,
    /// Number of transformer blocks; there are `n_layers + 1` emission points.
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
}

impl Default for EmulatorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            vocab_size: 256,
            d_model: 64,
            n_layers: 8,
            n_heads: 4,
            max_seq_len: 64,
        }
    }
}

impl EmulatorConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("emulator {name} must be at least 1")));
            }
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "emulator d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    /// Number of hidden-state emission points (embedding output included).
    pub fn emission_points(&self) -> usize {
        self.n_layers + 1
    }
}

#[derive(Debug, Clone, PartialEq)]
struct EmulatorBlock {
    ln1_gain: Mat,
    ln1_bias: Mat,
    w_qkv: Mat,
    b_qkv: Mat,
    w_out: Mat,
    b_out: Mat,
    ln2_gain: Mat,
    ln2_bias: Mat,
    w_fc: Mat,
    b_fc: Mat,
    w_proj: Mat,
    b_proj: Mat,
}

/// Frozen pre-norm causal transformer. There is no way to mutate the
/// weights after [`Emulator::build`]:
///
/// ```compile_fail
/// use lmort_core::synthetic_llm::{Emulator, EmulatorConfig};
/// let mut emu = Emulator::build(EmulatorConfig::default()).unwrap();
/// emu.token_embedding.fill(0.0);
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct Emulator {
    config: EmulatorConfig,
    token_embedding: Mat,
    position_embedding: Mat,
    blocks: Vec<EmulatorBlock>,
}

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| normal.sample(rng)).collect())
}

impl Emulator {
    pub fn build(config: EmulatorConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let token_embedding = gaussian(config.vocab_size, d, &mut rng);
        let position_embedding = gaussian(config.max_seq_len, d, &mut rng);
        let ones = Mat::from_vec(1, d, vec![1.0; d]);
        let blocks = (0..config.n_layers)
            .map(|_| EmulatorBlock {
                ln1_gain: ones.clone(),
                ln1_bias: Mat::zeros(1, d),
                w_qkv: gaussian(d, 3 * d, &mut rng),
                b_qkv: Mat::zeros(1, 3 * d),
                w_out: gaussian(d, d, &mut rng),
                b_out: Mat::zeros(1, d),
                ln2_gain: ones.clone(),
                ln2_bias: Mat::zeros(1, d),
                w_fc: gaussian(d, 4 * d, &mut rng),
                b_fc: Mat::zeros(1, 4 * d),
                w_proj: gaussian(4 * d, d, &mut rng),
                b_proj: Mat::zeros(1, d),
            })
            .collect();
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
        })
    }

    pub fn config(&self) -> &EmulatorConfig {
        &self.config
    }

    /// All weights flattened in a fixed order.
    pub fn flat_weights(&self) -> Vec<f64> {
        let mut out = Vec::new();
        out.extend_from_slice(self.token_embedding.as_slice());
        out.extend_from_slice(self.position_embedding.as_slice());
        for b in &self.blocks {
            for m in [
                &b.ln1_gain, &b.ln1_bias, &b.w_qkv, &b.b_qkv, &b.w_out, &b.b_out, &b.ln2_gain,
                &b.ln2_bias, &b.w_fc, &b.b_fc, &b.w_proj, &b.b_proj,
            ] {
                out.extend_from_slice(m.as_slice());
            }
        }
        out
    }

    fn causal_attention(&self, block: &EmulatorBlock, x: &Mat) -> Mat {
        let (n, d) = x.shape();
        let heads = self.config.n_heads;
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let qkv = affine(x, &block.w_qkv, &block.b_qkv);
        let mut ctx = Mat::zeros(n, d);
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            let (qo, ko, vo) = (h * dk, d + h * dk, 2 * d + h * dk);
            for t in 0..n {
                let q = &qkv.row(t)[qo..qo + dk];
                for (s, score) in scores.iter_mut().enumerate().take(t + 1) {
                    let k = &qkv.row(s)[ko..ko + dk];
                    *score = q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * scale;
                }
                masked_softmax(&mut scores[..t + 1], |_| true);
                let out = &mut ctx.row_mut(t)[qo..qo + dk];
                for (s, &p) in scores.iter().enumerate().take(t + 1) {
                    let v = &qkv.row(s)[vo..vo + dk];
                    for (o, &vv) in out.iter_mut().zip(v) {
                        *o += p * vv;
                    }
                }
            }
        }
        affine(&ctx, &block.w_out, &block.b_out)
    }

    /// Runs the frozen model over `tokens` and keeps the hidden states at
    /// `layer_indices` (0 = embedding output).
    pub fn encode_layers(
        &self,
        sequence_id: &str,
        tokens: &[u32],
        layer_indices: &[u32],
    ) -> Result<LayeredStates> {
        let cfg = &self.config;
        if tokens.is_empty() {
            return Err(Error::Data(format!("sequence {sequence_id:?} is empty")));
        }
        if tokens.len() > cfg.max_seq_len {
            return Err(Error::Data(format!(
                "sequence {sequence_id:?} has {} tokens, max_seq_len is {}",
                tokens.len(),
                cfg.max_seq_len
            )));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
            return Err(Error::Data(format!(
                "sequence {sequence_id:?}: token {bad} is outside vocabulary of {}",
                cfg.vocab_size
            )));
        }
        if layer_indices.is_empty() || layer_indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Config(format!(
                "layer indices must be non-empty, unique and ascending, got {layer_indices:?}"
            )));
        }
        if let Some(&bad) = layer_indices
            .iter()
            .find(|&&l| l as usize >= cfg.emission_points())
        {
            return Err(Error::Config(format!(
                "layer {bad} out of range; emulator has {} emission points",
                cfg.emission_points()
            )));
        }

        let n = tokens.len();
        let d = cfg.d_model;
        let mut h = Mat::zeros(n, d);
        for (t, &tok) in tokens.iter().enumerate() {
            let e = self.token_embedding.row(tok as usize);
            let p = self.position_embedding.row(t);
            for ((o, &a), &b) in h.row_mut(t).iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }
        let last = *layer_indices.last().unwrap() as usize;
        let mut states = Vec::with_capacity(layer_indices.len());
        let mut keep = |layer: usize, h: &Mat| {
            if layer_indices.binary_search(&(layer as u32)).is_ok() {
                states.push(h.to_f32());
            }
        };
        keep(0, &h);
        for (i, block) in self.blocks.iter().enumerate().take(last) {
            let (a, _) = layer_norm(&h, &block.ln1_gain, &block.ln1_bias, LN_EPS);
            h.add_assign(&self.causal_attention(block, &a));
            let (m, _) = layer_norm(&h, &block.ln2_gain, &block.ln2_bias, LN_EPS);
            let hidden = affine(&m, &block.w_fc, &block.b_fc).map(gelu);
            h.add_assign(&affine(&hidden, &block.w_proj, &block.b_proj));
            keep(i + 1, &h);
        }
        Ok(LayeredStates {
            sequence_id: sequence_id.to_string(),
            d_model: d,
            layer_indices: layer_indices.to_vec(),
            states,
            attention_mask: vec![true; n],
        })
    }

    /// Every emission point, `0..=n_layers`.
    pub fn all_layers(&self) -> Vec<u32> {
        (0..self.config.emission_points() as u32).collect()
    }
}

/// Byte-level tokenization, truncated to `max_len` tokens.
pub fn tokenize_bytes(text: &str, max_len: usize) -> Vec<u32> {
    text.bytes().take(max_len).map(u32::from).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSpec {
    pub seed: u64,
    pub n_queries: usize,
    pub n_passages: usize,
    pub positives_per_query: usize,
    pub negatives_per_query: usize,
    /// Per-token substitution probability when deriving a query from its
    /// positive passage.
    pub noise_level: f64,
    pub vocab_size: usize,
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            n_queries: 100,
            n_passages: 1000,
            positives_per_query: 1,
            negatives_per_query: 4,
            noise_level: 0.15,
            vocab_size: 256,
            min_len: 16,
            max_len: 32,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub id: String,
    pub tokens: Vec<u32>,
}

impl TokenSequence {
    pub fn to_text_record(&self) -> TextRecord {
        let text = self
            .tokens
            .iter()
            .map(u32::to_string)
            .collect::<Vec<_>>()
            .join(" ");
        TextRecord {
            id: self.id.clone(),
            text,
            tokens: Some(self.tokens.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticTask {
    pub queries: Vec<TokenSequence>,
    pub corpus: Vec<TokenSequence>,
    pub qrels: Qrels,
    pub train_examples: Vec<TrainExample>,
}

impl SyntheticTask {
    /// (query, positive passage) pairs, in query order.
    pub fn positive_pairs(&self) -> Vec<(String, String)> {
        self.train_examples
            .iter()
            .flat_map(|e| {
                e.positive_ids
                    .iter()
                    .map(move |p| (e.query_id.clone(), p.clone()))
            })
            .collect()
    }
}

fn noisy_copy(tokens: &[u32], noise: f64, vocab: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    tokens
        .iter()
        .map(|&t| {
            if noise > 0.0 && rng.random::<f64>() < noise {
                // substitute with a different token
                let r = rng.random_range(0..vocab as u32 - 1);
                if r >= t {
                    r + 1
                } else {
                    r
                }
            } else {
                t
            }
        })
        .collect()
}

/// Builds a retrieval task: random passages, queries that are noisy copies
/// of their positive passages, negatives drawn from the rest of the corpus.
pub fn make_synthetic_task(spec: &TaskSpec) -> Result<SyntheticTask> {
    if spec.positives_per_query == 0 {
        return Err(Error::Config("positives_per_query must be at least 1".into()));
    }
    if spec.n_passages < spec.positives_per_query + spec.negatives_per_query {
        return Err(Error::Config(format!(
            "infeasible task: {} passages cannot supply {} positives + {} negatives",
            spec.n_passages, spec.positives_per_query, spec.negatives_per_query
        )));
    }
    if spec.n_queries * spec.positives_per_query > spec.n_passages {
        return Err(Error::Config(format!(
            "infeasible task: {} queries x {} positives exceed {} passages",
            spec.n_queries, spec.positives_per_query, spec.n_passages
        )));
    }
    if !(0.0..=1.0).contains(&spec.noise_level) {
        return Err(Error::Config(format!(
            "noise_level {} outside [0, 1]",
            spec.noise_level
        )));
    }
    if spec.vocab_size < 2 || spec.min_len == 0 || spec.min_len > spec.max_len {
        return Err(Error::Config(
            "task needs vocab_size >= 2 and 1 <= min_len <= max_len".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut corpus: Vec<TokenSequence> = (0..spec.n_passages)
        .map(|i| {
            let len = rng.random_range(spec.min_len..=spec.max_len);
            TokenSequence {
                id: format!("p{i}"),
                tokens: (0..len)
                    .map(|_| rng.random_range(0..spec.vocab_size as u32))
                    .collect(),
            }
        })
        .collect();

    let mut order: Vec<usize> = (0..spec.n_passages).collect();
    order.shuffle(&mut rng);

    let mut queries = Vec::with_capacity(spec.n_queries);
    let mut qrels = Qrels::new();
    let mut train_examples = Vec::with_capacity(spec.n_queries);
    for qi in 0..spec.n_queries {
        let pos_idx = &order[qi * spec.positives_per_query..(qi + 1) * spec.positives_per_query];
        let base = corpus[pos_idx[0]].tokens.clone();
        for &extra in &pos_idx[1..] {
            corpus[extra].tokens = noisy_copy(&base, spec.noise_level, spec.vocab_size, &mut rng);
        }
        let query_id = format!("q{qi}");
        queries.push(TokenSequence {
            id: query_id.clone(),
            tokens: noisy_copy(&base, spec.noise_level, spec.vocab_size, &mut rng),
        });
        let positives: BTreeSet<usize> = pos_idx.iter().copied().collect();
        let candidates: Vec<usize> = (0..spec.n_passages)
            .filter(|i| !positives.contains(i))
            .collect();
        let negatives: Vec<usize> = candidates
            .choose_multiple(&mut rng, spec.negatives_per_query)
            .copied()
            .collect();
        for &p in pos_idx {
            qrels.insert(&query_id, &corpus[p].id, 1);
        }
        train_examples.push(TrainExample {
            query_id,
            positive_ids: pos_idx.iter().map(|&p| corpus[p].id.clone()).collect(),
            negative_ids: negatives.iter().map(|&p| corpus[p].id.clone()).collect(),
        });
    }
    Ok(SyntheticTask {
        queries,
        corpus,
        qrels,
        train_examples,
    })
}

/// Encodes every sequence, keeping `layers`. Runs in parallel; output
/// order follows input order.
pub fn encode_sequences(
    emulator: &Emulator,
    sequences: &[TokenSequence],
    layers: &[u32],
) -> Result<Vec<LayeredStates>> {
    use rayon::prelude::*;
    sequences
        .par_iter()
        .map(|s| emulator.encode_layers(&s.id, &s.tokens, layers))
        .collect()
}
