//! Multimodal transformer decoder: masked self-attention over word
//! embeddings, cross-modal attention against the encoded image memory, a
//! feed-forward sublayer, vocabulary projection, and greedy/beam generation.

use serde::{Deserialize, Serialize};

use crate::embedder::{BOS_ID, EOS_ID};
use crate::encoder::{ffn, multi_head_qkv, AttentionHeadParams, LN_EPS};
use crate::init::{glorot_uniform, substream};
use crate::model::{embed_sequence, Model, ModelParams};
use crate::tensor::{Mask, Result, Tape, Tensor, TensorError};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    /// Block count; the ablation harness sweeps this together with the
    /// encoder depth.
    pub depth: usize,
    /// Generation cap, counting every id including bos/eos.
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            d_model: 1024,
            n_heads: 8,
            d_head: 128,
            d_ffn: 4096,
            depth: 2,
            max_len: 20,
        }
    }
}

impl DecoderConfig {
    pub fn desk() -> Self {
        DecoderConfig {
            d_model: 32,
            n_heads: 4,
            d_head: 8,
            d_ffn: 64,
            depth: 2,
            max_len: 20,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.n_heads * self.d_head != self.d_model {
            return Err(format!(
                "n_heads ({}) x d_head ({}) must equal d_model ({})",
                self.n_heads, self.d_head, self.d_model
            ));
        }
        if self.depth == 0 {
            return Err("depth must be at least 1".into());
        }
        if self.max_len < 2 {
            return Err("max_len must be at least 2".into());
        }
        Ok(())
    }
}

/// One decoder block: self-attention, cross-attention and feed-forward
/// sublayers, each with its own layer norm. Cross-attention has parameters
/// distinct from self-attention.
#[derive(Clone, Debug)]
pub struct DecoderBlockParams {
    pub self_heads: Vec<AttentionHeadParams>,
    pub self_out: Tensor,
    pub cross_heads: Vec<AttentionHeadParams>,
    pub cross_out: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ln3_gain: Tensor,
    pub ln3_bias: Tensor,
    pub ffn_g1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_g2: Tensor,
    pub ffn_b2: Tensor,
}

impl DecoderBlockParams {
    pub fn init(cfg: &DecoderConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let heads = |rng: &mut rand_chacha::ChaCha8Rng| {
            (0..cfg.n_heads)
                .map(|_| AttentionHeadParams::init(cfg.d_model, cfg.d_head, rng))
                .collect::<Vec<_>>()
        };
        DecoderBlockParams {
            self_heads: heads(rng),
            self_out: glorot_uniform(cfg.d_model, cfg.d_model, rng),
            cross_heads: heads(rng),
            cross_out: glorot_uniform(cfg.d_model, cfg.d_model, rng),
            ln1_gain: Tensor::full(vec![cfg.d_model], 1.0),
            ln1_bias: Tensor::zeros(vec![cfg.d_model]),
            ln2_gain: Tensor::full(vec![cfg.d_model], 1.0),
            ln2_bias: Tensor::zeros(vec![cfg.d_model]),
            ln3_gain: Tensor::full(vec![cfg.d_model], 1.0),
            ln3_bias: Tensor::zeros(vec![cfg.d_model]),
            ffn_g1: glorot_uniform(cfg.d_model, cfg.d_ffn, rng),
            ffn_b1: Tensor::zeros(vec![cfg.d_ffn]),
            ffn_g2: glorot_uniform(cfg.d_ffn, cfg.d_model, rng),
            ffn_b2: Tensor::zeros(vec![cfg.d_model]),
        }
    }
}

/// Maps decoder rows to vocabulary logits.
#[derive(Clone, Debug)]
pub struct GeneratorParams {
    pub out_w: Tensor,
    pub out_b: Tensor,
}

impl GeneratorParams {
    pub fn init(d_model: usize, vocab: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "generator");
        GeneratorParams {
            out_w: glorot_uniform(d_model, vocab, &mut rng),
            out_b: Tensor::zeros(vec![vocab]),
        }
    }
}

/// Position (i, j) allowed iff j <= i, so no position attends forward.
pub fn causal_mask(g: usize) -> Mask {
    Mask::causal(g)
}

/// Self-attention with the causal mask, residual add, layer norm.
pub fn masked_self_attention(
    tape: &mut Tape,
    x: &Tensor,
    block: &DecoderBlockParams,
) -> Result<Tensor> {
    let g = x.shape()[0];
    let mask = causal_mask(g);
    let attended = multi_head_qkv(tape, x, x, &block.self_heads, &block.self_out, Some(&mask))?;
    let sum = tape.add(x, &attended)?;
    tape.layer_norm(&sum, &block.ln1_gain, &block.ln1_bias, LN_EPS)
}

/// Text queries attending over the image memory rows; residual plus norm.
pub fn cross_attention(
    tape: &mut Tape,
    d_m: &Tensor,
    memory: &Tensor,
    block: &DecoderBlockParams,
) -> Result<Tensor> {
    let attended = multi_head_qkv(tape, d_m, memory, &block.cross_heads, &block.cross_out, None)?;
    let sum = tape.add(d_m, &attended)?;
    tape.layer_norm(&sum, &block.ln2_gain, &block.ln2_bias, LN_EPS)
}

/// Full block: masked self-attention, cross-attention, feed-forward.
pub fn decoder_block(
    tape: &mut Tape,
    x: &Tensor,
    memory: &Tensor,
    block: &DecoderBlockParams,
) -> Result<Tensor> {
    let d_m = masked_self_attention(tape, x, block)?;
    let d_f = cross_attention(tape, &d_m, memory, block)?;
    let f = ffn(
        tape,
        &d_f,
        &block.ffn_g1,
        &block.ffn_b1,
        &block.ffn_g2,
        &block.ffn_b2,
    )?;
    let sum = tape.add(&d_f, &f)?;
    tape.layer_norm(&sum, &block.ln3_gain, &block.ln3_bias, LN_EPS)
}

/// Fixed sinusoidal positional encoding, G rows by d_model columns.
pub fn positional_encoding(g: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; g * d_model];
    for pos in 0..g {
        for i in 0..d_model / 2 {
            let rate = 1.0 / 10000f64.powf(2.0 * i as f64 / d_model as f64);
            data[pos * d_model + 2 * i] = (pos as f64 * rate).sin();
            if 2 * i + 1 < d_model {
                data[pos * d_model + 2 * i + 1] = (pos as f64 * rate).cos();
            }
        }
    }
    Tensor::from_vec(vec![g, d_model], data).expect("pe shape")
}

/// Teacher-forcing forward pass: embeds `token_ids` (mode-dependent), adds
/// positional encoding, runs the block stack against `memory`, and projects
/// to vocabulary logits. Row i is trained to predict `token_ids[i+1]`.
pub fn decode_logits(
    tape: &mut Tape,
    token_ids: &[u32],
    memory: &Tensor,
    model: &Model,
    params: &ModelParams,
) -> Result<Tensor> {
    if token_ids.first() != Some(&BOS_ID) {
        return Err(TensorError::EmptyInput {
            op: "decode_logits: sequence must start with bos",
        });
    }
    let embedded = embed_sequence(tape, token_ids, model, params)?;
    let pe = positional_encoding(token_ids.len(), model.decoder_cfg.d_model);
    let mut x = tape.add(&embedded, &pe)?;
    for block in &params.decoder_blocks {
        x = decoder_block(tape, &x, memory, block)?;
    }
    let logits = tape.matmul(&x, &params.generator.out_w)?;
    tape.add_row(&logits, &params.generator.out_b)
}

/// Log-softmax of one logits row, computed stably in plain f64.
fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Argmax with ties resolved to the lowest index.
fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn last_row_log_probs(
    ids: &[u32],
    memory: &Tensor,
    model: &Model,
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let logits = decode_logits(&mut tape, ids, memory, model, &model.params)?;
    let (g, v) = logits.dims2("generate")?;
    Ok(log_softmax_row(&logits.data()[(g - 1) * v..g * v]))
}

/// Greedy decoding: start from bos, append the argmax token of the last
/// logits row (ties to the lowest id), stop on eos or when the sequence
/// reaches max_len ids.
pub fn generate_greedy(memory: &Tensor, model: &Model) -> Result<Vec<u32>> {
    let max_len = model.decoder_cfg.max_len;
    let mut ids = vec![BOS_ID];
    while ids.len() < max_len {
        let lp = last_row_log_probs(&ids, memory, model)?;
        let next = argmax_lowest(&lp) as u32;
        ids.push(next);
        if next == EOS_ID {
            break;
        }
    }
    Ok(ids)
}

#[derive(Clone, Debug)]
struct Hypothesis {
    ids: Vec<u32>,
    sum_lp: f64,
}

impl Hypothesis {
    fn normalized(&self) -> f64 {
        self.sum_lp / (self.ids.len() - 1) as f64
    }
}

/// Length-normalized beam search (sum of log-probs divided by generated
/// length). `beam == 1` follows exactly the greedy path.
pub fn generate_beam(memory: &Tensor, model: &Model, beam: usize) -> Result<Vec<u32>> {
    if beam < 1 {
        return Err(TensorError::EmptyInput {
            op: "generate_beam: beam must be at least 1",
        });
    }
    let max_len = model.decoder_cfg.max_len;
    let mut live = vec![Hypothesis {
        ids: vec![BOS_ID],
        sum_lp: 0.0,
    }];
    let mut completed: Vec<Hypothesis> = Vec::new();

    while !live.is_empty() {
        // (cumulative score, token, source hypothesis index)
        let mut expansions: Vec<(f64, u32, usize)> = Vec::new();
        for (hi, hyp) in live.iter().enumerate() {
            let lp = last_row_log_probs(&hyp.ids, memory, model)?;
            for (tok, &l) in lp.iter().enumerate() {
                expansions.push((hyp.sum_lp + l, tok as u32, hi));
            }
        }
        expansions.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| a.1.cmp(&b.1))
                .then_with(|| a.2.cmp(&b.2))
        });

        let mut next_live = Vec::with_capacity(beam);
        for &(score, tok, hi) in expansions.iter().take(beam) {
            let mut ids = live[hi].ids.clone();
            ids.push(tok);
            let hyp = Hypothesis { ids, sum_lp: score };
            if tok == EOS_ID || hyp.ids.len() >= max_len {
                completed.push(hyp);
            } else {
                next_live.push(hyp);
            }
        }
        live = next_live;
    }

    completed.sort_by(|a, b| {
        b.normalized()
            .total_cmp(&a.normalized())
            .then_with(|| a.ids.cmp(&b.ids))
    });
    Ok(completed.into_iter().next().expect("beam produced a hypothesis").ids)
}

/// Length-normalized log-probability of a full id sequence (starting at
/// bos) under the model: the score beam search optimizes.
pub fn sequence_score(memory: &Tensor, model: &Model, ids: &[u32]) -> Result<f64> {
    if ids.len() < 2 {
        return Err(TensorError::EmptyInput {
            op: "sequence_score: need bos plus at least one token",
        });
    }
    let mut tape = Tape::new();
    let logits = decode_logits(&mut tape, ids, memory, model, &model.params)?;
    let (_, v) = logits.dims2("sequence_score")?;
    let mut sum = 0.0;
    for i in 0..ids.len() - 1 {
        let lp = log_softmax_row(&logits.data()[i * v..(i + 1) * v]);
        sum += lp[ids[i + 1] as usize];
    }
    Ok(sum / (ids.len() - 1) as f64)
}
