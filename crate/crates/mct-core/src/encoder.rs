//! Image feature encoder: projects bottom-up region features to model width
//! and applies a stack of multi-head attention blocks.
//!
//! Regions are an unordered detection set, so no positional encoding is added
//! and the whole encoder is permutation-equivariant over rows.

use serde::{Deserialize, Serialize};

use crate::init::{glorot_uniform, substream};
use crate::tensor::{Mask, Result, Tape, Tensor, TensorError};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Width of the raw region descriptors (bottom-up features).
    pub d_feat: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_head: usize,
    pub d_ffn: usize,
    /// Number of stacked attention blocks.
    pub depth: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        // Full-scale dimensions; tests use `desk`.
        EncoderConfig {
            d_feat: 2048,
            d_model: 1024,
            n_heads: 8,
            d_head: 128,
            d_ffn: 4096,
            depth: 2,
        }
    }
}

impl EncoderConfig {
    /// Small dimensions for fast desk-scale runs and tests.
    pub fn desk() -> Self {
        EncoderConfig {
            d_feat: 16,
            d_model: 32,
            n_heads: 4,
            d_head: 8,
            d_ffn: 64,
            depth: 2,
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
        if self.d_feat == 0 || self.d_ffn == 0 {
            return Err("dimensions must be positive".into());
        }
        Ok(())
    }
}

/// One image's detected-region descriptor matrix, one row per region.
#[derive(Clone, Debug)]
pub struct RegionFeatures {
    pub image_id: String,
    pub matrix: Tensor,
}

impl RegionFeatures {
    pub fn num_regions(&self) -> usize {
        self.matrix.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.matrix.shape()[1]
    }
}

/// Query/key/value projections for a single attention head.
#[derive(Clone, Debug)]
pub struct AttentionHeadParams {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

impl AttentionHeadParams {
    pub fn init(d_model: usize, d_head: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        AttentionHeadParams {
            w_q: glorot_uniform(d_model, d_head, rng),
            w_k: glorot_uniform(d_model, d_head, rng),
            w_v: glorot_uniform(d_model, d_head, rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlockParams {
    pub heads: Vec<AttentionHeadParams>,
    /// Output projection applied to the concatenated head outputs.
    pub g_out: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
    pub ffn_g1: Tensor,
    pub ffn_b1: Tensor,
    pub ffn_g2: Tensor,
    pub ffn_b2: Tensor,
}

impl EncoderBlockParams {
    pub fn init(cfg: &EncoderConfig, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let heads = (0..cfg.n_heads)
            .map(|_| AttentionHeadParams::init(cfg.d_model, cfg.d_head, rng))
            .collect();
        EncoderBlockParams {
            heads,
            g_out: glorot_uniform(cfg.d_model, cfg.d_model, rng),
            ln1_gain: Tensor::full(vec![cfg.d_model], 1.0),
            ln1_bias: Tensor::zeros(vec![cfg.d_model]),
            ln2_gain: Tensor::full(vec![cfg.d_model], 1.0),
            ln2_bias: Tensor::zeros(vec![cfg.d_model]),
            ffn_g1: glorot_uniform(cfg.d_model, cfg.d_ffn, rng),
            ffn_b1: Tensor::zeros(vec![cfg.d_ffn]),
            ffn_g2: glorot_uniform(cfg.d_ffn, cfg.d_model, rng),
            ffn_b2: Tensor::zeros(vec![cfg.d_model]),
        }
    }
}

/// Feature projection plus the block stack.
#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    pub blocks: Vec<EncoderBlockParams>,
}

impl EncoderParams {
    pub fn init(cfg: &EncoderConfig, seed: u64) -> Self {
        let mut rng = substream(seed, "encoder");
        EncoderParams {
            proj_w: glorot_uniform(cfg.d_feat, cfg.d_model, &mut rng),
            proj_b: Tensor::zeros(vec![cfg.d_model]),
            blocks: (0..cfg.depth)
                .map(|_| EncoderBlockParams::init(cfg, &mut rng))
                .collect(),
        }
    }
}

pub const LN_EPS: f64 = 1e-5;
pub const MASK_FILL: f64 = -1e9;

/// Projects raw region features to model width: relu(U W + b).
pub fn project_features(
    tape: &mut Tape,
    features: &Tensor,
    proj_w: &Tensor,
    proj_b: &Tensor,
) -> Result<Tensor> {
    let (_, d_feat) = features.dims2("project_features")?;
    let (w_rows, _) = proj_w.dims2("project_features")?;
    if d_feat != w_rows {
        return Err(TensorError::DimMismatch {
            op: "project_features",
            left: features.shape().to_vec(),
            right: proj_w.shape().to_vec(),
        });
    }
    let projected = tape.matmul(features, proj_w)?;
    let shifted = tape.add_row(&projected, proj_b)?;
    Ok(tape.relu(&shifted))
}

/// Scaled dot-product attention for one head:
/// softmax(q_src W_q (k_src W_k)^T / sqrt(d_head)) (v_src W_v).
/// A mask, when given, pushes disallowed scores to a large negative constant
/// before the softmax.
pub fn attend(
    tape: &mut Tape,
    q_src: &Tensor,
    k_src: &Tensor,
    v_src: &Tensor,
    head: &AttentionHeadParams,
    mask: Option<&Mask>,
) -> Result<Tensor> {
    Ok(attend_detailed(tape, q_src, k_src, v_src, head, mask)?.0)
}

/// As [`attend`] but also returns the row-stochastic attention weights.
pub fn attend_detailed(
    tape: &mut Tape,
    q_src: &Tensor,
    k_src: &Tensor,
    v_src: &Tensor,
    head: &AttentionHeadParams,
    mask: Option<&Mask>,
) -> Result<(Tensor, Tensor)> {
    let q = tape.matmul(q_src, &head.w_q)?;
    let k = tape.matmul(k_src, &head.w_k)?;
    let v = tape.matmul(v_src, &head.w_v)?;
    let d_head = q.shape()[1];
    let kt = tape.transpose(&k)?;
    let scores = tape.matmul(&q, &kt)?;
    let scaled = tape.scale(&scores, 1.0 / (d_head as f64).sqrt());
    let gated = match mask {
        Some(m) => tape.masked_fill(&scaled, m, MASK_FILL)?,
        None => scaled,
    };
    let weights = tape.softmax_rows(&gated)?;
    let out = tape.matmul(&weights, &v)?;
    Ok((out, weights))
}

/// Runs every head, concatenates the per-head outputs along columns and
/// applies the output projection.
pub fn multi_head_qkv(
    tape: &mut Tape,
    q_src: &Tensor,
    kv_src: &Tensor,
    heads: &[AttentionHeadParams],
    g_out: &Tensor,
    mask: Option<&Mask>,
) -> Result<Tensor> {
    let mut parts = Vec::with_capacity(heads.len());
    for head in heads {
        parts.push(attend(tape, q_src, kv_src, kv_src, head, mask)?);
    }
    let concat = tape.concat_cols(&parts)?;
    tape.matmul(&concat, g_out)
}

/// Self-attention over `x` with this block's heads and output projection.
pub fn multi_head(tape: &mut Tape, x: &Tensor, block: &EncoderBlockParams) -> Result<Tensor> {
    multi_head_qkv(tape, x, x, &block.heads, &block.g_out, None)
}

/// Two-layer feed-forward with relu: relu(x G1 + b1) G2 + b2.
pub fn ffn(
    tape: &mut Tape,
    x: &Tensor,
    g1: &Tensor,
    b1: &Tensor,
    g2: &Tensor,
    b2: &Tensor,
) -> Result<Tensor> {
    let h = tape.matmul(x, g1)?;
    let h = tape.add_row(&h, b1)?;
    let h = tape.relu(&h);
    let out = tape.matmul(&h, g2)?;
    tape.add_row(&out, b2)
}

/// One encoder block: attention sublayer then feed-forward sublayer, each
/// with a residual connection and layer norm.
pub fn encoder_block(tape: &mut Tape, u_prev: &Tensor, block: &EncoderBlockParams) -> Result<Tensor> {
    let attended = multi_head(tape, u_prev, block)?;
    let sum = tape.add(u_prev, &attended)?;
    let c = tape.layer_norm(&sum, &block.ln1_gain, &block.ln1_bias, LN_EPS)?;
    let f = ffn(
        tape,
        &c,
        &block.ffn_g1,
        &block.ffn_b1,
        &block.ffn_g2,
        &block.ffn_b2,
    )?;
    let sum2 = tape.add(&c, &f)?;
    tape.layer_norm(&sum2, &block.ln2_gain, &block.ln2_bias, LN_EPS)
}

/// Folds the block stack over the projected features, producing the image
/// memory the decoder attends to.
pub fn encode(tape: &mut Tape, u0: &Tensor, blocks: &[EncoderBlockParams]) -> Result<Tensor> {
    if blocks.is_empty() {
        return Err(TensorError::EmptyInput { op: "encode" });
    }
    let mut u = u0.clone();
    for block in blocks {
        u = encoder_block(tape, &u, block)?;
    }
    Ok(u)
}

/// Full image path: project then encode.
pub fn encode_features(tape: &mut Tape, features: &Tensor, params: &EncoderParams) -> Result<Tensor> {
    let u0 = project_features(tape, features, &params.proj_w, &params.proj_b)?;
    encode(tape, &u0, &params.blocks)
}
