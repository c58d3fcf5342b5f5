//! Gradient verification over every differentiable operation family.
//!
//! Each family builds a small seeded instance, runs the analytic backward
//! pass, and compares against central finite differences. The scalar under
//! test is a random-weighted sum of the output: a plain sum would be blind
//! to most of the Jacobian (layer-norm rows sum to a constant, softmax rows
//! sum to one), leaving only float noise to compare.

use rand::Rng;

use crate::decoder::{self, DecoderBlockParams, DecoderConfig};
use crate::embedder::{self, CharVocab, ElmoConfig, ElmoParams, LstmCellParams};
use crate::encoder::{self, AttentionHeadParams, EncoderBlockParams, EncoderConfig};
use crate::init::seeded_rng;
use crate::tensor::{
    grad_check_multi_with, BackwardFault, Result, Tape, Tensor,
};

/// Reduces a tensor to a scalar against a fixed random weighting, so every
/// output coordinate influences the check.
pub fn readout(tape: &mut Tape, x: &Tensor, seed: u64) -> Result<Tensor> {
    let mut rng = seeded_rng(seed ^ 0x5eed);
    let w = Tensor::from_vec(
        x.shape().to_vec(),
        (0..x.numel()).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    let prod = tape.mul(x, &w)?;
    Ok(tape.sum_all(&prod))
}

fn random(shape: Vec<usize>, rng: &mut rand_chacha::ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("random tensor shape")
}

/// Result of one family check.
#[derive(Clone, Debug)]
pub struct FamilyReport {
    pub name: &'static str,
    pub max_rel_error: f64,
}

impl FamilyReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_error < tol
    }
}

pub const FAMILY_TOLERANCE: f64 = 1e-4;

/// Runs every operation family at small dimensions. `fault` injects a broken
/// backward rule so callers can confirm the checker reports failures.
pub fn check_all_families(seed: u64, fault: BackwardFault) -> Result<Vec<FamilyReport>> {
    let mut rng = seeded_rng(seed);
    let eps = 1e-5;
    let mut reports = Vec::new();

    // matmul
    {
        let a = random(vec![3, 4], &mut rng);
        let b = random(vec![4, 2], &mut rng);
        let err = grad_check_multi_with(
            |tape, args| {
                let out = tape.matmul(&args[0], &args[1])?;
                readout(tape, &out, seed)
            },
            &[a, b],
            eps,
            fault,
        )?;
        reports.push(FamilyReport {
            name: "matmul",
            max_rel_error: err,
        });
    }

    // softmax
    {
        let x = random(vec![3, 5], &mut rng);
        let err = grad_check_multi_with(
            |tape, args| {
                let out = tape.softmax_rows(&args[0])?;
                readout(tape, &out, seed)
            },
            &[x],
            eps,
            fault,
        )?;
        reports.push(FamilyReport {
            name: "softmax",
            max_rel_error: err,
        });
    }

    // layer_norm
    {
        let x = random(vec![3, 6], &mut rng);
        let gain = random(vec![6], &mut rng);
        let bias = random(vec![6], &mut rng);
        let err = grad_check_multi_with(
            |tape, args| {
                let out = tape.layer_norm(&args[0], &args[1], &args[2], 1e-5)?;
                readout(tape, &out, seed)
            },
            &[x, gain, bias],
            eps,
            fault,
        )?;
        reports.push(FamilyReport {
            name: "layer_norm",
            max_rel_error: err,
        });
    }

    // relu
    {
        let x = random(vec![3, 4], &mut rng);
        let err = grad_check_multi_with(
            |tape, args| {
                let out = tape.relu(&args[0]);
                readout(tape, &out, seed)
            },
            &[x],
            eps,
            fault,
        )?;
        reports.push(FamilyReport {
            name: "relu",
            max_rel_error: err,
        });
    }

    // attention head
    {
        let head = AttentionHeadParams::init(8, 4, &mut rng);
        let x = random(vec![3, 8], &mut rng);
        let inputs = vec![x, head.w_q.clone(), head.w_k.clone(), head.w_v.clone()];
        let err = grad_check_multi_with(
            |tape, args| {
                let h = AttentionHeadParams {
                    w_q: args[1].clone(),
                    w_k: args[2].clone(),
                    w_v: args[3].clone(),
                };
                let out = encoder::attend(tape, &args[0], &args[0], &args[0], &h, None)?;
                readout(tape, &out, seed)
            },
            &inputs,
            eps,
            fault,
        )?;
        reports.push(FamilyReport {
            name: "attention_head",
            max_rel_error: err,
        });
    }

    // encoder block
    {
        let cfg = EncoderConfig {
            d_feat: 6,
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ffn: 12,
            depth: 1,
        };
        let block = EncoderBlockParams::init(&cfg, &mut rng);
        let x = random(vec![3, 8], &mut rng);
        let inputs = vec![
            x,
            block.heads[0].w_q.clone(),
            block.heads[1].w_v.clone(),
            block.g_out.clone(),
            block.ln1_gain.clone(),
            block.ln2_bias.clone(),
            block.ffn_g1.clone(),
            block.ffn_g2.clone(),
        ];
        let err = grad_check_multi_with(
            |tape, args| {
                let mut b = block.clone();
                b.heads[0].w_q = args[1].clone();
                b.heads[1].w_v = args[2].clone();
                b.g_out = args[3].clone();
                b.ln1_gain = args[4].clone();
                b.ln2_bias = args[5].clone();
                b.ffn_g1 = args[6].clone();
                b.ffn_g2 = args[7].clone();
                let out = encoder::encoder_block(tape, &args[0], &b)?;
                readout(tape, &out, seed)
            },
            &inputs,
            eps,
            fault,
        )?;
        reports.push(FamilyReport {
            name: "encoder_block",
            max_rel_error: err,
        });
    }

    // decoder block
    {
        let cfg = DecoderConfig {
            d_model: 8,
            n_heads: 2,
            d_head: 4,
            d_ffn: 12,
            depth: 1,
            max_len: 8,
        };
        let block = DecoderBlockParams::init(&cfg, &mut rng);
        let x = random(vec![4, 8], &mut rng);
        let mem = random(vec![3, 8], &mut rng);
        let inputs = vec![
            x,
            mem,
            block.self_heads[0].w_k.clone(),
            block.cross_heads[1].w_q.clone(),
            block.cross_out.clone(),
            block.ln3_gain.clone(),
            block.ffn_g1.clone(),
        ];
        let err = grad_check_multi_with(
            |tape, args| {
                let mut b = block.clone();
                b.self_heads[0].w_k = args[2].clone();
                b.cross_heads[1].w_q = args[3].clone();
                b.cross_out = args[4].clone();
                b.ln3_gain = args[5].clone();
                b.ffn_g1 = args[6].clone();
                let out = decoder::decoder_block(tape, &args[0], &args[1], &b)?;
                readout(tape, &out, seed)
            },
            &inputs,
            eps,
            fault,
        )?;
        reports.push(FamilyReport {
            name: "decoder_block",
            max_rel_error: err,
        });
    }

    // LSTM cell
    {
        let p = LstmCellParams::init(6, 4, &mut rng);
        let x = random(vec![1, 6], &mut rng);
        let h0 = random(vec![1, 4], &mut rng);
        let c0 = random(vec![1, 4], &mut rng);
        let inputs = vec![
            x,
            h0,
            c0,
            p.w_i.clone(),
            p.u_f.clone(),
            p.b_o.clone(),
            p.w_g.clone(),
        ];
        let err = grad_check_multi_with(
            |tape, args| {
                let mut pp = p.clone();
                pp.w_i = args[3].clone();
                pp.u_f = args[4].clone();
                pp.b_o = args[5].clone();
                pp.w_g = args[6].clone();
                let (h, c) = embedder::lstm_cell(tape, &args[0], &args[1], &args[2], &pp)?;
                let hc = tape.concat_cols(&[h, c])?;
                readout(tape, &hc, seed)
            },
            &inputs,
            eps,
            fault,
        )?;
        reports.push(FamilyReport {
            name: "lstm_cell",
            max_rel_error: err,
        });
    }

    // ELMo mixer (full embed path: char encode + biLSTM + softmax mixing)
    {
        let chars = CharVocab::build(["a red cat and a blue dog"]);
        let cfg = ElmoConfig {
            layers: 1,
            emb: 8,
            d_char: 4,
            max_word_len: 8,
        };
        let params = ElmoParams::init(&cfg, chars.len(), seed ^ 0xe1_40);
        let words: Vec<String> = ["a", "red", "cat"].iter().map(|s| s.to_string()).collect();
        let inputs = vec![
            params.char_table.clone(),
            params.char_proj_w.clone(),
            params.mix_logits.clone(),
            params.gamma.clone(),
            params.lstm_layers[0].0.w_f.clone(),
            params.lstm_layers[0].1.u_g.clone(),
        ];
        let err = grad_check_multi_with(
            |tape, args| {
                let mut p = params.clone();
                p.char_table = args[0].clone();
                p.char_proj_w = args[1].clone();
                p.mix_logits = args[2].clone();
                p.gamma = args[3].clone();
                p.lstm_layers[0].0.w_f = args[4].clone();
                p.lstm_layers[0].1.u_g = args[5].clone();
                let out = embedder::elmo_embed(tape, &words, &chars, &p)?;
                readout(tape, &out, seed)
            },
            &inputs,
            eps,
            fault,
        )?;
        reports.push(FamilyReport {
            name: "elmo_mixer",
            max_rel_error: err,
        });
    }

    // cross-entropy
    {
        let logits = random(vec![4, 6], &mut rng);
        let err = grad_check_multi_with(
            |tape, args| {
                tape.cross_entropy_rows(&args[0], &[1, 0, 5, 2], &[true, true, true, false])
            },
            &[logits],
            eps,
            fault,
        )?;
        reports.push(FamilyReport {
            name: "cross_entropy",
            max_rel_error: err,
        });
    }

    Ok(reports)
}
