//! The full caption model: configuration, every learned parameter, the
//! mode-dependent decoder input embedding, and whole-image helpers.

use serde::{Deserialize, Serialize};

use crate::decoder::{self, DecoderBlockParams, DecoderConfig, GeneratorParams};
use crate::embedder::{
    elmo_embed_causal, standard_embed, CharVocab, ElmoConfig, ElmoParams, Vocabulary,
};
use crate::encoder::{encode_features, EncoderConfig, EncoderParams};
use crate::init::substream;
use crate::tensor::{Result, Tape, Tensor};

/// MCT uses the standard word embedding alone; ELMo-MCT adds the contextual
/// ELMo embedding elementwise on top of it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    #[serde(rename = "MCT")]
    Mct,
    #[serde(rename = "ELMo-MCT")]
    ElmoMct,
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Mode::Mct => write!(f, "MCT"),
            Mode::ElmoMct => write!(f, "ELMo-MCT"),
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "MCT" => Ok(Mode::Mct),
            "ELMo-MCT" => Ok(Mode::ElmoMct),
            other => Err(format!("unknown mode {other:?} (expected MCT or ELMo-MCT)")),
        }
    }
}

/// Every learned weight. ELMo parameters exist only in ELMo-MCT mode.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    /// |V| x d_model standard word embedding table.
    pub embed_table: Tensor,
    pub elmo: Option<ElmoParams>,
    pub decoder_blocks: Vec<DecoderBlockParams>,
    pub generator: GeneratorParams,
}

impl ModelParams {
    /// Canonical (name, tensor) traversal; the checkpoint manifest and the
    /// optimizer state both follow this order. Must mirror
    /// [`ModelParams::visit_mut`] exactly.
    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, &'a Tensor)) {
        f("encoder.proj_w".into(), &self.encoder.proj_w);
        f("encoder.proj_b".into(), &self.encoder.proj_b);
        for (i, b) in self.encoder.blocks.iter().enumerate() {
            for (h, head) in b.heads.iter().enumerate() {
                f(format!("encoder.block{i}.head{h}.w_q"), &head.w_q);
                f(format!("encoder.block{i}.head{h}.w_k"), &head.w_k);
                f(format!("encoder.block{i}.head{h}.w_v"), &head.w_v);
            }
            f(format!("encoder.block{i}.g_out"), &b.g_out);
            f(format!("encoder.block{i}.ln1_gain"), &b.ln1_gain);
            f(format!("encoder.block{i}.ln1_bias"), &b.ln1_bias);
            f(format!("encoder.block{i}.ln2_gain"), &b.ln2_gain);
            f(format!("encoder.block{i}.ln2_bias"), &b.ln2_bias);
            f(format!("encoder.block{i}.ffn_g1"), &b.ffn_g1);
            f(format!("encoder.block{i}.ffn_b1"), &b.ffn_b1);
            f(format!("encoder.block{i}.ffn_g2"), &b.ffn_g2);
            f(format!("encoder.block{i}.ffn_b2"), &b.ffn_b2);
        }
        f("embed.table".into(), &self.embed_table);
        if let Some(e) = &self.elmo {
            f("elmo.char_table".into(), &e.char_table);
            f("elmo.char_proj_w".into(), &e.char_proj_w);
            f("elmo.char_proj_b".into(), &e.char_proj_b);
            for (i, (fwd, bwd)) in e.lstm_layers.iter().enumerate() {
                for (dir, cell) in [("fwd", fwd), ("bwd", bwd)] {
                    f(format!("elmo.layer{i}.{dir}.w_i"), &cell.w_i);
                    f(format!("elmo.layer{i}.{dir}.u_i"), &cell.u_i);
                    f(format!("elmo.layer{i}.{dir}.b_i"), &cell.b_i);
                    f(format!("elmo.layer{i}.{dir}.w_f"), &cell.w_f);
                    f(format!("elmo.layer{i}.{dir}.u_f"), &cell.u_f);
                    f(format!("elmo.layer{i}.{dir}.b_f"), &cell.b_f);
                    f(format!("elmo.layer{i}.{dir}.w_g"), &cell.w_g);
                    f(format!("elmo.layer{i}.{dir}.u_g"), &cell.u_g);
                    f(format!("elmo.layer{i}.{dir}.b_g"), &cell.b_g);
                    f(format!("elmo.layer{i}.{dir}.w_o"), &cell.w_o);
                    f(format!("elmo.layer{i}.{dir}.u_o"), &cell.u_o);
                    f(format!("elmo.layer{i}.{dir}.b_o"), &cell.b_o);
                }
            }
            f("elmo.mix_logits".into(), &e.mix_logits);
            f("elmo.gamma".into(), &e.gamma);
        }
        for (i, b) in self.decoder_blocks.iter().enumerate() {
            for (h, head) in b.self_heads.iter().enumerate() {
                f(format!("decoder.block{i}.self{h}.w_q"), &head.w_q);
                f(format!("decoder.block{i}.self{h}.w_k"), &head.w_k);
                f(format!("decoder.block{i}.self{h}.w_v"), &head.w_v);
            }
            f(format!("decoder.block{i}.self_out"), &b.self_out);
            for (h, head) in b.cross_heads.iter().enumerate() {
                f(format!("decoder.block{i}.cross{h}.w_q"), &head.w_q);
                f(format!("decoder.block{i}.cross{h}.w_k"), &head.w_k);
                f(format!("decoder.block{i}.cross{h}.w_v"), &head.w_v);
            }
            f(format!("decoder.block{i}.cross_out"), &b.cross_out);
            f(format!("decoder.block{i}.ln1_gain"), &b.ln1_gain);
            f(format!("decoder.block{i}.ln1_bias"), &b.ln1_bias);
            f(format!("decoder.block{i}.ln2_gain"), &b.ln2_gain);
            f(format!("decoder.block{i}.ln2_bias"), &b.ln2_bias);
            f(format!("decoder.block{i}.ln3_gain"), &b.ln3_gain);
            f(format!("decoder.block{i}.ln3_bias"), &b.ln3_bias);
            f(format!("decoder.block{i}.ffn_g1"), &b.ffn_g1);
            f(format!("decoder.block{i}.ffn_b1"), &b.ffn_b1);
            f(format!("decoder.block{i}.ffn_g2"), &b.ffn_g2);
            f(format!("decoder.block{i}.ffn_b2"), &b.ffn_b2);
        }
        f("generator.out_w".into(), &self.generator.out_w);
        f("generator.out_b".into(), &self.generator.out_b);
    }

    /// Mutable traversal in the same canonical order as [`ModelParams::visit`].
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("encoder.proj_w".into(), &mut self.encoder.proj_w);
        f("encoder.proj_b".into(), &mut self.encoder.proj_b);
        for (i, b) in self.encoder.blocks.iter_mut().enumerate() {
            for (h, head) in b.heads.iter_mut().enumerate() {
                f(format!("encoder.block{i}.head{h}.w_q"), &mut head.w_q);
                f(format!("encoder.block{i}.head{h}.w_k"), &mut head.w_k);
                f(format!("encoder.block{i}.head{h}.w_v"), &mut head.w_v);
            }
            f(format!("encoder.block{i}.g_out"), &mut b.g_out);
            f(format!("encoder.block{i}.ln1_gain"), &mut b.ln1_gain);
            f(format!("encoder.block{i}.ln1_bias"), &mut b.ln1_bias);
            f(format!("encoder.block{i}.ln2_gain"), &mut b.ln2_gain);
            f(format!("encoder.block{i}.ln2_bias"), &mut b.ln2_bias);
            f(format!("encoder.block{i}.ffn_g1"), &mut b.ffn_g1);
            f(format!("encoder.block{i}.ffn_b1"), &mut b.ffn_b1);
            f(format!("encoder.block{i}.ffn_g2"), &mut b.ffn_g2);
            f(format!("encoder.block{i}.ffn_b2"), &mut b.ffn_b2);
        }
        f("embed.table".into(), &mut self.embed_table);
        if let Some(e) = &mut self.elmo {
            f("elmo.char_table".into(), &mut e.char_table);
            f("elmo.char_proj_w".into(), &mut e.char_proj_w);
            f("elmo.char_proj_b".into(), &mut e.char_proj_b);
            for (i, (fwd, bwd)) in e.lstm_layers.iter_mut().enumerate() {
                for (dir, cell) in [("fwd", fwd), ("bwd", bwd)] {
                    f(format!("elmo.layer{i}.{dir}.w_i"), &mut cell.w_i);
                    f(format!("elmo.layer{i}.{dir}.u_i"), &mut cell.u_i);
                    f(format!("elmo.layer{i}.{dir}.b_i"), &mut cell.b_i);
                    f(format!("elmo.layer{i}.{dir}.w_f"), &mut cell.w_f);
                    f(format!("elmo.layer{i}.{dir}.u_f"), &mut cell.u_f);
                    f(format!("elmo.layer{i}.{dir}.b_f"), &mut cell.b_f);
                    f(format!("elmo.layer{i}.{dir}.w_g"), &mut cell.w_g);
                    f(format!("elmo.layer{i}.{dir}.u_g"), &mut cell.u_g);
                    f(format!("elmo.layer{i}.{dir}.b_g"), &mut cell.b_g);
                    f(format!("elmo.layer{i}.{dir}.w_o"), &mut cell.w_o);
                    f(format!("elmo.layer{i}.{dir}.u_o"), &mut cell.u_o);
                    f(format!("elmo.layer{i}.{dir}.b_o"), &mut cell.b_o);
                }
            }
            f("elmo.mix_logits".into(), &mut e.mix_logits);
            f("elmo.gamma".into(), &mut e.gamma);
        }
        for (i, b) in self.decoder_blocks.iter_mut().enumerate() {
            for (h, head) in b.self_heads.iter_mut().enumerate() {
                f(format!("decoder.block{i}.self{h}.w_q"), &mut head.w_q);
                f(format!("decoder.block{i}.self{h}.w_k"), &mut head.w_k);
                f(format!("decoder.block{i}.self{h}.w_v"), &mut head.w_v);
            }
            f(format!("decoder.block{i}.self_out"), &mut b.self_out);
            for (h, head) in b.cross_heads.iter_mut().enumerate() {
                f(format!("decoder.block{i}.cross{h}.w_q"), &mut head.w_q);
                f(format!("decoder.block{i}.cross{h}.w_k"), &mut head.w_k);
                f(format!("decoder.block{i}.cross{h}.w_v"), &mut head.w_v);
            }
            f(format!("decoder.block{i}.cross_out"), &mut b.cross_out);
            f(format!("decoder.block{i}.ln1_gain"), &mut b.ln1_gain);
            f(format!("decoder.block{i}.ln1_bias"), &mut b.ln1_bias);
            f(format!("decoder.block{i}.ln2_gain"), &mut b.ln2_gain);
            f(format!("decoder.block{i}.ln2_bias"), &mut b.ln2_bias);
            f(format!("decoder.block{i}.ln3_gain"), &mut b.ln3_gain);
            f(format!("decoder.block{i}.ln3_bias"), &mut b.ln3_bias);
            f(format!("decoder.block{i}.ffn_g1"), &mut b.ffn_g1);
            f(format!("decoder.block{i}.ffn_b1"), &mut b.ffn_b1);
            f(format!("decoder.block{i}.ffn_g2"), &mut b.ffn_g2);
            f(format!("decoder.block{i}.ffn_b2"), &mut b.ffn_b2);
        }
        f("generator.out_w".into(), &mut self.generator.out_w);
        f("generator.out_b".into(), &mut self.generator.out_b);
    }

    /// Flat views in canonical order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name, t)));
        out
    }

    /// Structural copy with `f` applied to every tensor.
    pub fn map(&self, f: &mut dyn FnMut(&Tensor) -> Tensor) -> ModelParams {
        let mut out = self.clone();
        out.visit_mut(&mut |_, t| *t = f(t));
        out
    }

    /// Tracked copy: every tensor registered as a variable on `tape`.
    pub fn tracked(&self, tape: &mut Tape) -> ModelParams {
        self.map(&mut |t| tape.var(t))
    }

    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, t| n += t.numel());
        n
    }
}

/// A complete captioner: configuration, vocabularies and parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub mode: Mode,
    pub encoder_cfg: EncoderConfig,
    pub decoder_cfg: DecoderConfig,
    pub elmo_cfg: Option<ElmoConfig>,
    pub vocab: Vocabulary,
    pub chars: CharVocab,
    pub params: ModelParams,
}

impl Model {
    pub fn init(
        mode: Mode,
        encoder_cfg: EncoderConfig,
        decoder_cfg: DecoderConfig,
        elmo_cfg: Option<ElmoConfig>,
        vocab: Vocabulary,
        chars: CharVocab,
        seed: u64,
    ) -> Model {
        let elmo = match (mode, &elmo_cfg) {
            (Mode::ElmoMct, Some(cfg)) => Some(ElmoParams::init(cfg, chars.len(), seed)),
            _ => None,
        };
        let mut embed_rng = substream(seed, "embed");
        let params = ModelParams {
            encoder: EncoderParams::init(&encoder_cfg, seed),
            embed_table: crate::init::glorot_uniform(
                vocab.len(),
                decoder_cfg.d_model,
                &mut embed_rng,
            ),
            elmo,
            decoder_blocks: {
                let mut rng = substream(seed, "decoder");
                (0..decoder_cfg.depth)
                    .map(|_| DecoderBlockParams::init(&decoder_cfg, &mut rng))
                    .collect()
            },
            generator: GeneratorParams::init(decoder_cfg.d_model, vocab.len(), seed),
        };
        Model {
            mode,
            encoder_cfg,
            decoder_cfg,
            elmo_cfg,
            vocab,
            chars,
            params,
        }
    }

    /// Encodes one image's region features into decoder memory, untracked.
    pub fn encode_image(&self, features: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        encode_features(&mut tape, features, &self.params.encoder)
    }

    /// Greedy (beam=1) or beam caption for one image, as token words.
    pub fn caption(&self, features: &Tensor, beam: usize) -> Result<Vec<String>> {
        let memory = self.encode_image(features)?;
        let ids = if beam <= 1 {
            decoder::generate_greedy(&memory, self)?
        } else {
            decoder::generate_beam(&memory, self, beam)?
        };
        Ok(self.ids_to_words(&ids))
    }

    /// Strips bos/eos/pad and maps the remaining ids to their words.
    pub fn ids_to_words(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .filter(|&&id| {
                id != crate::embedder::BOS_ID
                    && id != crate::embedder::EOS_ID
                    && id != crate::embedder::PAD_ID
            })
            .map(|&id| self.vocab.word(id).to_string())
            .collect()
    }
}

/// Decoder input embedding. MCT: standard table lookup. ELMo-MCT: standard
/// lookup plus the causal contextual ELMo embedding, elementwise (both
/// d_model wide). Positional encoding is added by the caller.
pub fn embed_sequence(
    tape: &mut Tape,
    token_ids: &[u32],
    model: &Model,
    params: &ModelParams,
) -> Result<Tensor> {
    let standard = standard_embed(tape, &params.embed_table, token_ids)?;
    match (model.mode, &params.elmo) {
        (Mode::ElmoMct, Some(elmo)) => {
            let words: Vec<String> = token_ids
                .iter()
                .map(|&id| model.vocab.word(id).to_string())
                .collect();
            let contextual = elmo_embed_causal(tape, &words, &model.chars, elmo)?;
            tape.add(&standard, &contextual)
        }
        _ => Ok(standard),
    }
}
