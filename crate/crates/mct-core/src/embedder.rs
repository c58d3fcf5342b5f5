//! Word embedding encoders: tokenization, vocabularies, the standard lookup
//! table, and the ELMo path (character encoding, bidirectional LSTM stack,
//! softmax-mixed layer combination).

use std::collections::HashMap;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::init::{glorot_uniform, substream};
use crate::tensor::{Result, Tape, Tensor};

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercases, maps every character outside [a-z0-9'] to a space, and splits
/// on whitespace. Idempotent on its own space-joined output.
pub fn tokenize(caption: &str) -> Vec<String> {
    caption
        .to_lowercase()
        .chars()
        .map(|c| {
            if c.is_ascii_lowercase() || c.is_ascii_digit() || c == '\'' {
                c
            } else {
                ' '
            }
        })
        .collect::<String>()
        .split_whitespace()
        .map(str::to_owned)
        .collect()
}

/// Word-id maps with fixed reserved ids (pad=0, bos=1, eos=2, unk=3).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    word_to_id: HashMap<String, u32>,
    id_to_word: Vec<String>,
    pub min_count: usize,
}

impl Vocabulary {
    /// Builds from a caption corpus: words with frequency >= min_count get
    /// ids in descending-frequency order, ties broken lexicographically.
    /// At full caption-corpus scale, min_count 5 lands near a 10k-word
    /// vocabulary; toy corpora use min_count 1.
    pub fn build<'a, I>(captions: I, min_count: usize) -> Vocabulary
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut freq: HashMap<String, usize> = HashMap::new();
        for caption in captions {
            for word in tokenize(caption) {
                *freq.entry(word).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> =
            freq.into_iter().filter(|(_, c)| *c >= min_count).collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocabulary::from_words(kept.into_iter().map(|(w, _)| w), min_count)
    }

    pub fn from_words<I>(words: I, min_count: usize) -> Vocabulary
    where
        I: IntoIterator<Item = String>,
    {
        let mut id_to_word: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_word.extend(words);
        let word_to_id = id_to_word
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocabulary {
            word_to_id,
            id_to_word,
            min_count,
        }
    }

    pub fn len(&self) -> usize {
        self.id_to_word.len()
    }

    pub fn is_empty(&self) -> bool {
        false // reserved ids always present
    }

    /// Id for a word; unknown words map to unk.
    pub fn id(&self, word: &str) -> u32 {
        self.word_to_id.get(word).copied().unwrap_or(UNK_ID)
    }

    pub fn word(&self, id: u32) -> &str {
        &self.id_to_word[id as usize]
    }

    pub fn contains(&self, word: &str) -> bool {
        self.word_to_id.contains_key(word)
    }

    pub fn encode(&self, words: &[String]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }

    /// Non-reserved words in id order, one per line; word i has id i+4.
    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for word in &self.id_to_word[RESERVED.len()..] {
            writeln!(w, "{word}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R, min_count: usize) -> std::io::Result<Vocabulary> {
        let mut words = Vec::new();
        for line in r.lines() {
            words.push(line?);
        }
        Ok(Vocabulary::from_words(words, min_count))
    }

    pub fn words(&self) -> &[String] {
        &self.id_to_word
    }
}

pub const CHAR_PAD_ID: u32 = 0;
pub const CHAR_UNK_ID: u32 = 1;

/// Character-id map over the characters observed at build time, with pad=0
/// and unk=1 reserved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CharVocab {
    char_to_id: HashMap<char, u32>,
    id_to_char: Vec<char>,
}

impl CharVocab {
    /// Collects every character of the tokenized corpus, sorted for a
    /// deterministic id assignment.
    pub fn build<'a, I>(captions: I) -> CharVocab
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut chars: Vec<char> = captions
            .into_iter()
            .flat_map(tokenize)
            .flat_map(|w| w.chars().collect::<Vec<_>>())
            .collect();
        chars.sort_unstable();
        chars.dedup();
        CharVocab::from_chars(chars)
    }

    pub fn from_chars(chars: Vec<char>) -> CharVocab {
        let char_to_id = chars
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, (i + 2) as u32))
            .collect();
        CharVocab {
            char_to_id,
            id_to_char: chars,
        }
    }

    /// Total rows including the two reserved ids.
    pub fn len(&self) -> usize {
        self.id_to_char.len() + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, c: char) -> u32 {
        self.char_to_id.get(&c).copied().unwrap_or(CHAR_UNK_ID)
    }

    pub fn chars(&self) -> &[char] {
        &self.id_to_char
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        for c in &self.id_to_char {
            writeln!(w, "{c}")?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> std::io::Result<CharVocab> {
        let mut chars = Vec::new();
        for line in r.lines() {
            let line = line?;
            if let Some(c) = line.chars().next() {
                chars.push(c);
            }
        }
        Ok(CharVocab::from_chars(chars))
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ElmoConfig {
    /// Number of bidirectional LSTM layers.
    pub layers: usize,
    /// Embedding width; must match the decoder model width and be even, as
    /// it splits across the two LSTM directions.
    pub emb: usize,
    pub d_char: usize,
    pub max_word_len: usize,
}

impl Default for ElmoConfig {
    fn default() -> Self {
        ElmoConfig {
            layers: 2,
            emb: 1024,
            d_char: 16,
            max_word_len: 16,
        }
    }
}

impl ElmoConfig {
    pub fn desk() -> Self {
        ElmoConfig {
            layers: 1,
            emb: 32,
            d_char: 8,
            max_word_len: 16,
        }
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.layers == 0 {
            return Err("elmo layers must be at least 1".into());
        }
        if self.emb == 0 || !self.emb.is_multiple_of(2) {
            return Err(format!("elmo emb must be positive and even, got {}", self.emb));
        }
        if self.d_char == 0 || self.max_word_len == 0 {
            return Err("elmo d_char and max_word_len must be positive".into());
        }
        Ok(())
    }
}

/// One LSTM cell direction: separate affine per gate, hidden width d_h.
#[derive(Clone, Debug)]
pub struct LstmCellParams {
    pub w_i: Tensor,
    pub u_i: Tensor,
    pub b_i: Tensor,
    pub w_f: Tensor,
    pub u_f: Tensor,
    pub b_f: Tensor,
    pub w_g: Tensor,
    pub u_g: Tensor,
    pub b_g: Tensor,
    pub w_o: Tensor,
    pub u_o: Tensor,
    pub b_o: Tensor,
}

impl LstmCellParams {
    /// Forget-gate bias starts at 1.0; everything else glorot/zero.
    pub fn init(d_in: usize, d_h: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        LstmCellParams {
            w_i: glorot_uniform(d_in, d_h, rng),
            u_i: glorot_uniform(d_h, d_h, rng),
            b_i: Tensor::zeros(vec![d_h]),
            w_f: glorot_uniform(d_in, d_h, rng),
            u_f: glorot_uniform(d_h, d_h, rng),
            b_f: Tensor::full(vec![d_h], 1.0),
            w_g: glorot_uniform(d_in, d_h, rng),
            u_g: glorot_uniform(d_h, d_h, rng),
            b_g: Tensor::zeros(vec![d_h]),
            w_o: glorot_uniform(d_in, d_h, rng),
            u_o: glorot_uniform(d_h, d_h, rng),
            b_o: Tensor::zeros(vec![d_h]),
        }
    }

    pub fn hidden_width(&self) -> usize {
        self.b_i.shape()[0]
    }
}

/// Standard gated LSTM step on 1-by-d row states.
pub fn lstm_cell(
    tape: &mut Tape,
    x: &Tensor,
    h_prev: &Tensor,
    c_prev: &Tensor,
    p: &LstmCellParams,
) -> Result<(Tensor, Tensor)> {
    let gate = |tape: &mut Tape, w: &Tensor, u: &Tensor, b: &Tensor| -> Result<Tensor> {
        let xw = tape.matmul(x, w)?;
        let hu = tape.matmul(h_prev, u)?;
        let sum = tape.add(&xw, &hu)?;
        tape.add_row(&sum, b)
    };
    let i_pre = gate(tape, &p.w_i, &p.u_i, &p.b_i)?;
    let f_pre = gate(tape, &p.w_f, &p.u_f, &p.b_f)?;
    let g_pre = gate(tape, &p.w_g, &p.u_g, &p.b_g)?;
    let o_pre = gate(tape, &p.w_o, &p.u_o, &p.b_o)?;
    let i = tape.sigmoid(&i_pre);
    let f = tape.sigmoid(&f_pre);
    let g = tape.tanh(&g_pre);
    let o = tape.sigmoid(&o_pre);
    let fc = tape.mul(&f, c_prev)?;
    let ig = tape.mul(&i, &g)?;
    let c = tape.add(&fc, &ig)?;
    let tc = tape.tanh(&c);
    let h = tape.mul(&o, &tc)?;
    Ok((h, c))
}

/// All learned ELMo parameters.
#[derive(Clone, Debug)]
pub struct ElmoParams {
    pub char_table: Tensor,
    pub char_proj_w: Tensor,
    pub char_proj_b: Tensor,
    /// One (forward, backward) cell pair per layer; input width emb,
    /// hidden width emb/2 per direction.
    pub lstm_layers: Vec<(LstmCellParams, LstmCellParams)>,
    /// layers+1 mixing logits, softmax-normalized at use.
    pub mix_logits: Tensor,
    pub gamma: Tensor,
    pub max_word_len: usize,
}

impl ElmoParams {
    pub fn init(cfg: &ElmoConfig, char_vocab_len: usize, seed: u64) -> Self {
        let mut rng = substream(seed, "elmo");
        let half = cfg.emb / 2;
        ElmoParams {
            char_table: glorot_uniform(char_vocab_len, cfg.d_char, &mut rng),
            char_proj_w: glorot_uniform(cfg.d_char, cfg.emb, &mut rng),
            char_proj_b: Tensor::zeros(vec![cfg.emb]),
            lstm_layers: (0..cfg.layers)
                .map(|_| {
                    (
                        LstmCellParams::init(cfg.emb, half, &mut rng),
                        LstmCellParams::init(cfg.emb, half, &mut rng),
                    )
                })
                .collect(),
            mix_logits: Tensor::zeros(vec![1, cfg.layers + 1]),
            gamma: Tensor::scalar(1.0),
            max_word_len: cfg.max_word_len,
        }
    }

    pub fn emb(&self) -> usize {
        self.char_proj_w.shape()[1]
    }

    pub fn layers(&self) -> usize {
        self.lstm_layers.len()
    }
}

/// Row lookup into the standard embedding table.
pub fn standard_embed(tape: &mut Tape, table: &Tensor, ids: &[u32]) -> Result<Tensor> {
    let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    tape.embedding_rows(table, &idx)
}

/// Character-level word encoding: embed up to max_word_len characters
/// (unk for unseen), mean-pool over the real characters, project, relu.
pub fn char_encode(
    tape: &mut Tape,
    word: &str,
    chars: &CharVocab,
    params: &ElmoParams,
) -> Result<Tensor> {
    let ids: Vec<usize> = word
        .chars()
        .take(params.max_word_len)
        .map(|c| chars.id(c) as usize)
        .collect();
    let count = ids.len().max(1);
    let embedded = tape.embedding_rows(&params.char_table, &ids)?;
    // Mean over rows as a constant-ones matmul, keeping gradient flow.
    let ones = Tensor::full(vec![1, count], 1.0 / count as f64);
    let pooled = tape.matmul(&ones, &embedded)?;
    let proj = tape.matmul(&pooled, &params.char_proj_w)?;
    let shifted = tape.add_row(&proj, &params.char_proj_b)?;
    Ok(tape.relu(&shifted))
}

/// Runs the biLSTM stack over per-word rows; layer j output at position g is
/// concat(forward state, backward state). Returns layers 0..=a, each G-by-emb.
fn elmo_layers(
    tape: &mut Tape,
    words: &[String],
    chars: &CharVocab,
    params: &ElmoParams,
) -> Result<Vec<Tensor>> {
    let g = words.len();
    let emb = params.emb();
    let half = emb / 2;

    let mut rows = Vec::with_capacity(g);
    for w in words {
        rows.push(char_encode(tape, w, chars, params)?);
    }
    let layer0 = tape.stack_rows(&rows)?;

    let mut layers = vec![layer0];
    for (fwd, bwd) in &params.lstm_layers {
        let prev = layers.last().unwrap().clone();
        let mut fwd_states = Vec::with_capacity(g);
        let mut h = Tensor::zeros(vec![1, half]);
        let mut c = Tensor::zeros(vec![1, half]);
        for i in 0..g {
            let x = row_of(tape, &prev, i, emb)?;
            let (nh, nc) = lstm_cell(tape, &x, &h, &c, fwd)?;
            fwd_states.push(nh.clone());
            h = nh;
            c = nc;
        }
        let mut bwd_states = vec![Tensor::zeros(vec![1, half]); g];
        let mut h = Tensor::zeros(vec![1, half]);
        let mut c = Tensor::zeros(vec![1, half]);
        for i in (0..g).rev() {
            let x = row_of(tape, &prev, i, emb)?;
            let (nh, nc) = lstm_cell(tape, &x, &h, &c, bwd)?;
            bwd_states[i] = nh.clone();
            h = nh;
            c = nc;
        }
        let mut combined = Vec::with_capacity(g);
        for i in 0..g {
            combined.push(tape.concat_cols(&[fwd_states[i].clone(), bwd_states[i].clone()])?);
        }
        layers.push(tape.stack_rows(&combined)?);
    }
    Ok(layers)
}

// Tracked single-row extraction via a one-hot matmul.
fn row_of(tape: &mut Tape, m: &Tensor, i: usize, width: usize) -> Result<Tensor> {
    let rows = m.numel() / width;
    let mut sel = Tensor::zeros(vec![1, rows]);
    {
        let mut data = sel.data().to_vec();
        data[i] = 1.0;
        sel = Tensor::from_vec(vec![1, rows], data)?;
    }
    tape.matmul(&sel, m)
}

/// Contextual embedding: gamma * sum_j softmax(mix_logits)_j * layer_j.
pub fn elmo_embed(
    tape: &mut Tape,
    words: &[String],
    chars: &CharVocab,
    params: &ElmoParams,
) -> Result<Tensor> {
    let layers = elmo_layers(tape, words, chars, params)?;
    let weights = tape.softmax_rows(&params.mix_logits)?;
    let mut acc: Option<Tensor> = None;
    for (j, layer) in layers.iter().enumerate() {
        let wj = tape.index(&weights, j)?;
        let scaled = tape.scale_by(layer, &wj)?;
        acc = Some(match acc {
            Some(a) => tape.add(&a, &scaled)?,
            None => scaled,
        });
    }
    tape.scale_by(&acc.expect("at least layer 0"), &params.gamma)
}

/// Per-direction, per-layer hidden state matrices, for tests that inspect
/// the forward/backward halves separately.
pub fn elmo_layer_outputs(
    tape: &mut Tape,
    words: &[String],
    chars: &CharVocab,
    params: &ElmoParams,
) -> Result<Vec<Tensor>> {
    elmo_layers(tape, words, chars, params)
}

/// Causal contextual embedding for decoder input: row i is the last row of
/// [`elmo_embed`] over the prefix words[0..=i], so no position ever sees a
/// later word. The plain bidirectional embedding would leak future tokens
/// through the backward LSTM, which a generation-time decoder cannot have.
pub fn elmo_embed_causal(
    tape: &mut Tape,
    words: &[String],
    chars: &CharVocab,
    params: &ElmoParams,
) -> Result<Tensor> {
    let g = words.len();
    let emb = params.emb();
    let mut rows = Vec::with_capacity(g);
    for i in 0..g {
        let prefix_embedding = elmo_embed(tape, &words[0..=i], chars, params)?;
        rows.push(row_of(tape, &prefix_embedding, i, emb)?);
    }
    tape.stack_rows(&rows)
}
