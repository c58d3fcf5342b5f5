//! Corpus-level caption metrics: BLEU-1..4 (A1..A4), ROUGE-L (R) and
//! CIDEr-D (C), reported as percentages in the A1/A2/A3/A4/R/C table layout.
//!
//! BLEU pools clipped n-gram counts over the corpus with the
//! closest-reference-length brevity penalty and no smoothing. ROUGE-L is the
//! LCS F-measure with beta = 1.2, max over references, mean over images.
//! CIDEr-D uses tf-idf n-gram cosines for n = 1..4 with idf from the
//! evaluation corpus's references, a Gaussian length penalty (sigma = 6) and
//! the conventional x10 scaling, which is why published C values exceed 100.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::Serialize;
use thiserror::Error;

use crate::data::Dataset;
use crate::embedder::tokenize;
use crate::model::Model;
use crate::par::maybe_par_map;
use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("empty evaluation corpus")]
    EmptyCorpus,
    #[error("bleu order must be 1..=4, got {0}")]
    BadOrder(usize),
    #[error("image {0} has no references")]
    NoReferences(String),
    #[error("image {0} missing from dataset")]
    MissingImage(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, MetricError>;

/// One image's candidate tokens plus its reference token lists.
#[derive(Clone, Debug)]
pub struct EvalEntry {
    pub image_id: String,
    pub candidate: Vec<String>,
    pub references: Vec<Vec<String>>,
}

#[derive(Clone, Debug, Default)]
pub struct EvalCorpus {
    pub entries: Vec<EvalEntry>,
}

impl EvalCorpus {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(MetricError::EmptyCorpus);
        }
        for e in &self.entries {
            if e.references.is_empty() {
                return Err(MetricError::NoReferences(e.image_id.clone()));
            }
        }
        Ok(())
    }
}

/// Percentages in the published table layout.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub model: String,
    #[serde(rename = "A1")]
    pub a1: f64,
    #[serde(rename = "A2")]
    pub a2: f64,
    #[serde(rename = "A3")]
    pub a3: f64,
    #[serde(rename = "A4")]
    pub a4: f64,
    #[serde(rename = "R")]
    pub r: f64,
    #[serde(rename = "C")]
    pub c: f64,
}

impl EvalReport {
    pub const TSV_HEADER: &'static str = "Model\tA1\tA2\tA3\tA4\tR\tC";

    pub fn tsv_row(&self) -> String {
        format!(
            "{}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}\t{:.2}",
            self.model, self.a1, self.a2, self.a3, self.a4, self.r, self.c
        )
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("report serializes")
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *counts.entry(window).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU-n: geometric mean of pooled clipped k-gram precisions for
/// k = 1..=n, times the brevity penalty, as a percentage. Any zero
/// precision yields 0 (no smoothing).
pub fn bleu(corpus: &EvalCorpus, n: usize) -> Result<f64> {
    if !(1..=4).contains(&n) {
        return Err(MetricError::BadOrder(n));
    }
    corpus.validate()?;

    let mut clipped = vec![0usize; n];
    let mut total = vec![0usize; n];
    let mut cand_len = 0usize;
    let mut ref_len = 0usize;

    for entry in &corpus.entries {
        cand_len += entry.candidate.len();
        // Closest reference length; ties go to the shorter reference.
        let closest = entry
            .references
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| {
                let diff = (l as i64 - entry.candidate.len() as i64).abs();
                (diff, l)
            })
            .expect("at least one reference");
        ref_len += closest;

        for k in 1..=n {
            let cand_counts = ngram_counts(&entry.candidate, k);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &entry.references {
                for (gram, count) in ngram_counts(r, k) {
                    let slot = max_ref.entry(gram).or_insert(0);
                    *slot = (*slot).max(count);
                }
            }
            for (gram, count) in &cand_counts {
                let limit = max_ref.get(gram).copied().unwrap_or(0);
                clipped[k - 1] += count.min(&limit);
                total[k - 1] += count;
            }
        }
    }

    let mut log_sum = 0.0;
    for k in 0..n {
        if clipped[k] == 0 || total[k] == 0 {
            return Ok(0.0);
        }
        log_sum += (clipped[k] as f64 / total[k] as f64).ln();
    }
    let brevity = if cand_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(brevity * (log_sum / n as f64).exp() * 100.0)
}

/// Classic O(|a| * |b|) longest-common-subsequence length.
pub fn lcs_length(a: &[String], b: &[String]) -> usize {
    if a.is_empty() || b.is_empty() {
        return 0;
    }
    let mut prev = vec![0usize; b.len() + 1];
    let mut curr = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            curr[j + 1] = if x == y {
                prev[j] + 1
            } else {
                prev[j + 1].max(curr[j])
            };
        }
        std::mem::swap(&mut prev, &mut curr);
    }
    prev[b.len()]
}

const ROUGE_BETA: f64 = 1.2;

/// ROUGE-L: per image the max over references of the LCS F-measure
/// (beta = 1.2), averaged over images, as a percentage.
pub fn rouge_l(corpus: &EvalCorpus) -> Result<f64> {
    corpus.validate()?;
    let mut sum = 0.0;
    for entry in &corpus.entries {
        let mut best: f64 = 0.0;
        for r in &entry.references {
            if entry.candidate.is_empty() || r.is_empty() {
                continue;
            }
            let lcs = lcs_length(&entry.candidate, r) as f64;
            let precision = lcs / entry.candidate.len() as f64;
            let recall = lcs / r.len() as f64;
            let denom = recall + ROUGE_BETA * ROUGE_BETA * precision;
            if denom > 0.0 {
                let f = (1.0 + ROUGE_BETA * ROUGE_BETA) * recall * precision / denom;
                best = best.max(f);
            }
        }
        sum += best;
    }
    Ok(sum / corpus.entries.len() as f64 * 100.0)
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

// Ordered map: the cosine and norm reductions sum f64 terms, and their
// order must not depend on hash seeds or the scores drift in the last ulp
// between runs.
type TfIdf<'a> = BTreeMap<&'a [String], f64>;

fn tfidf_vector<'a>(
    tokens: &'a [String],
    n: usize,
    df: &HashMap<Vec<String>, usize>,
    log_images: f64,
) -> (TfIdf<'a>, f64) {
    let mut vec = TfIdf::new();
    if tokens.len() >= n {
        for window in tokens.windows(n) {
            *vec.entry(window).or_insert(0.0) += 1.0;
        }
    }
    let mut norm_sq = 0.0;
    for (gram, weight) in vec.iter_mut() {
        let d = df.get(*gram).copied().unwrap_or(0).max(1) as f64;
        *weight *= log_images - d.ln();
        norm_sq += *weight * *weight;
    }
    (vec, norm_sq.sqrt())
}

/// CIDEr-D: tf-idf n-gram cosine consensus for n = 1..4 with candidate
/// clipping, a Gaussian length penalty, the mean over references and n, and
/// the conventional x10 scale. Idf comes from this corpus's reference sets,
/// so a single-image corpus scores exactly 0.
pub fn cider_d(corpus: &EvalCorpus) -> Result<f64> {
    corpus.validate()?;
    let num_images = corpus.entries.len();
    let log_images = (num_images as f64).ln();

    // Document frequency per n-gram order: the number of images whose
    // reference set contains the n-gram.
    let mut df: Vec<HashMap<Vec<String>, usize>> = vec![HashMap::new(); CIDER_N];
    for entry in &corpus.entries {
        for k in 1..=CIDER_N {
            let mut seen: HashSet<&[String]> = HashSet::new();
            for r in &entry.references {
                for gram in ngram_counts(r, k).keys() {
                    seen.insert(gram);
                }
            }
            for gram in seen {
                *df[k - 1].entry(gram.to_vec()).or_insert(0) += 1;
            }
        }
    }

    let mut total = 0.0;
    for entry in &corpus.entries {
        let mut per_n = [0.0; CIDER_N];
        for k in 1..=CIDER_N {
            let (cand_vec, cand_norm) =
                tfidf_vector(&entry.candidate, k, &df[k - 1], log_images);
            for r in &entry.references {
                let (ref_vec, ref_norm) = tfidf_vector(r, k, &df[k - 1], log_images);
                if cand_norm == 0.0 || ref_norm == 0.0 {
                    continue;
                }
                let mut dot = 0.0;
                for (gram, &cw) in &cand_vec {
                    if let Some(&rw) = ref_vec.get(gram) {
                        dot += cw.min(rw) * rw;
                    }
                }
                let delta = entry.candidate.len() as f64 - r.len() as f64;
                let penalty = (-delta * delta / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                per_n[k - 1] += dot / (cand_norm * ref_norm) * penalty;
            }
        }
        let n_refs = entry.references.len() as f64;
        let image_score: f64 = per_n.iter().sum::<f64>() / CIDER_N as f64 / n_refs;
        total += image_score;
    }
    Ok(total / num_images as f64 * 10.0)
}

/// Greedy-generates a caption for every image of the split and scores all
/// six metrics against the gold captions.
pub fn evaluate(
    model: &Model,
    dataset: &Dataset,
    split_ids: &[String],
    parallel: bool,
) -> Result<EvalReport> {
    if split_ids.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    let entries = maybe_par_map(parallel, split_ids, |id| -> Result<EvalEntry> {
        let feats = dataset
            .features_of(id)
            .ok_or_else(|| MetricError::MissingImage(id.clone()))?;
        let refs = dataset
            .captions_of(id)
            .ok_or_else(|| MetricError::MissingImage(id.clone()))?;
        let candidate = model.caption(&feats.matrix, 1)?;
        Ok(EvalEntry {
            image_id: id.clone(),
            candidate,
            references: refs.iter().map(|c| tokenize(c)).collect(),
        })
    });
    let mut corpus = EvalCorpus::default();
    for e in entries {
        corpus.entries.push(e?);
    }
    score_corpus(model.mode.to_string(), &corpus)
}

/// Scores a prepared corpus into a report row.
pub fn score_corpus(model_name: String, corpus: &EvalCorpus) -> Result<EvalReport> {
    Ok(EvalReport {
        model: model_name,
        a1: bleu(corpus, 1)?,
        a2: bleu(corpus, 2)?,
        a3: bleu(corpus, 3)?,
        a4: bleu(corpus, 4)?,
        r: rouge_l(corpus)?,
        c: cider_d(corpus)?,
    })
}
