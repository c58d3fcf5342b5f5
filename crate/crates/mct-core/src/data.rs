//! Dataset ingestion and batching: region-feature files (JSONL and binary),
//! caption files, train/val/test splits, a deterministic synthetic toy set,
//! and padded batches with masks.
//!
//! Feature payloads are f32 on disk and promoted to f64 in memory, so the
//! two encodings convert to each other bit-exactly.

use std::collections::{HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::embedder::{tokenize, Vocabulary, BOS_ID, EOS_ID, PAD_ID};
use crate::encoder::RegionFeatures;
use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed record: {message}")]
    Malformed {
        path: String,
        line: usize,
        message: String,
    },
    #[error("feature width mismatch: record {image_id} has dim {got}, file dim {expected}")]
    DimMismatch {
        image_id: String,
        got: usize,
        expected: usize,
    },
    #[error("duplicate image id {0}")]
    DuplicateImage(String),
    #[error("empty feature file {0}")]
    EmptyFeatures(String),
    #[error("caption file references unknown image id {0}")]
    UnknownImage(String),
    #[error("image {0} has no captions")]
    NoCaptions(String),
    #[error("split lists overlap on image id {0}")]
    SplitOverlap(String),
    #[error("split references unavailable image id {0}")]
    SplitUnknown(String),
    #[error("bad magic bytes: expected {expected:?}, found {found:?}")]
    Magic { expected: [u8; 4], found: [u8; 4] },
    #[error("unsupported version {0}")]
    Version(u32),
    #[error("toy dataset needs at least 2 images, got {0}")]
    ToyTooSmall(usize),
}

pub type Result<T> = std::result::Result<T, DataError>;

fn io_err(path: &Path, source: std::io::Error) -> DataError {
    DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Validated set of per-image region feature records sharing one width.
#[derive(Clone, Debug)]
pub struct FeatureFile {
    pub records: Vec<RegionFeatures>,
    pub d_feat: usize,
}

impl FeatureFile {
    pub fn new(records: Vec<RegionFeatures>) -> Result<FeatureFile> {
        if records.is_empty() {
            return Err(DataError::EmptyFeatures("<memory>".into()));
        }
        let d_feat = records[0].dim();
        let mut seen = HashSet::new();
        for r in &records {
            if r.dim() != d_feat {
                return Err(DataError::DimMismatch {
                    image_id: r.image_id.clone(),
                    got: r.dim(),
                    expected: d_feat,
                });
            }
            if !seen.insert(r.image_id.clone()) {
                return Err(DataError::DuplicateImage(r.image_id.clone()));
            }
        }
        Ok(FeatureFile { records, d_feat })
    }

    pub fn ids(&self) -> Vec<String> {
        self.records.iter().map(|r| r.image_id.clone()).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FeatureFormat {
    Jsonl,
    Binary,
}

#[derive(Serialize, Deserialize)]
struct FeatureRecordJson {
    image_id: String,
    num_regions: usize,
    dim: usize,
    features: Vec<Vec<f64>>,
}

pub const FEATURE_MAGIC: [u8; 4] = *b"MCTF";
pub const FEATURE_VERSION: u32 = 1;

pub fn read_features(path: &Path, format: FeatureFormat) -> Result<FeatureFile> {
    match format {
        FeatureFormat::Jsonl => read_features_jsonl(path),
        FeatureFormat::Binary => read_features_binary(path),
    }
}

fn read_features_jsonl(path: &Path) -> Result<FeatureFile> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FeatureRecordJson =
            serde_json::from_str(&line).map_err(|e| DataError::Malformed {
                path: path.display().to_string(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        let malformed = |message: String| DataError::Malformed {
            path: path.display().to_string(),
            line: lineno + 1,
            message,
        };
        if rec.num_regions == 0 || rec.features.is_empty() {
            return Err(malformed("record must have at least one region".into()));
        }
        if rec.features.len() != rec.num_regions {
            return Err(malformed(format!(
                "num_regions {} but {} feature rows",
                rec.num_regions,
                rec.features.len()
            )));
        }
        let mut data = Vec::with_capacity(rec.num_regions * rec.dim);
        for row in &rec.features {
            if row.len() != rec.dim {
                return Err(malformed(format!(
                    "dim {} but row of length {}",
                    rec.dim,
                    row.len()
                )));
            }
            // Disk precision is f32; promote through it for bit-exact
            // round trips with the binary encoding.
            data.extend(row.iter().map(|&v| v as f32 as f64));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(malformed("non-finite feature value".into()));
        }
        records.push(RegionFeatures {
            image_id: rec.image_id,
            matrix: Tensor::from_vec(vec![rec.num_regions, rec.dim], data).map_err(|e| {
                DataError::Malformed {
                    path: path.display().to_string(),
                    line: lineno + 1,
                    message: e.to_string(),
                }
            })?,
        });
    }
    if records.is_empty() {
        return Err(DataError::EmptyFeatures(path.display().to_string()));
    }
    FeatureFile::new(records)
}

pub fn write_features_jsonl(path: &Path, features: &FeatureFile) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for r in &features.records {
        let (n, d) = (r.num_regions(), r.dim());
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|i| {
                r.matrix.data()[i * d..(i + 1) * d]
                    .iter()
                    .map(|&v| v as f32 as f64)
                    .collect()
            })
            .collect();
        let rec = FeatureRecordJson {
            image_id: r.image_id.clone(),
            num_regions: n,
            dim: d,
            features: rows,
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| DataError::Malformed {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

fn read_features_binary(path: &Path) -> Result<FeatureFile> {
    let mut file = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut magic = [0u8; 4];
    match file.read_exact(&mut magic) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => {
            return Err(DataError::EmptyFeatures(path.display().to_string()))
        }
        Err(e) => return Err(io_err(path, e)),
    }
    if magic != FEATURE_MAGIC {
        return Err(DataError::Magic {
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let version = read_u32(&mut file, path)?;
    if version != FEATURE_VERSION {
        return Err(DataError::Version(version));
    }
    let mut records = Vec::new();
    loop {
        let mut id_len_buf = [0u8; 4];
        match file.read_exact(&mut id_len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(io_err(path, e)),
        }
        let id_len = u32::from_le_bytes(id_len_buf) as usize;
        let mut id_bytes = vec![0u8; id_len];
        file.read_exact(&mut id_bytes).map_err(|e| io_err(path, e))?;
        let image_id = String::from_utf8(id_bytes).map_err(|e| DataError::Malformed {
            path: path.display().to_string(),
            line: records.len() + 1,
            message: format!("image id is not utf-8: {e}"),
        })?;
        let n = read_u32(&mut file, path)? as usize;
        let d = read_u32(&mut file, path)? as usize;
        if n == 0 {
            return Err(DataError::Malformed {
                path: path.display().to_string(),
                line: records.len() + 1,
                message: "record must have at least one region".into(),
            });
        }
        let mut payload = vec![0u8; n * d * 4];
        file.read_exact(&mut payload).map_err(|e| io_err(path, e))?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
            .collect();
        records.push(RegionFeatures {
            image_id,
            matrix: Tensor::from_vec(vec![n, d], data).expect("binary record shape"),
        });
    }
    if records.is_empty() {
        return Err(DataError::EmptyFeatures(path.display().to_string()));
    }
    FeatureFile::new(records)
}

fn read_u32<R: Read>(r: &mut R, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|e| io_err(path, e))?;
    Ok(u32::from_le_bytes(buf))
}

pub fn write_features_binary(path: &Path, features: &FeatureFile) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    w.write_all(&FEATURE_MAGIC).map_err(|e| io_err(path, e))?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())
        .map_err(|e| io_err(path, e))?;
    for r in &features.records {
        let id = r.image_id.as_bytes();
        w.write_all(&(id.len() as u32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        w.write_all(id).map_err(|e| io_err(path, e))?;
        w.write_all(&(r.num_regions() as u32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        w.write_all(&(r.dim() as u32).to_le_bytes())
            .map_err(|e| io_err(path, e))?;
        for &v in r.matrix.data() {
            w.write_all(&(v as f32).to_le_bytes())
                .map_err(|e| io_err(path, e))?;
        }
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Caption annotations, one record per image.
#[derive(Clone, Debug)]
pub struct CaptionFile {
    pub records: Vec<(String, Vec<String>)>,
}

#[derive(Serialize, Deserialize)]
struct CaptionRecordJson {
    image_id: String,
    captions: Vec<String>,
}

pub fn read_captions(path: &Path) -> Result<CaptionFile> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CaptionRecordJson =
            serde_json::from_str(&line).map_err(|e| DataError::Malformed {
                path: path.display().to_string(),
                line: lineno + 1,
                message: e.to_string(),
            })?;
        if rec.captions.is_empty() {
            return Err(DataError::NoCaptions(rec.image_id));
        }
        records.push((rec.image_id, rec.captions));
    }
    Ok(CaptionFile { records })
}

pub fn write_captions(path: &Path, captions: &CaptionFile) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    for (image_id, caps) in &captions.records {
        let rec = CaptionRecordJson {
            image_id: image_id.clone(),
            captions: caps.clone(),
        };
        serde_json::to_writer(&mut w, &rec).map_err(|e| DataError::Malformed {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })?;
        writeln!(w).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

/// Train/val/test image id lists; pairwise disjoint.
#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq, Eq)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitSpec {
    pub fn validate(&self, available: &[String]) -> Result<()> {
        let avail: HashSet<&String> = available.iter().collect();
        let mut seen: HashSet<&String> = HashSet::new();
        for id in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(id) {
                return Err(DataError::SplitOverlap(id.clone()));
            }
            if !avail.contains(id) {
                return Err(DataError::SplitUnknown(id.clone()));
            }
        }
        Ok(())
    }
}

pub fn read_split(path: &Path) -> Result<SplitSpec> {
    let file = File::open(path).map_err(|e| io_err(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| DataError::Malformed {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

pub fn write_split(path: &Path, split: &SplitSpec) -> Result<()> {
    let file = File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, split).map_err(|e| DataError::Malformed {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })?;
    w.flush().map_err(|e| io_err(path, e))
}

/// The standard full-scale protocol: 113287 train / 5000 val / 5000 test
/// images. Toy runs use ratio splits instead; this is the documented
/// default for full-corpus data.
pub const FULL_SCALE_SPLIT: (usize, usize, usize) = (113_287, 5_000, 5_000);

pub enum SplitRule {
    /// Honored verbatim after validation.
    Explicit(SplitSpec),
    /// Seeded shuffle, then val and test take their fractions (floor),
    /// train keeps the rest.
    Ratio { val: f64, test: f64 },
}

pub fn make_splits(ids: &[String], rule: &SplitRule, seed: u64) -> Result<SplitSpec> {
    match rule {
        SplitRule::Explicit(spec) => {
            spec.validate(ids)?;
            Ok(spec.clone())
        }
        SplitRule::Ratio { val, test } => {
            let mut shuffled: Vec<String> = ids.to_vec();
            let mut rng = crate::init::substream(seed, "split");
            shuffled.shuffle(&mut rng);
            let n = shuffled.len();
            let n_val = (n as f64 * val).floor() as usize;
            let n_test = (n as f64 * test).floor() as usize;
            let val_ids = shuffled[0..n_val].to_vec();
            let test_ids = shuffled[n_val..n_val + n_test].to_vec();
            let train_ids = shuffled[n_val + n_test..].to_vec();
            Ok(SplitSpec {
                train: train_ids,
                val: val_ids,
                test: test_ids,
            })
        }
    }
}

pub const TOY_COLORS: [&str; 4] = ["red", "blue", "green", "yellow"];
pub const TOY_SHAPES: [&str; 4] = ["circle", "square", "triangle", "star"];
pub const TOY_D_FEAT: usize = 16;
pub const TOY_NOISE: f64 = 0.05;

/// Deterministic synthetic dataset. Each image holds 2..=4 distinct
/// (color, shape) regions; the feature vector of a region is the sum of two
/// orthogonal unit patterns (color dims 0..4, shape dims 8..12) plus
/// uniform noise, stored at f32 precision. The caption is the template
/// "a <color> <shape>" joined by "and" over the regions in canonical
/// (color, shape) order, so it is a pure function of the region set.
pub fn toy_dataset(seed: u64, n_images: usize) -> Result<(FeatureFile, CaptionFile)> {
    toy_dataset_with_noise(seed, n_images, TOY_NOISE)
}

pub fn toy_dataset_with_noise(
    seed: u64,
    n_images: usize,
    noise: f64,
) -> Result<(FeatureFile, CaptionFile)> {
    if n_images < 2 {
        return Err(DataError::ToyTooSmall(n_images));
    }
    let mut rng = crate::init::substream(seed, "toy");
    let mut feature_records = Vec::with_capacity(n_images);
    let mut caption_records = Vec::with_capacity(n_images);
    for img in 0..n_images {
        let image_id = format!("toy{img:04}");
        let k = rng.random_range(2..=4usize);
        let mut combos: Vec<(usize, usize)> = (0..TOY_COLORS.len())
            .flat_map(|c| (0..TOY_SHAPES.len()).map(move |s| (c, s)))
            .collect();
        combos.shuffle(&mut rng);
        let mut chosen: Vec<(usize, usize)> = combos.into_iter().take(k).collect();
        chosen.sort_unstable();

        let mut data = Vec::with_capacity(k * TOY_D_FEAT);
        for &(c, s) in &chosen {
            for dim in 0..TOY_D_FEAT {
                let mut v = rng.random_range(-noise..=noise);
                if dim == c {
                    v += 1.0;
                }
                if dim == 8 + s {
                    v += 1.0;
                }
                data.push(v as f32 as f64);
            }
        }
        let phrases: Vec<String> = chosen
            .iter()
            .map(|&(c, s)| format!("a {} {}", TOY_COLORS[c], TOY_SHAPES[s]))
            .collect();
        caption_records.push((image_id.clone(), vec![phrases.join(" and ")]));
        feature_records.push(RegionFeatures {
            image_id,
            matrix: Tensor::from_vec(vec![k, TOY_D_FEAT], data).expect("toy shape"),
        });
    }
    Ok((
        FeatureFile::new(feature_records)?,
        CaptionFile {
            records: caption_records,
        },
    ))
}

/// Recovers a toy region's (color, shape) by nearest pattern: the strongest
/// coordinate in each pattern band. Test oracle for the toy construction.
pub fn toy_decode_region(row: &[f64]) -> (usize, usize) {
    let argmax = |slice: &[f64]| {
        slice
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    (argmax(&row[0..4]), argmax(&row[8..12]))
}

/// Features and captions joined by image id.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub features: FeatureFile,
    pub captions: CaptionFile,
    feature_index: HashMap<String, usize>,
    caption_index: HashMap<String, usize>,
}

impl Dataset {
    /// Joins the two files, requiring every captioned image to have features.
    pub fn new(features: FeatureFile, captions: CaptionFile) -> Result<Dataset> {
        let feature_index: HashMap<String, usize> = features
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.image_id.clone(), i))
            .collect();
        let mut caption_index = HashMap::new();
        for (i, (id, caps)) in captions.records.iter().enumerate() {
            if !feature_index.contains_key(id) {
                return Err(DataError::UnknownImage(id.clone()));
            }
            if caps.is_empty() {
                return Err(DataError::NoCaptions(id.clone()));
            }
            caption_index.insert(id.clone(), i);
        }
        Ok(Dataset {
            features,
            captions,
            feature_index,
            caption_index,
        })
    }

    pub fn features_of(&self, image_id: &str) -> Option<&RegionFeatures> {
        self.feature_index
            .get(image_id)
            .map(|&i| &self.features.records[i])
    }

    pub fn captions_of(&self, image_id: &str) -> Option<&[String]> {
        self.caption_index
            .get(image_id)
            .map(|&i| self.captions.records[i].1.as_slice())
    }

    pub fn image_ids(&self) -> Vec<String> {
        self.features.ids()
    }

    /// One training example per (image, caption) pair, in file order.
    pub fn examples_for(&self, ids: &[String], vocab: &Vocabulary) -> Result<Vec<Example>> {
        let mut out = Vec::new();
        for id in ids {
            let caps = self
                .captions_of(id)
                .ok_or_else(|| DataError::NoCaptions(id.clone()))?;
            for cap in caps {
                out.push(Example {
                    image_id: id.clone(),
                    tokens: vocab.encode(&tokenize(cap)),
                });
            }
        }
        Ok(out)
    }
}

/// One (image, caption) training pair; tokens are vocabulary ids without
/// bos/eos.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub image_id: String,
    pub tokens: Vec<u32>,
}

/// Padded batch. Feature matrices are padded with zero rows to the largest
/// region count in the batch; token rows are [bos, tokens..., eos, pad...]
/// padded to the longest sequence. Masks mark exactly the real positions.
#[derive(Clone, Debug)]
pub struct Batch {
    pub image_ids: Vec<String>,
    pub features: Vec<Tensor>,
    pub region_mask: Vec<Vec<bool>>,
    pub tokens: Vec<Vec<u32>>,
    pub token_mask: Vec<Vec<bool>>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    /// Unpadded feature matrix of example `i`.
    pub fn example_features(&self, i: usize) -> Tensor {
        let n_real = self.region_mask[i].iter().filter(|&&m| m).count();
        let d = self.features[i].shape()[1];
        Tensor::from_vec(
            vec![n_real, d],
            self.features[i].data()[0..n_real * d].to_vec(),
        )
        .expect("unpadded features")
    }

    /// Teacher-forcing views for example `i`: (input ids, target ids).
    /// Input is [bos, tokens...]; target is [tokens..., eos].
    pub fn example_teacher_pair(&self, i: usize) -> (Vec<u32>, Vec<u32>) {
        let len = self.token_mask[i].iter().filter(|&&m| m).count();
        let row = &self.tokens[i][0..len];
        (row[0..len - 1].to_vec(), row[1..len].to_vec())
    }
}

/// Shuffles examples with a generator keyed by (seed, epoch) and cuts them
/// into padded batches. Identical inputs produce identical batch sequences.
pub fn batches(
    dataset: &Dataset,
    examples: &[Example],
    batch_size: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<Batch>> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16] = 0xba;
    let mut rng = <rand_chacha::ChaCha8Rng as rand_chacha::rand_core::SeedableRng>::from_seed(key);
    order.shuffle(&mut rng);

    let mut out = Vec::new();
    for chunk in order.chunks(batch_size.max(1)) {
        let members: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
        let max_regions = members
            .iter()
            .map(|e| {
                dataset
                    .features_of(&e.image_id)
                    .map(|r| r.num_regions())
                    .unwrap_or(0)
            })
            .max()
            .unwrap_or(0);
        let max_tokens = members.iter().map(|e| e.tokens.len() + 2).max().unwrap_or(2);

        let mut image_ids = Vec::with_capacity(members.len());
        let mut features = Vec::with_capacity(members.len());
        let mut region_mask = Vec::with_capacity(members.len());
        let mut tokens = Vec::with_capacity(members.len());
        let mut token_mask = Vec::with_capacity(members.len());
        for e in members {
            let feats = dataset
                .features_of(&e.image_id)
                .ok_or_else(|| DataError::UnknownImage(e.image_id.clone()))?;
            let (n, d) = (feats.num_regions(), feats.dim());
            let mut data = feats.matrix.data().to_vec();
            data.resize(max_regions * d, 0.0);
            features.push(Tensor::from_vec(vec![max_regions, d], data).expect("padded features"));
            let mut rmask = vec![true; n];
            rmask.resize(max_regions, false);
            region_mask.push(rmask);

            let mut row = Vec::with_capacity(max_tokens);
            row.push(BOS_ID);
            row.extend_from_slice(&e.tokens);
            row.push(EOS_ID);
            let real = row.len();
            row.resize(max_tokens, PAD_ID);
            tokens.push(row);
            let mut tmask = vec![true; real];
            tmask.resize(max_tokens, false);
            token_mask.push(tmask);
            image_ids.push(e.image_id.clone());
        }
        out.push(Batch {
            image_ids,
            features,
            region_mask,
            tokens,
            token_mask,
        });
    }
    Ok(out)
}
