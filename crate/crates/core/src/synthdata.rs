//! Synthetic grounding corpus with a Zipf-distributed vocabulary.
//!
//! Every word owns a random unit-norm concept vector. Frames inside the target
//! interval are the mean of the query's concepts plus Gaussian noise; each
//! frame outside it mixes an independent draw of distractor concepts that
//! share no word with the query. Low-rank words are seen rarely, so rare
//! video-query pairs exist by construction.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::Mat;

pub const CORPUS_FORMAT: &str = "mgsl-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Input(format!("unknown split {other:?}"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub num_train: usize,
    pub num_val: usize,
    pub num_test: usize,
    /// Inclusive range of video lengths.
    pub frames: (usize, usize),
    /// Inclusive range of query lengths.
    pub words: (usize, usize),
    pub vocab_size: usize,
    pub zipf_exponent: f64,
    pub noise: f64,
    pub rare_threshold: usize,
    /// Width of the raw frame features (and concept vectors).
    pub frame_dim: usize,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            num_train: 2000,
            num_val: 400,
            num_test: 400,
            frames: (16, 32),
            words: (3, 6),
            vocab_size: 200,
            zipf_exponent: 1.1,
            noise: 0.1,
            rare_threshold: 10,
            frame_dim: 16,
            seed: 7,
        }
    }
}

impl CorpusConfig {
    pub fn num_samples(&self) -> usize {
        self.num_train + self.num_val + self.num_test
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.rare_threshold < 1 {
            return bad("rare threshold must be at least 1".into());
        }
        if self.frames.0 == 0 || self.frames.0 > self.frames.1 {
            return bad(format!("frame range {:?} is empty", self.frames));
        }
        if self.words.0 == 0 || self.words.0 > self.words.1 {
            return bad(format!("word range {:?} is empty", self.words));
        }
        if self.vocab_size < 2 {
            return bad("vocabulary needs at least 2 words".into());
        }
        if self.words.1 > self.vocab_size {
            return bad(format!("queries of {} words exceed a vocabulary of {}", self.words.1, self.vocab_size));
        }
        if 2 * self.words.1 > self.vocab_size {
            return bad("vocabulary too small to draw distractors disjoint from the query".into());
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return bad(format!("zipf exponent {} must be finite and non-negative", self.zipf_exponent));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be finite and non-negative", self.noise));
        }
        if self.frame_dim == 0 {
            return bad("frame_dim must be positive".into());
        }
        if self.num_samples() == 0 {
            return bad("corpus has no samples".into());
        }
        Ok(())
    }

    pub fn split_of(&self, id: usize) -> Split {
        if id < self.num_train {
            Split::Train
        } else if id < self.num_train + self.num_val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for one sample.
pub fn sample_seed(base: u64, id: u64) -> u64 {
    mix(mix(base) ^ id)
}

const VOCAB_STREAM: u64 = u64::MAX;

/// Rank probabilities `P(r) ∝ r^{−s}` for ranks 1..=W; word id = rank − 1.
pub fn zipf_probabilities(vocab: usize, s: f64) -> Vec<f64> {
    let w: Vec<f64> = (1..=vocab).map(|r| (r as f64).powf(-s)).collect();
    let z: f64 = w.iter().sum();
    w.into_iter().map(|x| x / z).collect()
}

#[derive(Debug, Clone)]
pub struct ZipfSampler {
    index: WeightedIndex<f64>,
    vocab: usize,
}

impl ZipfSampler {
    pub fn new(vocab: usize, s: f64) -> Result<Self> {
        if vocab < 2 {
            return Err(Error::Config("vocabulary needs at least 2 words".into()));
        }
        let index = WeightedIndex::new(zipf_probabilities(vocab, s)).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { index, vocab })
    }

    pub fn draw<R: Rng>(&self, rng: &mut R) -> usize {
        self.index.sample(rng)
    }

    /// `n` distinct word ids, by rejection.
    pub fn sample_words<R: Rng>(&self, rng: &mut R, n: usize) -> Result<Vec<usize>> {
        if n > self.vocab {
            return Err(Error::Config(format!("cannot draw {n} distinct words from {}", self.vocab)));
        }
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let w = self.draw(rng);
            if !out.contains(&w) {
                out.push(w);
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    /// W×frame_dim, unit-norm rows.
    pub concepts: Mat,
    /// Occurrences of each word in the training split.
    pub frequencies: Vec<usize>,
}

impl Vocabulary {
    pub fn generate(cfg: &CorpusConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, VOCAB_STREAM));
        let mut concepts = Mat::zeros((cfg.vocab_size, cfg.frame_dim));
        for mut row in concepts.rows_mut() {
            loop {
                row.iter_mut().for_each(|x| *x = rng.sample(StandardNormal));
                let n = row.dot(&row).sqrt();
                if n > 1e-6 {
                    row /= n;
                    break;
                }
            }
        }
        Self { concepts, frequencies: vec![0; cfg.vocab_size] }
    }

    pub fn len(&self) -> usize {
        self.concepts.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Hex SHA-256 of the concept matrix bytes.
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for x in self.concepts.iter() {
            h.update(x.to_le_bytes());
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn mixture(&self, words: &[usize]) -> ndarray::Array1<f64> {
        let mut m = ndarray::Array1::zeros(self.concepts.ncols());
        for &w in words {
            m += &self.concepts.row(w);
        }
        m / words.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub id: usize,
    pub split: Split,
    /// T×frame_dim raw frame features.
    pub frames: Mat,
    pub words: Vec<usize>,
    /// Inclusive frame indices (τs, τe).
    pub gt: (usize, usize),
    pub rare: bool,
}

impl GroundingSample {
    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }
}

/// One sample from its own derived seed.
pub fn generate_sample(cfg: &CorpusConfig, vocab: &Vocabulary, sampler: &ZipfSampler, id: usize) -> Result<GroundingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(cfg.seed, id as u64));
    let t = rng.random_range(cfg.frames.0..=cfg.frames.1);
    let n = rng.random_range(cfg.words.0..=cfg.words.1);
    let words = sampler.sample_words(&mut rng, n)?;
    let len = rng.random_range(t.div_ceil(8)..=t.div_ceil(2));
    let start = rng.random_range(0..=t - len);
    let gt = (start, start + len - 1);

    let noise = Normal::new(0.0, cfg.noise).map_err(|e| Error::Config(e.to_string()))?;
    let query: HashSet<usize> = words.iter().copied().collect();
    let target = vocab.mixture(&words);
    let mut frames = Mat::zeros((t, cfg.frame_dim));
    for (f, mut row) in frames.rows_mut().into_iter().enumerate() {
        let base = if gt.0 <= f && f <= gt.1 {
            target.clone()
        } else {
            let mut others = Vec::with_capacity(n);
            while others.len() < n {
                let w = rng.random_range(0..vocab.len());
                if !query.contains(&w) && !others.contains(&w) {
                    others.push(w);
                }
            }
            vocab.mixture(&others)
        };
        for (x, b) in row.iter_mut().zip(base.iter()) {
            *x = b + if cfg.noise > 0.0 { noise.sample(&mut rng) } else { 0.0 };
        }
    }
    Ok(GroundingSample { id, split: cfg.split_of(id), frames, words, gt, rare: false })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocabulary,
    pub samples: Vec<GroundingSample>,
}

impl Corpus {
    pub fn generate(cfg: &CorpusConfig) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocabulary::generate(cfg);
        let sampler = ZipfSampler::new(cfg.vocab_size, cfg.zipf_exponent)?;
        let samples = (0..cfg.num_samples())
            .map(|id| generate_sample(cfg, &vocab, &sampler, id))
            .collect::<Result<Vec<_>>>()?;
        let mut corpus = Self { config: cfg.clone(), vocab, samples };
        label_rarity(&mut corpus)?;
        Ok(corpus)
    }

    pub fn split(&self, split: Split) -> Vec<&GroundingSample> {
        self.samples.iter().filter(|s| s.split == split).collect()
    }

    pub fn rare_fraction(&self, split: Split) -> f64 {
        let s = self.split(split);
        if s.is_empty() {
            return 0.0;
        }
        s.iter().filter(|x| x.rare).count() as f64 / s.len() as f64
    }
}

/// Counts words over the training split and flags every sample holding a
/// word seen fewer than `rare_threshold` times there.
pub fn label_rarity(corpus: &mut Corpus) -> Result<()> {
    if corpus.samples.is_empty() {
        return Err(Error::Input("cannot label rarity of an empty corpus".into()));
    }
    let mut counts = vec![0usize; corpus.vocab.len()];
    for s in corpus.samples.iter().filter(|s| s.split == Split::Train) {
        for &w in &s.words {
            *counts
                .get_mut(w)
                .ok_or_else(|| Error::Input(format!("word id {w} outside the vocabulary")))? += 1;
        }
    }
    let threshold = corpus.config.rare_threshold;
    for s in &mut corpus.samples {
        s.rare = s.words.iter().any(|&w| counts.get(w).copied().unwrap_or(0) < threshold);
    }
    corpus.vocab.frequencies = counts;
    Ok(())
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    config: CorpusConfig,
    vocab_checksum: String,
}

fn format_err(msg: impl Into<String>) -> Error {
    Error::Format { what: "corpus file", msg: msg.into() }
}

/// JSON lines: one header record, then one record per sample.
pub fn write_corpus<W: Write>(corpus: &Corpus, mut out: W) -> Result<()> {
    let header = Header {
        format: CORPUS_FORMAT.into(),
        version: CORPUS_VERSION,
        config: corpus.config.clone(),
        vocab_checksum: corpus.vocab.checksum(),
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for s in &corpus.samples {
        serde_json::to_writer(&mut out, s)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<Corpus> {
    let mut lines = input.lines();
    let first = lines.next().ok_or_else(|| format_err("empty file"))??;
    let header: Header = serde_json::from_str(&first).map_err(|e| format_err(format!("header: {e}")))?;
    if header.format != CORPUS_FORMAT {
        return Err(format_err(format!("unexpected format tag {:?}", header.format)));
    }
    if header.version != CORPUS_VERSION {
        return Err(format_err(format!("unsupported version {}", header.version)));
    }
    header.config.validate()?;
    let mut vocab = Vocabulary::generate(&header.config);
    if vocab.checksum() != header.vocab_checksum {
        return Err(format_err("vocabulary checksum mismatch"));
    }
    let mut samples = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s: GroundingSample = serde_json::from_str(&line).map_err(|e| format_err(format!("record {i}: {e}")))?;
        if s.frames.ncols() != header.config.frame_dim || s.gt.0 > s.gt.1 || s.gt.1 >= s.frames.nrows() {
            return Err(format_err(format!("record {i} is inconsistent")));
        }
        if s.words.iter().any(|&w| w >= vocab.len()) {
            return Err(format_err(format!("record {i} has an out-of-vocabulary word")));
        }
        samples.push(s);
    }
    if samples.len() != header.config.num_samples() {
        return Err(format_err(format!("expected {} records, found {}", header.config.num_samples(), samples.len())));
    }
    let mut counts = vec![0usize; vocab.len()];
    for s in samples.iter().filter(|s| s.split == Split::Train) {
        s.words.iter().for_each(|&w| counts[w] += 1);
    }
    vocab.frequencies = counts;
    Ok(Corpus { config: header.config, vocab, samples })
}
