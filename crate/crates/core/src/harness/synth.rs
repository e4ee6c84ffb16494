//! Synthetic caption/video pairs with temporal structure.
//!
//! Every video is a sequence of concept segments; each frame is its
//! segment's concept vector plus Gaussian noise. Videos come in twin pairs:
//! the twin plays the first two concepts in swapped order and has its own
//! remaining concepts. A temporal query names the first two concepts in
//! order ("a THEN b"), so its twin holds exactly the same frames and only
//! the order tells them apart. A static query names two concepts in no
//! particular order, at least one of which the twin lacks.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoders::RawVideo;
use crate::error::{Error, Result};
use crate::index::{read_corpus, write_corpus};
use crate::tensor::Matrix;

pub const PAD_TOKEN: u32 = 0;
pub const BOS_TOKEN: u32 = 1;
pub const EOS_TOKEN: u32 = 2;
pub const THEN_TOKEN: u32 = 3;
pub const AND_TOKEN: u32 = 4;
/// Id of concept 0; concept `k` is token `CONCEPT_TOKEN_BASE + k`.
pub const CONCEPT_TOKEN_BASE: u32 = 5;

/// Concept segments per video.
const SEGMENTS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_concepts: usize,
    pub num_videos: usize,
    /// Videos (rounded down to whole twin pairs) assigned to the training
    /// split; the rest form the test split.
    pub train_videos: usize,
    pub frames_per_video: usize,
    pub queries_per_video: usize,
    /// Share of queries whose answer depends on frame order.
    pub temporal_fraction: f64,
    pub noise_sigma: f64,
    /// Width of the raw per-frame feature vectors.
    pub input_dim: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_concepts: 48,
            num_videos: 320,
            train_videos: 256,
            frames_per_video: 24,
            queries_per_video: 4,
            temporal_fraction: 0.5,
            noise_sigma: 0.3,
            input_dim: 32,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_videos < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 videos, got {}",
                self.num_videos
            )));
        }
        if !(0.0..=1.0).contains(&self.temporal_fraction) {
            return Err(Error::InvalidArgument(format!(
                "temporal_fraction must lie in [0, 1], got {}",
                self.temporal_fraction
            )));
        }
        if self.num_concepts < 2 * SEGMENTS {
            return Err(Error::InvalidArgument(format!(
                "need at least {} concepts, got {}",
                2 * SEGMENTS,
                self.num_concepts
            )));
        }
        if self.frames_per_video < SEGMENTS {
            return Err(Error::InvalidArgument(format!(
                "need at least {SEGMENTS} frames per video, got {}",
                self.frames_per_video
            )));
        }
        if self.queries_per_video == 0 || self.input_dim == 0 {
            return Err(Error::InvalidArgument(
                "queries_per_video and input_dim must be positive".into(),
            ));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument("noise_sigma must be non-negative".into()));
        }
        if self.train_videos > self.num_videos {
            return Err(Error::InvalidArgument(format!(
                "train_videos {} exceeds num_videos {}",
                self.train_videos, self.num_videos
            )));
        }
        Ok(())
    }

    /// Smallest vocabulary covering every token the generator emits.
    pub fn vocab_size(&self) -> usize {
        CONCEPT_TOKEN_BASE as usize + self.num_concepts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthQuery {
    pub id: String,
    pub tokens: Vec<u32>,
    pub video_id: String,
    pub split: Split,
    pub temporal: bool,
}

/// Query id → its single relevant video id.
pub type Qrels = BTreeMap<String, String>;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthDataset {
    pub corpus: Vec<(String, RawVideo<f64>)>,
    /// Concept index of every segment, per video (same order as `corpus`).
    pub concepts: Vec<[usize; SEGMENTS]>,
    pub splits: Vec<Split>,
    pub queries: Vec<SynthQuery>,
    pub qrels: Qrels,
}

fn video_id(i: usize) -> String {
    format!("vid{i:05}")
}

fn concept_token(c: usize) -> u32 {
    CONCEPT_TOKEN_BASE + c as u32
}

/// Draws `n` distinct concepts not in `exclude`.
fn distinct(rng: &mut ChaCha8Rng, num: usize, n: usize, exclude: &[usize]) -> Vec<usize> {
    let pool: Vec<usize> = (0..num).filter(|c| !exclude.contains(c)).collect();
    pool.choose_multiple(rng, n).copied().collect()
}

pub fn gen_synth(cfg: &SynthConfig) -> Result<SynthDataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let d_in = cfg.input_dim;
    let prototypes: Vec<Vec<f64>> = (0..cfg.num_concepts)
        .map(|_| (0..d_in).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
        .collect();

    let mut concepts = Vec::with_capacity(cfg.num_videos);
    while concepts.len() < cfg.num_videos {
        let base = distinct(&mut rng, cfg.num_concepts, SEGMENTS, &[]);
        concepts.push([base[0], base[1], base[2], base[3]]);
        if concepts.len() < cfg.num_videos {
            let rest = distinct(&mut rng, cfg.num_concepts, SEGMENTS - 2, &base);
            concepts.push([base[1], base[0], rest[0], rest[1]]);
        }
    }
    let train_cut = cfg.train_videos - cfg.train_videos % 2;
    let splits: Vec<Split> = (0..cfg.num_videos)
        .map(|i| if i < train_cut { Split::Train } else { Split::Test })
        .collect();

    let mut corpus = Vec::with_capacity(cfg.num_videos);
    for (i, segs) in concepts.iter().enumerate() {
        let t = cfg.frames_per_video;
        let frames = Matrix::from_fn(t, d_in, |f, c| {
            let seg = f * SEGMENTS / t;
            prototypes[segs[seg]][c] + cfg.noise_sigma * rng.sample::<f64, _>(StandardNormal)
        });
        corpus.push((video_id(i), RawVideo::new(frames)?));
    }

    let mut queries = Vec::with_capacity(cfg.num_videos * cfg.queries_per_video);
    let mut qrels = Qrels::new();
    for (i, segs) in concepts.iter().enumerate() {
        for q in 0..cfg.queries_per_video {
            let temporal = rng.gen_bool(cfg.temporal_fraction);
            let body = if temporal {
                vec![concept_token(segs[0]), THEN_TOKEN, concept_token(segs[1])]
            } else {
                // One concept the twin lacks, plus any other concept.
                let own = segs[rng.gen_range(2..SEGMENTS)];
                let other = *segs.iter().filter(|&&c| c != own).collect::<Vec<_>>()[rng.gen_range(0..SEGMENTS - 1)];
                let (x, y) = if rng.gen_bool(0.5) { (own, other) } else { (other, own) };
                vec![concept_token(x), AND_TOKEN, concept_token(y)]
            };
            let mut tokens = vec![BOS_TOKEN];
            tokens.extend(body);
            tokens.push(EOS_TOKEN);
            let id = format!("q{i:05}_{q}");
            qrels.insert(id.clone(), video_id(i));
            queries.push(SynthQuery {
                id,
                tokens,
                video_id: video_id(i),
                split: splits[i],
                temporal,
            });
        }
    }
    Ok(SynthDataset {
        corpus,
        concepts,
        splits,
        queries,
        qrels,
    })
}

impl SynthDataset {
    /// Videos of one split, in corpus order.
    pub fn videos(&self, split: Split) -> Vec<(String, RawVideo<f64>)> {
        self.corpus
            .iter()
            .zip(&self.splits)
            .filter(|(_, s)| **s == split)
            .map(|(v, _)| v.clone())
            .collect()
    }

    pub fn split_queries(&self, split: Split) -> Vec<&SynthQuery> {
        self.queries.iter().filter(|q| q.split == split).collect()
    }

    /// Writes `corpus.jsonl`, `queries.jsonl` and `qrels.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut w = BufWriter::new(File::create(dir.join("corpus.jsonl"))?);
        write_corpus(&mut w, &self.corpus)?;
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("queries.jsonl"))?);
        for q in &self.queries {
            serde_json::to_writer(&mut w, q)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        let mut w = BufWriter::new(File::create(dir.join("qrels.json"))?);
        serde_json::to_writer_pretty(&mut w, &self.qrels)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`Self::save`]. Segment concepts are not stored and come
    /// back empty.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let corpus = read_corpus(BufReader::new(File::open(dir.join("corpus.jsonl"))?))?;
        let queries = read_queries(BufReader::new(File::open(dir.join("queries.jsonl"))?))?;
        let qrels: Qrels = serde_json::from_reader(BufReader::new(File::open(dir.join("qrels.json"))?))?;
        let split_of: BTreeMap<&str, Split> = queries.iter().map(|q| (q.video_id.as_str(), q.split)).collect();
        let splits = corpus
            .iter()
            .map(|(id, _)| split_of.get(id.as_str()).copied().unwrap_or(Split::Test))
            .collect();
        Ok(Self {
            corpus,
            concepts: Vec::new(),
            splits,
            queries,
            qrels,
        })
    }
}

pub fn read_queries(reader: impl BufRead) -> Result<Vec<SynthQuery>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            field: "query line",
            detail: format!("line {}: {e}", n + 1),
        })?);
    }
    Ok(out)
}
