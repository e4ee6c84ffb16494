//! Immutable two-level multi-vector index and the query-time search path.
//!
//! Each record holds the frame bank (`N x D`) and the video bank
//! (`(N+E) x D`) of one video. Features are stored at 32-bit precision and
//! scored at 64-bit; values are rounded to `f32` when the index is built,
//! so an index loaded from disk scores exactly like the one that wrote it.
//!
//! File layout (little-endian): magic `VCB1`, version `u32`, `D u32`,
//! record count `u64`, then per record the id (`u16` length + UTF-8),
//! `N u32`, `E u32`, `N x D` then `(N+E) x D` `f32` values row-major, and a
//! trailing CRC32 of every preceding byte.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::str::FromStr;
use std::time::{Duration, Instant};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{Decoder, Encoder};
use crate::encoders::{AttnMode, EncoderParams, RawVideo, TokenizedQuery};
use crate::error::{Error, Result};
use crate::fusion::{rank, rrf_fuse, RankedList, DEFAULT_RRF_K};
use crate::scoring::{FrameBank, QueryEncoding, ScoreKind, Scorer, VideoBank};
use crate::tensor::Matrix;

pub const INDEX_MAGIC: &[u8; 4] = b"VCB1";
pub const INDEX_VERSION: u32 = 1;
pub const MAX_ID_BYTES: usize = 64;

/// Scoring mechanism used by [`VideoIndex::search`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SearchMode {
    /// Pooled query vector against the mean frame feature.
    #[serde(rename = "mp")]
    Mp,
    /// Pooled query vector against the mean contextualized feature.
    #[serde(rename = "mp_video")]
    MpVideo,
    #[serde(rename = "sms")]
    Sms,
    #[serde(rename = "mms_f")]
    MmsF,
    #[serde(rename = "mms_v")]
    MmsV,
    #[serde(rename = "mms_fv")]
    MmsFv,
    /// Reciprocal rank fusion of the MMS_F and MMS_V rankings.
    #[serde(rename = "rrf_fv")]
    RrfFv,
}

impl SearchMode {
    pub const ALL: [SearchMode; 7] = [
        Self::Mp,
        Self::MpVideo,
        Self::Sms,
        Self::MmsF,
        Self::MmsV,
        Self::MmsFv,
        Self::RrfFv,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mp => "mp",
            Self::MpVideo => "mp_video",
            Self::Sms => "sms",
            Self::MmsF => "mms_f",
            Self::MmsV => "mms_v",
            Self::MmsFv => "mms_fv",
            Self::RrfFv => "rrf_fv",
        }
    }
}

impl fmt::Display for SearchMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SearchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|m| m.as_str() == lower)
            .ok_or_else(|| Error::Unknown {
                kind: "search mode",
                name: s.to_string(),
            })
    }
}

/// One indexed video.
#[derive(Clone, Debug, PartialEq)]
pub struct IndexRecord {
    pub id: String,
    pub frames: FrameBank<f64>,
    pub feats: VideoBank<f64>,
}

/// Ranked results plus timings of one query.
#[derive(Clone, Debug, PartialEq)]
pub struct SearchOutcome {
    pub ranking: RankedList,
    pub encode_time: Duration,
    pub scoring_time: Duration,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VideoIndex {
    dim: usize,
    records: Vec<IndexRecord>,
}

fn round_f32(m: &Matrix<f64>) -> Matrix<f64> {
    m.map(|v| v as f32 as f64)
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.len() > MAX_ID_BYTES {
        return Err(Error::InvalidArgument(format!(
            "video id `{id}` must be 1..={MAX_ID_BYTES} bytes, got {}",
            id.len()
        )));
    }
    Ok(())
}

impl VideoIndex {
    /// Assembles an index from ready-made banks, rounding them to 32-bit
    /// precision.
    pub fn from_records(dim: usize, records: Vec<IndexRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Empty("index corpus"));
        }
        let mut seen = HashSet::new();
        let mut rounded = Vec::with_capacity(records.len());
        for r in records {
            check_id(&r.id)?;
            if !seen.insert(r.id.clone()) {
                return Err(Error::DuplicateId(r.id));
            }
            for got in [r.frames.dim(), r.feats.dim()] {
                if got != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got });
                }
            }
            if r.feats.frame_count() != r.frames.len() {
                return Err(Error::InvalidArgument(format!(
                    "record `{}`: {} frames but {} contextualized frame rows",
                    r.id,
                    r.frames.len(),
                    r.feats.frame_count()
                )));
            }
            rounded.push(IndexRecord {
                frames: FrameBank::new(round_f32(r.frames.frames()))?,
                feats: VideoBank::new(round_f32(r.feats.feats()), r.feats.expansion_count())?,
                id: r.id,
            });
        }
        Ok(Self { dim, records: rounded })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn records(&self) -> &[IndexRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut e = Encoder::new(INDEX_MAGIC, INDEX_VERSION);
        e.u32(self.dim as u32);
        e.u64(self.records.len() as u64);
        for r in &self.records {
            e.short_str("id", &r.id)?;
            e.u32(r.frames.len() as u32);
            e.u32(r.feats.expansion_count() as u32);
            e.f32s(r.frames.frames().as_slice().iter().map(|&v| v as f32));
            e.f32s(r.feats.feats().as_slice().iter().map(|&v| v as f32));
        }
        Ok(e.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut d = Decoder::open(bytes, INDEX_MAGIC, INDEX_VERSION)?;
        let dim = d.u32("dim")? as usize;
        if dim == 0 {
            return Err(Error::Format {
                field: "dim",
                detail: "dimension must be positive".into(),
            });
        }
        let count = d.u64("record count")? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 20));
        for _ in 0..count {
            let id = d.short_str("id")?;
            let n = d.u32("frame count")? as usize;
            let e = d.u32("expansion count")? as usize;
            let frames = d.f32s("frame features", n.saturating_mul(dim))?;
            let feats = d.f32s("video features", (n + e).saturating_mul(dim))?;
            let widen = |v: Vec<f32>| v.into_iter().map(f64::from).collect::<Vec<_>>();
            records.push(IndexRecord {
                frames: FrameBank::new(Matrix::new(n, dim, widen(frames))?)?,
                feats: VideoBank::new(Matrix::new(n + e, dim, widen(feats))?, e)?,
                id,
            });
        }
        d.finish()?;
        Self::from_records(dim, records)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    fn check_query(&self, qe: &QueryEncoding<f64>, top_k: usize) -> Result<()> {
        if qe.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: qe.dim(),
            });
        }
        if top_k == 0 {
            return Err(Error::InvalidArgument("top_k must be at least 1".into()));
        }
        Ok(())
    }

    fn score_record(scorer: &mut Scorer<f64>, kind: SearchMode, qe: &QueryEncoding<f64>, r: &IndexRecord) -> f64 {
        match kind {
            SearchMode::Mp => scorer.score(ScoreKind::Mp, qe, &r.frames, &r.feats),
            SearchMode::MpVideo => crate::tensor::dot(qe.pooled(), &column_mean(r.feats.feats())),
            SearchMode::Sms => scorer.score(ScoreKind::Sms, qe, &r.frames, &r.feats),
            SearchMode::MmsF => scorer.mms_f(qe, &r.frames),
            SearchMode::MmsV => scorer.mms_v(qe, &r.feats),
            SearchMode::MmsFv | SearchMode::RrfFv => scorer.mms_fv(qe, &r.frames, &r.feats),
        }
    }

    /// Score of every record in index order. `RrfFv` has no per-record
    /// score and is rejected here.
    pub fn scores(&self, qe: &QueryEncoding<f64>, mode: SearchMode, parallel: bool) -> Result<Vec<f64>> {
        self.check_query(qe, 1)?;
        if mode == SearchMode::RrfFv {
            return Err(Error::InvalidArgument("rrf_fv produces ranks, not scores".into()));
        }
        Ok(if parallel {
            self.records
                .par_iter()
                .map_init(Scorer::new, |s, r| Self::score_record(s, mode, qe, r))
                .collect()
        } else {
            let mut s = Scorer::new();
            self.records.iter().map(|r| Self::score_record(&mut s, mode, qe, r)).collect()
        })
    }

    fn ranked(&self, scores: Vec<f64>) -> Result<RankedList> {
        rank(self.records.iter().map(|r| r.id.as_str()).zip(scores))
    }

    /// Top-`top_k` records under `mode` with deterministic tie-breaking.
    pub fn search(&self, qe: &QueryEncoding<f64>, top_k: usize, mode: SearchMode) -> Result<RankedList> {
        Ok(self.search_timed(qe, top_k, mode, false)?.0)
    }

    /// As [`Self::search`], scoring records on the rayon pool.
    pub fn search_parallel(&self, qe: &QueryEncoding<f64>, top_k: usize, mode: SearchMode) -> Result<RankedList> {
        Ok(self.search_timed(qe, top_k, mode, true)?.0)
    }

    /// Search plus the time spent scoring and ranking.
    pub fn search_timed(
        &self,
        qe: &QueryEncoding<f64>,
        top_k: usize,
        mode: SearchMode,
        parallel: bool,
    ) -> Result<(RankedList, Duration)> {
        self.check_query(qe, top_k)?;
        let start = Instant::now();
        let ranking = match mode {
            SearchMode::RrfFv => self.rrf_ranking(qe, DEFAULT_RRF_K, parallel)?,
            _ => self.ranked(self.scores(qe, mode, parallel)?)?,
        };
        Ok((ranking.truncate(top_k), start.elapsed()))
    }

    fn rrf_ranking(&self, qe: &QueryEncoding<f64>, k: f64, parallel: bool) -> Result<RankedList> {
        let f = self.ranked(self.scores(qe, SearchMode::MmsF, parallel)?)?;
        let v = self.ranked(self.scores(qe, SearchMode::MmsV, parallel)?)?;
        rrf_fuse(&[f, v], k)
    }

    /// Reciprocal rank fusion of the MMS_F and MMS_V rankings with constant `k`.
    pub fn search_rrf(&self, qe: &QueryEncoding<f64>, top_k: usize, k: f64) -> Result<RankedList> {
        self.check_query(qe, top_k)?;
        Ok(self.rrf_ranking(qe, k, false)?.truncate(top_k))
    }

    /// Encodes `query` with `params` and searches, timing both stages.
    pub fn search_query(
        &self,
        params: &EncoderParams<f64>,
        query: &TokenizedQuery,
        attn: AttnMode,
        augment: bool,
        top_k: usize,
        mode: SearchMode,
    ) -> Result<SearchOutcome> {
        let start = Instant::now();
        let qe = params.encode_query(query, attn, augment)?;
        let encode_time = start.elapsed();
        let (ranking, scoring_time) = self.search_timed(&qe, top_k, mode, false)?;
        Ok(SearchOutcome {
            ranking,
            encode_time,
            scoring_time,
        })
    }

    /// Score maps for MMS_F and MMS_V, keyed by id.
    pub fn level_scores(&self, qe: &QueryEncoding<f64>) -> Result<[BTreeMap<String, f64>; 2]> {
        let ids = || self.records.iter().map(|r| r.id.clone());
        Ok([
            ids().zip(self.scores(qe, SearchMode::MmsF, false)?).collect(),
            ids().zip(self.scores(qe, SearchMode::MmsV, false)?).collect(),
        ])
    }
}

fn column_mean(m: &Matrix<f64>) -> Vec<f64> {
    let mut acc = vec![0.0; m.cols()];
    for r in m.row_iter() {
        acc.iter_mut().zip(r).for_each(|(a, v)| *a += v);
    }
    let n = m.rows() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// Encodes every video once (frame and temporal paths share the forward
/// pass). Returns the index and the wall time spent on each video.
pub fn build_index(
    corpus: &[(String, RawVideo<f64>)],
    params: &EncoderParams<f64>,
    n_frames: usize,
) -> Result<(VideoIndex, Vec<Duration>)> {
    if corpus.is_empty() {
        return Err(Error::Empty("index corpus"));
    }
    let mut seen = HashSet::new();
    for (id, _) in corpus {
        check_id(id)?;
        if !seen.insert(id.as_str()) {
            return Err(Error::DuplicateId(id.clone()));
        }
    }
    let frozen = params.frozen();
    let mut records = Vec::with_capacity(corpus.len());
    let mut times = Vec::with_capacity(corpus.len());
    for (id, video) in corpus {
        let start = Instant::now();
        let (frames, feats) = frozen.encode_video(video, n_frames)?;
        times.push(start.elapsed());
        records.push(IndexRecord {
            id: id.clone(),
            frames,
            feats,
        });
    }
    Ok((VideoIndex::from_records(params.config.dim, records)?, times))
}

/// One corpus line: `{"id": "...", "frames": [[f, ...], ...]}`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CorpusLine {
    pub id: String,
    pub frames: Vec<Vec<f64>>,
}

/// Reads a line-delimited JSON corpus; blank lines are skipped.
pub fn read_corpus(reader: impl BufRead) -> Result<Vec<(String, RawVideo<f64>)>> {
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusLine = serde_json::from_str(&line).map_err(|e| Error::Format {
            field: "corpus line",
            detail: format!("line {}: {e}", n + 1),
        })?;
        let m = Matrix::from_rows(&rec.frames.iter().map(Vec::as_slice).collect::<Vec<_>>())?;
        out.push((rec.id, RawVideo::new(m)?));
    }
    Ok(out)
}

pub fn write_corpus(mut writer: impl Write, corpus: &[(String, RawVideo<f64>)]) -> Result<()> {
    for (id, v) in corpus {
        let line = CorpusLine {
            id: id.clone(),
            frames: v.frame_features().row_iter().map(<[f64]>::to_vec).collect(),
        };
        serde_json::to_writer(&mut writer, &line)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}
