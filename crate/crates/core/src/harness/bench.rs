//! Indexing and query latency measurements.
//!
//! All numbers are wall-clock on the calling thread. Repeats are
//! interleaved across modes so drift in machine load affects every mode
//! alike, and the minimum over repeats is reported.

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::encoders::{AttnMode, EncoderParams, RawVideo, TokenizedQuery};
use crate::error::{Error, Result};
use crate::index::{build_index, IndexRecord, SearchMode, VideoIndex};
use crate::scoring::QueryEncoding;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchConfig {
    pub modes: Vec<SearchMode>,
    pub num_frames: usize,
    pub attn: AttnMode,
    pub augment: bool,
    pub top_k: usize,
    pub repeats: usize,
    /// Corpus prefixes scored for the scaling fit.
    pub scaling_sizes: Vec<usize>,
    /// Queries per scaling measurement.
    pub scaling_queries: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            modes: SearchMode::ALL.to_vec(),
            num_frames: crate::encoders::DEFAULT_NUM_FRAMES,
            attn: AttnMode::Causal,
            augment: true,
            top_k: 10,
            repeats: 5,
            scaling_sizes: vec![250, 500, 1000, 2000],
            scaling_queries: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub encode_p50_ms: f64,
    pub encode_p95_ms: f64,
    pub score_p50_ms: f64,
    pub score_p95_ms: f64,
    pub total_p50_ms: f64,
    pub total_p95_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusedScoringCost {
    pub queries: usize,
    pub videos: usize,
    pub mms_fv_ms: f64,
    pub mms_f_plus_mms_v_ms: f64,
    /// `mms_fv_ms / mms_f_plus_mms_v_ms`.
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub sizes: Vec<usize>,
    pub scoring_ms: Vec<f64>,
    pub slope_ms_per_video: f64,
    pub intercept_ms: f64,
    pub r_squared: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchTiming {
    pub indexing_ms_per_video: BTreeMap<String, f64>,
    pub latency: BTreeMap<String, LatencyStats>,
    pub fused_scoring: FusedScoringCost,
    pub scaling: Option<ScalingFit>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub config: BenchConfig,
    pub videos: usize,
    pub queries: usize,
    pub dim: usize,
    pub threads: usize,
    pub timing: BenchTiming,
}

fn ms(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

/// Nearest-rank percentile of an unsorted sample.
pub fn percentile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((p / 100.0) * v.len() as f64).ceil().max(1.0) as usize;
    v[rank.min(v.len()) - 1]
}

/// Least-squares line through `(x, y)`; returns `(slope, intercept, R²)`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<(f64, f64, f64)> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::InvalidArgument("linear fit needs at least two paired points".into()));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let syy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidArgument("linear fit needs distinct x values".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let r2 = if syy == 0.0 { 1.0 } else { sxy * sxy / (sxx * syy) };
    Ok((slope, intercept, r2))
}

/// Encoder work needed to index one video for `mode`, timed.
fn index_one(params: &EncoderParams<f64>, video: &RawVideo<f64>, n: usize, mode: SearchMode) -> Result<Duration> {
    let start = Instant::now();
    match mode {
        SearchMode::Mp | SearchMode::Sms | SearchMode::MmsF => {
            std::hint::black_box(params.encode_frames(video, n)?);
        }
        SearchMode::MpVideo | SearchMode::MmsV => {
            let tokens = params.frame_tokens(&[video], n)?;
            std::hint::black_box(params.encode_temporal(&tokens, &[n])?);
        }
        SearchMode::MmsFv | SearchMode::RrfFv => {
            std::hint::black_box(params.encode_video(video, n)?);
        }
    }
    Ok(start.elapsed())
}

/// Per-mode indexing cost in ms per video: each video is encoded
/// `repeats` times per mode (interleaved) and its fastest run counts.
pub fn indexing_cost(
    params: &EncoderParams<f64>,
    corpus: &[(String, RawVideo<f64>)],
    modes: &[SearchMode],
    num_frames: usize,
    repeats: usize,
) -> Result<BTreeMap<String, f64>> {
    if corpus.is_empty() || modes.is_empty() {
        return Err(Error::Empty("indexing benchmark input"));
    }
    let frozen = params.frozen();
    let mut totals = vec![Duration::ZERO; modes.len()];
    for (_, video) in corpus {
        let mut best = vec![Duration::MAX; modes.len()];
        for _ in 0..repeats.max(1) {
            for (b, &mode) in best.iter_mut().zip(modes) {
                *b = (*b).min(index_one(&frozen, video, num_frames, mode)?);
            }
        }
        totals.iter_mut().zip(&best).for_each(|(t, b)| *t += *b);
    }
    Ok(modes
        .iter()
        .zip(totals)
        .map(|(m, t)| (m.as_str().to_string(), ms(t) / corpus.len() as f64))
        .collect())
}

/// Query latency per mode, split into encoding and scoring.
pub fn query_latency(
    params: &EncoderParams<f64>,
    index: &VideoIndex,
    queries: &[TokenizedQuery],
    cfg: &BenchConfig,
) -> Result<BTreeMap<String, LatencyStats>> {
    if queries.is_empty() {
        return Err(Error::Empty("benchmark queries"));
    }
    let frozen = params.frozen();
    let mut samples: Vec<[Vec<f64>; 3]> = vec![Default::default(); cfg.modes.len()];
    for q in queries {
        for (s, &mode) in samples.iter_mut().zip(&cfg.modes) {
            let out = index.search_query(&frozen, q, cfg.attn, cfg.augment, cfg.top_k, mode)?;
            let (e, sc) = (ms(out.encode_time), ms(out.scoring_time));
            s[0].push(e);
            s[1].push(sc);
            s[2].push(e + sc);
        }
    }
    Ok(cfg
        .modes
        .iter()
        .zip(samples)
        .map(|(m, [e, s, t])| {
            (m.as_str().to_string(), LatencyStats {
                encode_p50_ms: percentile(&e, 50.0),
                encode_p95_ms: percentile(&e, 95.0),
                score_p50_ms: percentile(&s, 50.0),
                score_p95_ms: percentile(&s, 95.0),
                total_p50_ms: percentile(&t, 50.0),
                total_p95_ms: percentile(&t, 95.0),
            })
        })
        .collect())
}

/// Scoring-only cost of MMS_FV against scoring MMS_F and MMS_V separately,
/// over every query and the whole index. Each measurement keeps the
/// fastest of `repeats` interleaved passes.
pub fn fused_scoring_cost(index: &VideoIndex, queries: &[QueryEncoding<f64>], repeats: usize) -> Result<FusedScoringCost> {
    if queries.is_empty() {
        return Err(Error::Empty("benchmark queries"));
    }
    let mut fv = Duration::ZERO;
    let mut split = Duration::ZERO;
    for qe in queries {
        let (mut best_fv, mut best_split) = (Duration::MAX, Duration::MAX);
        for _ in 0..repeats.max(1) {
            let start = Instant::now();
            std::hint::black_box(index.scores(qe, SearchMode::MmsFv, false)?);
            best_fv = best_fv.min(start.elapsed());
            let start = Instant::now();
            std::hint::black_box(index.scores(qe, SearchMode::MmsF, false)?);
            std::hint::black_box(index.scores(qe, SearchMode::MmsV, false)?);
            best_split = best_split.min(start.elapsed());
        }
        fv += best_fv;
        split += best_split;
    }
    Ok(FusedScoringCost {
        queries: queries.len(),
        videos: index.len(),
        mms_fv_ms: ms(fv),
        mms_f_plus_mms_v_ms: ms(split),
        ratio: fv.as_secs_f64() / split.as_secs_f64(),
    })
}

/// MMS_FV scoring time over corpus prefixes of the given sizes, with a
/// linear fit of time against size.
pub fn scoring_scaling(
    records: &[IndexRecord],
    dim: usize,
    sizes: &[usize],
    queries: &[QueryEncoding<f64>],
    repeats: usize,
) -> Result<ScalingFit> {
    if queries.is_empty() {
        return Err(Error::Empty("benchmark queries"));
    }
    if let Some(&s) = sizes.iter().find(|&&s| s == 0 || s > records.len()) {
        return Err(Error::InvalidArgument(format!(
            "scaling size {s} outside 1..={}",
            records.len()
        )));
    }
    let indexes = sizes
        .iter()
        .map(|&s| VideoIndex::from_records(dim, records[..s].to_vec()))
        .collect::<Result<Vec<_>>>()?;
    let mut best = vec![Duration::MAX; sizes.len()];
    for _ in 0..repeats.max(1) {
        for (b, idx) in best.iter_mut().zip(&indexes) {
            let start = Instant::now();
            for qe in queries {
                std::hint::black_box(idx.scores(qe, SearchMode::MmsFv, false)?);
            }
            *b = (*b).min(start.elapsed());
        }
    }
    let x: Vec<f64> = sizes.iter().map(|&s| s as f64).collect();
    let y: Vec<f64> = best.into_iter().map(ms).collect();
    let (slope, intercept, r2) = linear_fit(&x, &y)?;
    Ok(ScalingFit {
        sizes: sizes.to_vec(),
        scoring_ms: y,
        slope_ms_per_video: slope,
        intercept_ms: intercept,
        r_squared: r2,
    })
}

/// Full benchmark: indexes `corpus`, then measures indexing cost, query
/// latency, fused scoring cost and scaling (the latter two only when
/// enough videos are available).
pub fn bench(
    params: &EncoderParams<f64>,
    corpus: &[(String, RawVideo<f64>)],
    queries: &[TokenizedQuery],
    cfg: &BenchConfig,
) -> Result<BenchReport> {
    if corpus.is_empty() || queries.is_empty() || cfg.modes.is_empty() {
        return Err(Error::Empty("benchmark input"));
    }
    let (index, _) = build_index(corpus, params, cfg.num_frames)?;
    let indexing = indexing_cost(params, corpus, &cfg.modes, cfg.num_frames, cfg.repeats)?;
    let latency = query_latency(params, &index, queries, cfg)?;
    let frozen = params.frozen();
    let encoded = queries
        .iter()
        .map(|q| frozen.encode_query(q, cfg.attn, cfg.augment))
        .collect::<Result<Vec<_>>>()?;
    let fused = fused_scoring_cost(&index, &encoded, cfg.repeats)?;
    let fit_sizes: Vec<usize> = cfg.scaling_sizes.iter().copied().filter(|&s| s <= index.len()).collect();
    let scaling = if fit_sizes.len() >= 2 {
        let q = &encoded[..cfg.scaling_queries.clamp(1, encoded.len())];
        Some(scoring_scaling(index.records(), index.dim(), &fit_sizes, q, cfg.repeats)?)
    } else {
        None
    };
    Ok(BenchReport {
        config: cfg.clone(),
        videos: index.len(),
        queries: queries.len(),
        dim: index.dim(),
        threads: rayon::current_num_threads(),
        timing: BenchTiming {
            indexing_ms_per_video: indexing,
            latency,
            fused_scoring: fused,
            scaling,
        },
    })
}
