//! In-batch contrastive training of the toy bi-encoder and test-split
//! evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoders::{tokenize_pad, write_checkpoint, AttnMode, EncoderConfig, EncoderParams, ParamGroup, RawVideo, TokenizedQuery};
use crate::error::{Error, Result};
use crate::fusion::RankedList;
use crate::index::{build_index, SearchMode};
use crate::losses::{
    infonce_loss, sigmoid_loss, LossKind, LossParams, PairLabels, DEFAULT_LOGIT_BIAS, DEFAULT_LOGIT_SCALE,
};
use crate::scoring::{batch_similarity_tracked, ScoreKind, VideoBatch};
use crate::tensor::{Matrix, Tensor};

use super::metrics::Metrics;
use super::synth::{Qrels, Split, SynthDataset, PAD_TOKEN};

/// Similarity the training objective is computed on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainSimilarity {
    #[serde(rename = "mp_frame")]
    MpFrame,
    #[serde(rename = "mp_video")]
    MpVideo,
    #[serde(rename = "mms_f")]
    MmsF,
    #[serde(rename = "mms_v")]
    MmsV,
    /// Both levels, combined according to the loss kind.
    #[serde(rename = "mms_fv")]
    MmsFv,
}

impl TrainSimilarity {
    pub const ALL: [TrainSimilarity; 5] = [Self::MpFrame, Self::MpVideo, Self::MmsF, Self::MmsV, Self::MmsFv];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::MpFrame => "mp_frame",
            Self::MpVideo => "mp_video",
            Self::MmsF => "mms_f",
            Self::MmsV => "mms_v",
            Self::MmsFv => "mms_fv",
        }
    }
}

impl fmt::Display for TrainSimilarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TrainSimilarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == norm)
            .ok_or_else(|| Error::Unknown {
                kind: "training similarity",
                name: s.to_string(),
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr_backbone: f64,
    pub lr_temporal: f64,
    /// Learning rate of the logit scale and bias.
    pub lr_loss: f64,
    /// Keeps token and text-position embeddings at their initial values.
    pub freeze_embeddings: bool,
    pub warmup_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub loss: LossKind,
    pub similarity: TrainSimilarity,
    pub lambda_f: f64,
    pub lambda_v: f64,
    pub logit_scale: f64,
    pub logit_bias: f64,
    /// Separate logit scale/bias for the video-level term.
    pub per_level_scales: bool,
    pub attn: AttnMode,
    pub augment: bool,
    pub query_len: usize,
    pub num_frames: usize,
    pub encoder: EncoderConfig,
    /// Evaluate the test split every this many epochs (0: only at the end).
    pub eval_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            epochs: 20,
            lr_backbone: 2e-3,
            lr_temporal: 2e-3,
            lr_loss: 0.5,
            freeze_embeddings: false,
            warmup_fraction: 0.1,
            weight_decay: 0.01,
            grad_clip: 1.0,
            beta1: 0.9,
            beta2: 0.98,
            adam_eps: 1e-6,
            loss: LossKind::SigmoidDual,
            similarity: TrainSimilarity::MmsFv,
            lambda_f: 1.0,
            lambda_v: 1.0,
            logit_scale: DEFAULT_LOGIT_SCALE,
            logit_bias: DEFAULT_LOGIT_BIAS,
            per_level_scales: false,
            attn: AttnMode::Causal,
            augment: true,
            query_len: crate::encoders::DEFAULT_QUERY_LEN,
            num_frames: crate::encoders::DEFAULT_NUM_FRAMES,
            encoder: EncoderConfig::default(),
            eval_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn loss_params(&self) -> Result<LossParams<f64>> {
        let p = LossParams::new(self.logit_scale, self.logit_bias, self.lambda_f, self.lambda_v)?;
        Ok(if self.per_level_scales { p.with_per_level_scales() } else { p })
    }
}

/// Modes reported by every evaluation.
pub const EVAL_MODES: [SearchMode; 6] = [
    SearchMode::Mp,
    SearchMode::MpVideo,
    SearchMode::MmsF,
    SearchMode::MmsV,
    SearchMode::MmsFv,
    SearchMode::RrfFv,
];

pub type ModeMetrics = BTreeMap<String, Metrics>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub logit_scale: f64,
    pub logit_bias: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub test: Option<ModeMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainTiming {
    pub train_secs: f64,
    pub eval_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub steps: usize,
    /// Mean loss over the first epoch's batches before any update.
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epochs: Vec<EpochLog>,
    pub test: ModeMetrics,
    pub timing: TrainTiming,
}

pub struct TrainOutcome {
    pub params: EncoderParams<f64>,
    pub loss_params: LossParams<f64>,
    pub report: TrainReport,
}

impl TrainOutcome {
    /// Checkpoint bytes holding the encoder and the learned loss
    /// parameters (stored as `loss.*` extras).
    pub fn checkpoint_bytes(&self) -> Result<Vec<u8>> {
        let mut extras = vec![
            ("loss.t".to_string(), self.loss_params.t.value().clone()),
            ("loss.b".to_string(), self.loss_params.b.value().clone()),
        ];
        if let Some((t, b)) = &self.loss_params.video_level {
            extras.push(("loss.t_video".to_string(), t.value().clone()));
            extras.push(("loss.b_video".to_string(), b.value().clone()));
        }
        write_checkpoint(&self.params, &extras)
    }
}

struct Slot {
    tensor: Tensor<f64>,
    lr: f64,
    decay: bool,
    m: Matrix<f64>,
    v: Matrix<f64>,
}

/// Adam with decoupled weight decay and per-group learning rates.
struct Adam {
    slots: Vec<Slot>,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    step: i32,
}

impl Adam {
    fn new(cfg: &TrainConfig) -> Self {
        Self {
            slots: Vec::new(),
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            step: 0,
        }
    }

    fn add(&mut self, tensor: Tensor<f64>, lr: f64, decay: bool) {
        let (r, c) = tensor.shape();
        self.slots.push(Slot {
            tensor,
            lr,
            decay,
            m: Matrix::zeros(r, c),
            v: Matrix::zeros(r, c),
        });
    }

    /// One update with every group's rate multiplied by `factor`; gradients
    /// of slots flagged `clipped` are rescaled to global norm `clip` first.
    fn step(&mut self, factor: f64, clip: f64, clipped: &[bool]) {
        self.step += 1;
        let norm: f64 = self
            .slots
            .iter()
            .zip(clipped)
            .filter(|(_, c)| **c)
            .filter_map(|(s, _)| s.tensor.grad())
            .map(|g| g.as_slice().iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt();
        let clip_scale = if clip > 0.0 && norm > clip { clip / norm } else { 1.0 };
        let bc1 = 1.0 - self.beta1.powi(self.step);
        let bc2 = 1.0 - self.beta2.powi(self.step);
        for (slot, &is_clipped) in self.slots.iter_mut().zip(clipped) {
            let Some(grad) = slot.tensor.grad() else { continue };
            let lr = slot.lr * factor;
            if lr == 0.0 {
                continue;
            }
            let scale = if is_clipped { clip_scale } else { 1.0 };
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            let wd = if slot.decay { self.weight_decay } else { 0.0 };
            let (m, v) = (slot.m.as_mut_slice(), slot.v.as_mut_slice());
            slot.tensor.update(|p| {
                for (i, (w, g)) in p.as_mut_slice().iter_mut().zip(grad.as_slice()).enumerate() {
                    let g = g * scale;
                    m[i] = b1 * m[i] + (1.0 - b1) * g;
                    v[i] = b2 * v[i] + (1.0 - b2) * g * g;
                    let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
                    *w -= lr * (update + wd * *w);
                }
            });
        }
    }
}

/// Linear warmup to 1 over the first `warmup` steps, then linear decay to 0.
fn schedule(step: usize, total: usize, warmup: usize) -> f64 {
    if step < warmup {
        (step + 1) as f64 / warmup as f64
    } else {
        let rest = (total - warmup).max(1) as f64;
        ((total - step) as f64 / rest).clamp(0.0, 1.0)
    }
}

/// Batches for one epoch: every training query is used once and each batch
/// holds distinct videos. Twin videos (consecutive corpus entries) are kept
/// together so order-only negatives appear in-batch.
fn epoch_batches(
    train: &[usize],
    queries_of: &[Vec<usize>],
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<(usize, usize)>> {
    let rounds = queries_of.iter().map(Vec::len).max().unwrap_or(0);
    let perms: Vec<Vec<usize>> = queries_of
        .iter()
        .map(|qs| {
            let mut p = qs.clone();
            p.shuffle(rng);
            p
        })
        .collect();
    let mut groups: Vec<&[usize]> = train.chunks(2).collect();
    let mut out = Vec::new();
    for r in 0..rounds {
        groups.shuffle(rng);
        let order: Vec<(usize, usize)> = groups
            .iter()
            .flat_map(|g| g.iter())
            .filter(|&&v| r < perms[v].len())
            .map(|&v| (v, perms[v][r]))
            .collect();
        out.extend(order.chunks(batch).filter(|c| c.len() >= 2).map(<[_]>::to_vec));
    }
    out
}

fn single_loss(kind: LossKind, s: &Tensor<f64>, p: &LossParams<f64>) -> Result<Tensor<f64>> {
    let (b, _) = s.shape();
    match kind {
        LossKind::SigmoidDual | LossKind::SigmoidCombined => sigmoid_loss(s, &PairLabels::diagonal(b), p),
        LossKind::InfonceDual | LossKind::InfonceCombined => infonce_loss(s, &p.t),
    }
}

fn batch_loss(
    cfg: &TrainConfig,
    params: &EncoderParams<f64>,
    loss_params: &LossParams<f64>,
    queries: &[TokenizedQuery],
    videos: &[&RawVideo<f64>],
) -> Result<Tensor<f64>> {
    let qb = params.encode_queries(queries, cfg.attn, cfg.augment)?;
    let vb = params.encode_videos(videos, cfg.num_frames)?;
    match cfg.similarity {
        TrainSimilarity::MmsFv => {
            let sf = batch_similarity_tracked(&qb, &vb, ScoreKind::MmsF)?;
            let sv = batch_similarity_tracked(&qb, &vb, ScoreKind::MmsV)?;
            cfg.loss.compute(&sf, &sv, loss_params)
        }
        TrainSimilarity::MmsF => single_loss(cfg.loss, &batch_similarity_tracked(&qb, &vb, ScoreKind::MmsF)?, loss_params),
        TrainSimilarity::MmsV => single_loss(cfg.loss, &batch_similarity_tracked(&qb, &vb, ScoreKind::MmsV)?, loss_params),
        TrainSimilarity::MpFrame => single_loss(cfg.loss, &batch_similarity_tracked(&qb, &vb, ScoreKind::Mp)?, loss_params),
        TrainSimilarity::MpVideo => {
            let as_frames = VideoBatch {
                frames: vb.feats.clone(),
                frame_counts: vb.feat_counts.clone(),
                feats: vb.feats.clone(),
                feat_counts: vb.feat_counts.clone(),
            };
            single_loss(cfg.loss, &batch_similarity_tracked(&qb, &as_frames, ScoreKind::Mp)?, loss_params)
        }
    }
}

/// Retrieval over one split: indexes the split's videos and ranks them for
/// every query of the split under each mode.
pub fn evaluate(
    params: &EncoderParams<f64>,
    data: &SynthDataset,
    split: Split,
    attn: AttnMode,
    augment: bool,
    query_len: usize,
    num_frames: usize,
    modes: &[SearchMode],
) -> Result<ModeMetrics> {
    let videos = data.videos(split);
    let (index, _) = build_index(&videos, params, num_frames)?;
    let queries = data.split_queries(split);
    if queries.is_empty() {
        return Err(Error::Empty("evaluation queries"));
    }
    let tokenized: Vec<TokenizedQuery> = queries
        .iter()
        .map(|q| tokenize_pad(&q.tokens, query_len, PAD_TOKEN))
        .collect::<Result<_>>()?;
    let frozen = params.frozen();
    let encodings = frozen.encode_queries(&tokenized, attn, augment)?.encodings()?;
    let qrels: Qrels = queries.iter().map(|q| (q.id.clone(), q.video_id.clone())).collect();
    let mut out = ModeMetrics::new();
    for &mode in modes {
        let ranked: Vec<RankedList> = encodings
            .par_iter()
            .map(|qe| index.search(qe, index.len(), mode))
            .collect::<Result<_>>()?;
        let results: BTreeMap<String, RankedList> =
            queries.iter().map(|q| q.id.clone()).zip(ranked).collect();
        out.insert(mode.as_str().to_string(), Metrics::compute(&results, &qrels)?);
    }
    Ok(out)
}

/// Trains a fresh model on the training split of `data` and evaluates it on
/// the test split.
pub fn train_toy(cfg: &TrainConfig, data: &SynthDataset) -> Result<TrainOutcome> {
    if cfg.batch_size < 2 {
        return Err(Error::InvalidArgument("batch size must be at least 2".into()));
    }
    let train: Vec<usize> = (0..data.corpus.len()).filter(|&i| data.splits[i] == Split::Train).collect();
    if cfg.batch_size > train.len() {
        return Err(Error::InvalidArgument(format!(
            "batch size {} exceeds the {} training videos",
            cfg.batch_size,
            train.len()
        )));
    }
    let position: BTreeMap<&str, usize> = data.corpus.iter().enumerate().map(|(i, (id, _))| (id.as_str(), i)).collect();
    let mut queries_of: Vec<Vec<usize>> = vec![Vec::new(); data.corpus.len()];
    for (qi, q) in data.queries.iter().enumerate() {
        if q.split == Split::Train {
            let v = *position
                .get(q.video_id.as_str())
                .ok_or_else(|| Error::InvalidArgument(format!("query {} names unknown video {}", q.id, q.video_id)))?;
            queries_of[v].push(qi);
        }
    }
    let tokenized: Vec<TokenizedQuery> = data
        .queries
        .iter()
        .map(|q| tokenize_pad(&q.tokens, cfg.query_len, PAD_TOKEN))
        .collect::<Result<_>>()?;

    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let params = EncoderParams::<f64>::init(cfg.encoder.clone(), cfg.seed)?;
    let loss_params = cfg.loss_params()?;

    let mut adam = Adam::new(cfg);
    let mut clipped = Vec::new();
    for np in params.named_params() {
        let lr = match np.group {
            ParamGroup::Embedding if cfg.freeze_embeddings => 0.0,
            ParamGroup::Embedding | ParamGroup::Backbone => cfg.lr_backbone,
            ParamGroup::Temporal => cfg.lr_temporal,
        };
        let (r, c) = np.tensor.shape();
        adam.add(np.tensor, lr, r > 1 && c > 1);
        clipped.push(true);
    }
    for t in loss_params.tensors() {
        adam.add(t, cfg.lr_loss, false);
        clipped.push(false);
    }
    let zero_grads = |adam: &Adam| adam.slots.iter().for_each(|s| s.tensor.zero_grad());

    let plans: Vec<Vec<Vec<(usize, usize)>>> = (0..cfg.epochs)
        .map(|_| epoch_batches(&train, &queries_of, cfg.batch_size, &mut rng))
        .collect();
    let total_steps: usize = plans.iter().map(Vec::len).sum();
    let warmup = ((total_steps as f64) * cfg.warmup_fraction).ceil() as usize;

    let run_batch = |batch: &[(usize, usize)]| -> Result<Tensor<f64>> {
        let qs: Vec<TokenizedQuery> = batch.iter().map(|&(_, q)| tokenized[q].clone()).collect();
        let vs: Vec<&RawVideo<f64>> = batch.iter().map(|&(v, _)| &data.corpus[v].1).collect();
        batch_loss(cfg, &params, &loss_params, &qs, &vs)
    };

    let initial_loss = match plans.first() {
        Some(first) if !first.is_empty() => {
            let mut sum = 0.0;
            for b in first {
                sum += run_batch(b)?.item()?;
            }
            sum / first.len() as f64
        }
        _ => f64::NAN,
    };

    let mut eval_secs = 0.0;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for (e, plan) in plans.iter().enumerate() {
        let mut sum = 0.0;
        for b in plan {
            zero_grads(&adam);
            let loss = run_batch(b)?;
            let value = loss.item()?;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            sum += value;
            loss.backward()?;
            adam.step(schedule(step, total_steps, warmup), cfg.grad_clip, &clipped);
            loss_params.project();
            step += 1;
        }
        let test = if cfg.eval_every > 0 && (e + 1) % cfg.eval_every == 0 && e + 1 < cfg.epochs {
            let t0 = Instant::now();
            let m = evaluate(&params, data, Split::Test, cfg.attn, cfg.augment, cfg.query_len, cfg.num_frames, &EVAL_MODES)?;
            eval_secs += t0.elapsed().as_secs_f64();
            Some(m)
        } else {
            None
        };
        epochs.push(EpochLog {
            epoch: e + 1,
            mean_loss: sum / plan.len().max(1) as f64,
            logit_scale: loss_params.t.item()?,
            logit_bias: loss_params.b.item()?,
            test,
        });
    }
    zero_grads(&adam);
    let train_secs = start.elapsed().as_secs_f64() - eval_secs;

    let t0 = Instant::now();
    let test = evaluate(&params, data, Split::Test, cfg.attn, cfg.augment, cfg.query_len, cfg.num_frames, &EVAL_MODES)?;
    eval_secs += t0.elapsed().as_secs_f64();
    if let Some(last) = epochs.last_mut() {
        last.test = Some(test.clone());
    }
    let final_loss = epochs.last().map_or(initial_loss, |e| e.mean_loss);
    Ok(TrainOutcome {
        report: TrainReport {
            config: cfg.clone(),
            steps: total_steps,
            initial_loss,
            final_loss,
            epochs,
            test,
            timing: TrainTiming { train_secs, eval_secs },
        },
        params,
        loss_params,
    })
}
