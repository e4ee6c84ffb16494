//! Toy-scale bi-encoder.
//!
//! * Text: token + position embeddings, a stack of transformer blocks with a
//!   causal or bidirectional mask, final layer norm and a projection. With
//!   query augmentation every padded position joins the interaction bank.
//! * Frames: a small per-frame MLP over precomputed feature vectors stands
//!   in for an image encoder; its projected, normalized outputs are the
//!   frame bank.
//! * Temporal: frame tokens plus learned positions, followed by `E`
//!   learnable expansion tokens, pass through full-attention blocks; the
//!   projected, normalized outputs are the video bank (`N + E` rows).

mod checkpoint;
mod transformer;

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scoring::{FrameBank, QueryBatch, QueryEncoding, VideoBank, VideoBatch};
use crate::tensor::{segment_starts, Matrix, Scalar, Tensor};

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use transformer::{Block, LayerNorm, Linear};

use transformer::{gaussian, push_linear, push_norm};

pub const DEFAULT_QUERY_LEN: usize = 32;
pub const LONG_QUERY_LEN: usize = 64;
pub const DEFAULT_PAD_ID: u32 = 0;
pub const DEFAULT_NUM_FRAMES: usize = 12;
pub const DEFAULT_EXPANSION_TOKENS: usize = 2;
pub const DEFAULT_TEMPORAL_LAYERS: usize = 4;

/// Standard deviation of embedding and expansion-token initialization.
const EMBED_STD: f64 = 0.02;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    /// Output (interaction) dimension `D`.
    pub dim: usize,
    /// Raw per-frame feature width.
    pub input_dim: usize,
    pub text_layers: usize,
    pub temporal_layers: usize,
    pub max_text_len: usize,
    pub max_frames: usize,
    pub expansion_tokens: usize,
    pub mlp_ratio: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: 256,
            d_model: 32,
            dim: 16,
            input_dim: 32,
            text_layers: 2,
            temporal_layers: DEFAULT_TEMPORAL_LAYERS,
            max_text_len: LONG_QUERY_LEN,
            max_frames: 32,
            expansion_tokens: DEFAULT_EXPANSION_TOKENS,
            mlp_ratio: 2,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("dim", self.dim),
            ("input_dim", self.input_dim),
            ("max_text_len", self.max_text_len),
            ("max_frames", self.max_frames),
            ("mlp_ratio", self.mlp_ratio),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

/// Attention mask of the text encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnMode {
    /// Token `i` attends to tokens `0..=i` (CLIP-style).
    #[default]
    Causal,
    /// Every token attends to every token (SigLIP-style).
    Bidirectional,
}

impl fmt::Display for AttnMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Causal => "causal",
            Self::Bidirectional => "bidirectional",
        })
    }
}

impl FromStr for AttnMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "causal" => Ok(Self::Causal),
            "bidirectional" | "full" => Ok(Self::Bidirectional),
            _ => Err(Error::Unknown {
                kind: "attention mode",
                name: s.to_string(),
            }),
        }
    }
}

/// Learning-rate tier of a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Token and text-position embeddings (frozen when fine-tuning).
    Embedding,
    /// Text encoder, frame encoder and projections.
    Backbone,
    /// Temporal blocks, temporal positions and expansion tokens.
    Temporal,
}

/// Fixed-length token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedQuery {
    pub ids: Vec<u32>,
    pub true_length: usize,
    pub pad_id: u32,
}

/// Pads to exactly `len`. Overlong queries keep their first `len - 1`
/// tokens plus the final token, so begin and end markers survive.
pub fn tokenize_pad(query: &[u32], len: usize, pad_id: u32) -> Result<TokenizedQuery> {
    if query.is_empty() {
        return Err(Error::Empty("query tokens"));
    }
    if len == 0 {
        return Err(Error::InvalidArgument("padded length must be positive".into()));
    }
    let true_length = query.len().min(len);
    let mut ids = if query.len() > len && len > 1 {
        let mut kept = query[..len - 1].to_vec();
        kept.push(query[query.len() - 1]);
        kept
    } else {
        query[..true_length].to_vec()
    };
    ids.resize(len, pad_id);
    Ok(TokenizedQuery {
        ids,
        true_length,
        pad_id,
    })
}

/// Segment-midpoint frame sampling: `floor((2i+1)·T / 2n)` for `i < n`.
pub fn tsn_sample(total: usize, n: usize) -> Vec<usize> {
    (0..n).map(|i| (2 * i + 1) * total / (2 * n)).collect()
}

/// Precomputed raw feature vector per frame (`T x D_in`).
#[derive(Clone, Debug, PartialEq)]
pub struct RawVideo<T> {
    frame_features: Matrix<T>,
}

impl<T: Scalar> RawVideo<T> {
    pub fn new(frame_features: Matrix<T>) -> Result<Self> {
        if frame_features.rows() == 0 {
            return Err(Error::Empty("video frames"));
        }
        Ok(Self { frame_features })
    }

    pub fn frame_features(&self) -> &Matrix<T> {
        &self.frame_features
    }

    pub fn total_frames(&self) -> usize {
        self.frame_features.rows()
    }
}

/// All trainable tensors of the bi-encoder.
#[derive(Clone, Debug)]
pub struct EncoderParams<T: Scalar> {
    pub config: EncoderConfig,
    pub token_embeddings: Tensor<T>,
    pub text_positions: Tensor<T>,
    pub text_blocks: Vec<Block<T>>,
    pub text_ln_final: LayerNorm<T>,
    pub text_projection: Tensor<T>,
    pub frame_in: Linear<T>,
    pub frame_out: Linear<T>,
    pub temporal_positions: Tensor<T>,
    pub temporal_blocks: Vec<Block<T>>,
    pub expansion_embeddings: Tensor<T>,
    pub visual_projection: Tensor<T>,
}

/// A parameter tensor with its stable name and learning-rate tier.
#[derive(Clone, Debug)]
pub struct NamedParam<T: Scalar> {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor<T>,
}

impl<T: Scalar> EncoderParams<T> {
    /// Random initialization; identical seeds give bit-identical weights.
    pub fn init(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = &config;
        let dm = c.d_model;
        let proj_std = 1.0 / (dm as f64).sqrt();
        let token_embeddings = Tensor::parameter(gaussian(&mut rng, c.vocab_size, dm, EMBED_STD));
        let text_positions = Tensor::parameter(gaussian(&mut rng, c.max_text_len, dm, EMBED_STD));
        let text_blocks = (0..c.text_layers)
            .map(|_| Block::init(&mut rng, dm, c.mlp_ratio))
            .collect();
        let text_projection = Tensor::parameter(gaussian(&mut rng, dm, c.dim, proj_std));
        let frame_in = Linear::init(&mut rng, c.input_dim, dm);
        let frame_out = Linear::init(&mut rng, dm, dm);
        let temporal_positions = Tensor::parameter(gaussian(&mut rng, c.max_frames, dm, EMBED_STD));
        let temporal_blocks = (0..c.temporal_layers)
            .map(|_| Block::init(&mut rng, dm, c.mlp_ratio))
            .collect();
        let expansion_embeddings =
            Tensor::parameter(gaussian(&mut rng, c.expansion_tokens, dm, EMBED_STD));
        let visual_projection = Tensor::parameter(gaussian(&mut rng, dm, c.dim, proj_std));
        Ok(Self {
            text_ln_final: LayerNorm::new(dm),
            config,
            token_embeddings,
            text_positions,
            text_blocks,
            text_projection,
            frame_in,
            frame_out,
            temporal_positions,
            temporal_blocks,
            expansion_embeddings,
            visual_projection,
        })
    }

    /// Every parameter in a fixed order.
    pub fn named_params(&self) -> Vec<NamedParam<T>> {
        let mut out = Vec::new();
        let mut push = |group: ParamGroup, items: Vec<(String, Tensor<T>)>| {
            out.extend(items.into_iter().map(|(name, tensor)| NamedParam { name, group, tensor }));
        };
        push(
            ParamGroup::Embedding,
            vec![
                ("text.token_embeddings".into(), self.token_embeddings.clone()),
                ("text.positions".into(), self.text_positions.clone()),
            ],
        );
        let mut backbone = Vec::new();
        for (i, b) in self.text_blocks.iter().enumerate() {
            b.push_named(&format!("text.blocks.{i}"), &mut backbone);
        }
        push_norm(&self.text_ln_final, "text.ln_final", &mut backbone);
        backbone.push(("text.projection".into(), self.text_projection.clone()));
        push_linear(&self.frame_in, "frame.fc_in", &mut backbone);
        push_linear(&self.frame_out, "frame.fc_out", &mut backbone);
        backbone.push(("visual.projection".into(), self.visual_projection.clone()));
        push(ParamGroup::Backbone, backbone);
        let mut temporal = vec![
            ("temporal.positions".to_string(), self.temporal_positions.clone()),
            ("temporal.expansion".to_string(), self.expansion_embeddings.clone()),
        ];
        for (i, b) in self.temporal_blocks.iter().enumerate() {
            b.push_named(&format!("temporal.blocks.{i}"), &mut temporal);
        }
        push(ParamGroup::Temporal, temporal);
        out
    }

    /// Copy with every parameter as an untracked constant, for inference.
    pub fn frozen(&self) -> Self {
        let mut copy = self.clone();
        copy.map_tensors(|t| t.detach());
        copy
    }

    /// Applies `f` to every parameter tensor, in [`Self::named_params`] order.
    pub(crate) fn map_tensors(&mut self, mut f: impl FnMut(&Tensor<T>) -> Tensor<T>) {
        fn lin<T: Scalar>(l: &mut Linear<T>, f: &mut impl FnMut(&Tensor<T>) -> Tensor<T>) {
            l.weight = f(&l.weight);
            l.bias = f(&l.bias);
        }
        fn norm<T: Scalar>(l: &mut LayerNorm<T>, f: &mut impl FnMut(&Tensor<T>) -> Tensor<T>) {
            l.gain = f(&l.gain);
            l.shift = f(&l.shift);
        }
        fn block<T: Scalar>(b: &mut Block<T>, f: &mut impl FnMut(&Tensor<T>) -> Tensor<T>) {
            norm(&mut b.ln_attn, f);
            lin(&mut b.query, f);
            lin(&mut b.key, f);
            lin(&mut b.value, f);
            lin(&mut b.out, f);
            norm(&mut b.ln_mlp, f);
            lin(&mut b.fc, f);
            lin(&mut b.proj, f);
        }
        self.token_embeddings = f(&self.token_embeddings);
        self.text_positions = f(&self.text_positions);
        for b in &mut self.text_blocks {
            block(b, &mut f);
        }
        norm(&mut self.text_ln_final, &mut f);
        self.text_projection = f(&self.text_projection);
        lin(&mut self.frame_in, &mut f);
        lin(&mut self.frame_out, &mut f);
        self.visual_projection = f(&self.visual_projection);
        self.temporal_positions = f(&self.temporal_positions);
        self.expansion_embeddings = f(&self.expansion_embeddings);
        for b in &mut self.temporal_blocks {
            block(b, &mut f);
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.named_params()
            .iter()
            .map(|p| {
                let (r, c) = p.tensor.shape();
                r * c
            })
            .sum()
    }

    /// Encodes a batch of equally padded queries. Without augmentation only
    /// the first `true_length` outputs of each query are kept.
    pub fn encode_queries(
        &self,
        queries: &[TokenizedQuery],
        mode: AttnMode,
        augment: bool,
    ) -> Result<QueryBatch<T>> {
        let Some(first) = queries.first() else {
            return Err(Error::Empty("query batch"));
        };
        let len = first.ids.len();
        if len > self.config.max_text_len {
            return Err(Error::InvalidArgument(format!(
                "query length {len} exceeds the encoder maximum {}",
                self.config.max_text_len
            )));
        }
        let mut ids = Vec::with_capacity(len * queries.len());
        for q in queries {
            if q.ids.len() != len {
                return Err(Error::DimensionMismatch {
                    expected: len,
                    got: q.ids.len(),
                });
            }
            for &id in &q.ids {
                if id as usize >= self.config.vocab_size {
                    return Err(Error::UnknownToken {
                        id,
                        vocab: self.config.vocab_size,
                    });
                }
                ids.push(id as usize);
            }
        }
        let positions: Vec<usize> = (0..queries.len()).flat_map(|_| 0..len).collect();
        let mut x = self
            .token_embeddings
            .gather_rows(&ids)?
            .add(&self.text_positions.gather_rows(&positions)?)?;
        let segments = vec![len; queries.len()];
        for b in &self.text_blocks {
            x = b.forward(&x, &segments, mode == AttnMode::Causal)?;
        }
        let mut tokens = self
            .text_ln_final
            .forward(&x)?
            .matmul(&self.text_projection)?;
        let true_lengths: Vec<usize> = queries.iter().map(|q| q.true_length).collect();
        let lengths = if augment {
            segments
        } else {
            let keep: Vec<usize> = queries
                .iter()
                .enumerate()
                .flat_map(|(i, q)| (i * len)..(i * len + q.true_length))
                .collect();
            tokens = tokens.gather_rows(&keep)?;
            true_lengths.clone()
        };
        Ok(QueryBatch {
            tokens: tokens.l2_normalize_rows()?,
            lengths,
            true_lengths,
        })
    }

    pub fn encode_query(&self, q: &TokenizedQuery, mode: AttnMode, augment: bool) -> Result<QueryEncoding<T>> {
        let batch = self.encode_queries(std::slice::from_ref(q), mode, augment)?;
        Ok(batch.encodings()?.remove(0))
    }

    /// TSN-sampled frames of each video through the frame MLP
    /// (`Σ n x d_model`). Frames are processed independently.
    pub fn frame_tokens(&self, videos: &[&RawVideo<T>], n: usize) -> Result<Tensor<T>> {
        if videos.is_empty() {
            return Err(Error::Empty("video batch"));
        }
        if n == 0 {
            return Err(Error::InvalidArgument("number of sampled frames must be positive".into()));
        }
        let d_in = self.config.input_dim;
        let mut data = Vec::with_capacity(videos.len() * n * d_in);
        for v in videos {
            let f = v.frame_features();
            if f.cols() != d_in {
                return Err(Error::DimensionMismatch {
                    expected: d_in,
                    got: f.cols(),
                });
            }
            for i in tsn_sample(f.rows(), n) {
                data.extend_from_slice(f.row(i));
            }
        }
        let raw = Tensor::constant(Matrix::new(videos.len() * n, d_in, data)?);
        self.frame_out.forward(&self.frame_in.forward(&raw)?.gelu())
    }

    /// Projects frame tokens to the interaction space and normalizes.
    pub fn project_frames(&self, tokens: &Tensor<T>) -> Result<Tensor<T>> {
        tokens.matmul(&self.visual_projection)?.l2_normalize_rows()
    }

    /// Temporal transformer over per-video frame tokens (`counts[i]` rows
    /// each). Returns the normalized `(N_i + E)`-row banks stacked.
    pub fn encode_temporal(&self, tokens: &Tensor<T>, counts: &[usize]) -> Result<Tensor<T>> {
        let total: usize = counts.iter().sum();
        if tokens.shape() != (total, self.config.d_model) {
            return Err(Error::ShapeMismatch {
                op: "encode_temporal",
                left: tokens.shape(),
                right: (total, self.config.d_model),
            });
        }
        if let Some(&n) = counts.iter().find(|&&n| n > self.config.max_frames) {
            return Err(Error::InvalidArgument(format!(
                "{n} frames exceed the temporal maximum {}",
                self.config.max_frames
            )));
        }
        let e = self.config.expansion_tokens;
        let positions: Vec<usize> = counts.iter().flat_map(|&n| 0..n).collect();
        let framed = tokens.add(&self.temporal_positions.gather_rows(&positions)?)?;
        // Interleave: each video's frame rows followed by the expansion rows.
        let (x, segments) = if e == 0 {
            (framed, counts.to_vec())
        } else {
            let pool = Tensor::concat_rows(&[framed, self.expansion_embeddings.clone()])?;
            let mut order = Vec::with_capacity(total + counts.len() * e);
            for (s, &n) in segment_starts(counts).into_iter().zip(counts) {
                order.extend(s..s + n);
                order.extend(total..total + e);
            }
            let segs = counts.iter().map(|&n| n + e).collect();
            (pool.gather_rows(&order)?, segs)
        };
        let mut x = x;
        for b in &self.temporal_blocks {
            x = b.forward(&x, &segments, false)?;
        }
        x.matmul(&self.visual_projection)?.l2_normalize_rows()
    }

    /// Frame and video banks for a batch of videos in one forward pass.
    pub fn encode_videos(&self, videos: &[&RawVideo<T>], n: usize) -> Result<VideoBatch<T>> {
        let tokens = self.frame_tokens(videos, n)?;
        let counts = vec![n; videos.len()];
        let frames = self.project_frames(&tokens)?;
        let feats = self.encode_temporal(&tokens, &counts)?;
        let e = self.config.expansion_tokens;
        Ok(VideoBatch {
            frames,
            feat_counts: counts.iter().map(|&c| c + e).collect(),
            frame_counts: counts,
            feats,
        })
    }

    pub fn encode_frames(&self, video: &RawVideo<T>, n: usize) -> Result<FrameBank<T>> {
        let tokens = self.frame_tokens(&[video], n)?;
        let frames = self.project_frames(&tokens)?;
        let value = frames.value().clone();
        FrameBank::new(value)
    }

    pub fn encode_video(&self, video: &RawVideo<T>, n: usize) -> Result<(FrameBank<T>, VideoBank<T>)> {
        Ok(self.encode_videos(&[video], n)?.banks()?.remove(0))
    }
}
