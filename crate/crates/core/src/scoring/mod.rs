//! Query–video interaction: mean pooling (MP), sum of MaxSim (SMS) and the
//! MeanMaxSim family over frame features (MMS_F), temporally contextualized
//! features (MMS_V) and their sum (MMS_FV).
//!
//! All interactions are one-directional: query tokens select their best
//! matching visual feature, never the other way round. Unmatched frames
//! therefore never lower a score.

mod batch;
pub mod naive;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix, Scalar};

pub use batch::{batch_similarity, batch_similarity_tracked, QueryBatch, VideoBatch};

/// Unit-norm tolerance for stored banks at precision `T`.
pub fn unit_norm_tolerance<T: Scalar>() -> T {
    T::lit(1e-6).max(T::epsilon() * T::lit(64.0))
}

fn check_unit_rows<T: Scalar>(what: &'static str, m: &Matrix<T>) -> Result<()> {
    let tol = unit_norm_tolerance::<T>();
    for (i, r) in m.row_iter().enumerate() {
        let n = dot(r, r).sqrt();
        if (n - T::one()).abs() > tol {
            return Err(Error::InvalidArgument(format!(
                "{what}: row {i} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Contextualized query token bank (`M x D`, rows unit-norm).
#[derive(Clone, Debug, PartialEq)]
pub struct QueryEncoding<T> {
    tokens: Matrix<T>,
    true_length: usize,
}

impl<T: Scalar> QueryEncoding<T> {
    /// `true_length` counts the non-pad tokens; all `M` rows take part in
    /// interaction.
    pub fn new(tokens: Matrix<T>, true_length: usize) -> Result<Self> {
        if tokens.rows() == 0 {
            return Err(Error::Empty("query tokens"));
        }
        if true_length == 0 || true_length > tokens.rows() {
            return Err(Error::InvalidArgument(format!(
                "true length {true_length} outside 1..={}",
                tokens.rows()
            )));
        }
        check_unit_rows("query token", &tokens)?;
        Ok(Self { tokens, true_length })
    }

    pub fn tokens(&self) -> &Matrix<T> {
        &self.tokens
    }

    pub fn true_length(&self) -> usize {
        self.true_length
    }

    /// `M`, the number of interaction tokens.
    pub fn padded_length(&self) -> usize {
        self.tokens.rows()
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols()
    }

    /// Single-vector summary used by MP: the output at the last real token
    /// (the end-of-text position of a CLIP-style encoder).
    pub fn pooled(&self) -> &[T] {
        self.tokens.row(self.true_length - 1)
    }
}

/// Static per-frame features (`N x D`, rows unit-norm).
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBank<T> {
    frames: Matrix<T>,
}

impl<T: Scalar> FrameBank<T> {
    pub fn new(frames: Matrix<T>) -> Result<Self> {
        if frames.rows() == 0 {
            return Err(Error::Empty("frame bank"));
        }
        check_unit_rows("frame", &frames)?;
        Ok(Self { frames })
    }

    pub fn frames(&self) -> &Matrix<T> {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.frames.cols()
    }
}

/// Temporally contextualized features: `N` frame outputs followed by `E`
/// expansion-token outputs (`(N+E) x D`, rows unit-norm).
#[derive(Clone, Debug, PartialEq)]
pub struct VideoBank<T> {
    feats: Matrix<T>,
    expansion_count: usize,
}

impl<T: Scalar> VideoBank<T> {
    pub fn new(feats: Matrix<T>, expansion_count: usize) -> Result<Self> {
        if feats.rows() <= expansion_count {
            return Err(Error::InvalidArgument(format!(
                "video bank with {} rows cannot hold {expansion_count} expansion rows plus frames",
                feats.rows()
            )));
        }
        check_unit_rows("video feature", &feats)?;
        Ok(Self {
            feats,
            expansion_count,
        })
    }

    pub fn feats(&self) -> &Matrix<T> {
        &self.feats
    }

    pub fn expansion_count(&self) -> usize {
        self.expansion_count
    }

    pub fn frame_count(&self) -> usize {
        self.feats.rows() - self.expansion_count
    }

    pub fn dim(&self) -> usize {
        self.feats.cols()
    }
}

/// Interaction mechanism.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ScoreKind {
    #[serde(rename = "mp")]
    Mp,
    #[serde(rename = "sms")]
    Sms,
    #[serde(rename = "mms_f")]
    MmsF,
    #[serde(rename = "mms_v")]
    MmsV,
    #[serde(rename = "mms_fv")]
    MmsFv,
}

impl ScoreKind {
    pub const ALL: [ScoreKind; 5] = [Self::Mp, Self::Sms, Self::MmsF, Self::MmsV, Self::MmsFv];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Mp => "mp",
            Self::Sms => "sms",
            Self::MmsF => "mms_f",
            Self::MmsV => "mms_v",
            Self::MmsFv => "mms_fv",
        }
    }
}

impl fmt::Display for ScoreKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Unknown {
                kind: "score kind",
                name: s.to_string(),
            })
    }
}

/// `B_q x B_v` in-batch scores of one kind.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix<T> {
    pub scores: Matrix<T>,
    pub kind: ScoreKind,
}

/// Mean of the rows of `m` as a vector.
fn mean_row<T: Scalar>(m: &Matrix<T>) -> Vec<T> {
    let mut acc = vec![T::zero(); m.cols()];
    for r in m.row_iter() {
        for (a, &x) in acc.iter_mut().zip(r) {
            *a += x;
        }
    }
    let n = T::from_usize(m.rows()).expect("size fits");
    acc.iter_mut().for_each(|a| *a /= n);
    acc
}

/// `q · mean(f_i)`; the pooled frame vector is used as is, not re-normalized.
pub fn mp_score<T: Scalar>(q: &[T], fb: &FrameBank<T>) -> Result<T> {
    check_dim(fb.dim(), q.len())?;
    Ok(dot(q, &mean_row(fb.frames())))
}

/// Cosine between `q` and the re-normalized frame mean (CLIP4Clip-style MP).
pub fn mp_score_normalized<T: Scalar>(q: &[T], fb: &FrameBank<T>) -> Result<T> {
    check_dim(fb.dim(), q.len())?;
    let pooled = mean_row(fb.frames());
    let norm = dot(&pooled, &pooled).sqrt();
    if norm == T::zero() {
        return Err(Error::ZeroNorm { row: 0 });
    }
    Ok(dot(q, &pooled) / norm)
}

/// MP against the temporally contextualized bank (all `N+E` rows).
pub fn mp_video_score<T: Scalar>(q: &[T], vb: &VideoBank<T>) -> Result<T> {
    check_dim(vb.dim(), q.len())?;
    Ok(dot(q, &mean_row(vb.feats())))
}

/// Sum over query rows of the row-wise max of `Q·Dᵀ`, computed as one
/// product into `scratch` followed by a max/sum reduction.
fn sum_max_sim<T: Scalar>(q: &Matrix<T>, docs: &Matrix<T>, scratch: &mut Vec<T>) -> T {
    let (m, n, d) = (q.rows(), docs.rows(), q.cols());
    scratch.clear();
    scratch.resize(m * n, T::zero());
    let qd = q.as_slice();
    let dd = docs.as_slice();
    for j in 0..m {
        let qr = &qd[j * d..(j + 1) * d];
        let out = &mut scratch[j * n..(j + 1) * n];
        for (i, o) in out.iter_mut().enumerate() {
            *o = dot(qr, &dd[i * d..(i + 1) * d]);
        }
    }
    scratch
        .chunks_exact(n)
        .map(|row| row.iter().copied().fold(T::neg_infinity(), T::max))
        .sum()
}

fn mean_max_sim<T: Scalar>(q: &Matrix<T>, docs: &Matrix<T>, scratch: &mut Vec<T>) -> T {
    sum_max_sim(q, docs, scratch) / T::from_usize(q.rows()).expect("size fits")
}

/// `Σ_j max_i q_j·f_i` over all `M` interaction tokens.
pub fn sms_score<T: Scalar>(qe: &QueryEncoding<T>, fb: &FrameBank<T>) -> Result<T> {
    check_dim(fb.dim(), qe.dim())?;
    Ok(sum_max_sim(qe.tokens(), fb.frames(), &mut Vec::new()))
}

/// MeanMaxSim against frame features.
pub fn mms_f<T: Scalar>(qe: &QueryEncoding<T>, fb: &FrameBank<T>) -> Result<T> {
    check_dim(fb.dim(), qe.dim())?;
    Ok(mean_max_sim(qe.tokens(), fb.frames(), &mut Vec::new()))
}

/// MeanMaxSim against all `N+E` contextualized features (expansion outputs
/// included in the max).
pub fn mms_v<T: Scalar>(qe: &QueryEncoding<T>, vb: &VideoBank<T>) -> Result<T> {
    check_dim(vb.dim(), qe.dim())?;
    Ok(mean_max_sim(qe.tokens(), vb.feats(), &mut Vec::new()))
}

/// `mms_f + mms_v`.
pub fn mms_fv<T: Scalar>(qe: &QueryEncoding<T>, fb: &FrameBank<T>, vb: &VideoBank<T>) -> Result<T> {
    Ok(mms_f(qe, fb)? + mms_v(qe, vb)?)
}

/// Reusable scorer for hot loops: owns its scratch buffer so scoring a
/// corpus does not allocate per record.
#[derive(Debug, Default)]
pub struct Scorer<T> {
    scratch: Vec<T>,
}

impl<T: Scalar> Scorer<T> {
    pub fn new() -> Self {
        Self { scratch: Vec::new() }
    }

    pub fn mms_f(&mut self, qe: &QueryEncoding<T>, fb: &FrameBank<T>) -> T {
        mean_max_sim(qe.tokens(), fb.frames(), &mut self.scratch)
    }

    pub fn mms_v(&mut self, qe: &QueryEncoding<T>, vb: &VideoBank<T>) -> T {
        mean_max_sim(qe.tokens(), vb.feats(), &mut self.scratch)
    }

    pub fn mms_fv(&mut self, qe: &QueryEncoding<T>, fb: &FrameBank<T>, vb: &VideoBank<T>) -> T {
        self.mms_f(qe, fb) + self.mms_v(qe, vb)
    }

    /// Score of one kind; dimensions are assumed checked by the caller.
    pub fn score(&mut self, kind: ScoreKind, qe: &QueryEncoding<T>, fb: &FrameBank<T>, vb: &VideoBank<T>) -> T {
        match kind {
            ScoreKind::Mp => dot(qe.pooled(), &mean_row(fb.frames())),
            ScoreKind::Sms => sum_max_sim(qe.tokens(), fb.frames(), &mut self.scratch),
            ScoreKind::MmsF => self.mms_f(qe, fb),
            ScoreKind::MmsV => self.mms_v(qe, vb),
            ScoreKind::MmsFv => self.mms_fv(qe, fb, vb),
        }
    }
}

/// Pairwise score of one kind with dimension checks.
pub fn score<T: Scalar>(
    kind: ScoreKind,
    qe: &QueryEncoding<T>,
    fb: &FrameBank<T>,
    vb: &VideoBank<T>,
) -> Result<T> {
    check_dim(fb.dim(), qe.dim())?;
    check_dim(vb.dim(), qe.dim())?;
    Ok(Scorer::new().score(kind, qe, fb, vb))
}
