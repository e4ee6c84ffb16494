use super::{check_dim, FrameBank, QueryEncoding, ScoreKind, Scorer, SimilarityMatrix, VideoBank};
use crate::error::{Error, Result};
use crate::tensor::{segment_starts, Matrix, Scalar, Tensor};

/// Query token banks of a batch stacked row-wise into one tensor.
#[derive(Clone, Debug)]
pub struct QueryBatch<T: Scalar> {
    /// `Σ M_i x D`, rows unit-norm.
    pub tokens: Tensor<T>,
    /// Interaction token count `M_i` of each query.
    pub lengths: Vec<usize>,
    /// Non-pad token count of each query.
    pub true_lengths: Vec<usize>,
}

/// Frame and video banks of a batch stacked row-wise.
#[derive(Clone, Debug)]
pub struct VideoBatch<T: Scalar> {
    /// `Σ N_i x D`.
    pub frames: Tensor<T>,
    pub frame_counts: Vec<usize>,
    /// `Σ (N_i + E_i) x D`.
    pub feats: Tensor<T>,
    pub feat_counts: Vec<usize>,
}

impl<T: Scalar> QueryBatch<T> {
    pub fn len(&self) -> usize {
        self.lengths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lengths.is_empty()
    }

    /// Untracked per-query encodings.
    pub fn encodings(&self) -> Result<Vec<QueryEncoding<T>>> {
        let v = self.tokens.value();
        segment_starts(&self.lengths)
            .into_iter()
            .zip(self.lengths.iter().zip(&self.true_lengths))
            .map(|(s, (&len, &tl))| QueryEncoding::new(v.slice_rows(s, s + len)?, tl))
            .collect()
    }
}

impl<T: Scalar> VideoBatch<T> {
    pub fn len(&self) -> usize {
        self.frame_counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frame_counts.is_empty()
    }

    /// Untracked per-video banks.
    pub fn banks(&self) -> Result<Vec<(FrameBank<T>, VideoBank<T>)>> {
        let fv = self.frames.value();
        let vv = self.feats.value();
        let fs = segment_starts(&self.frame_counts);
        let vs = segment_starts(&self.feat_counts);
        (0..self.len())
            .map(|i| {
                let (n, k) = (self.frame_counts[i], self.feat_counts[i]);
                let fb = FrameBank::new(fv.slice_rows(fs[i], fs[i] + n)?)?;
                let vb = VideoBank::new(vv.slice_rows(vs[i], vs[i] + k)?, k - n)?;
                Ok((fb, vb))
            })
            .collect()
    }
}

/// In-batch similarity matrix on the autodiff tape; entry `(i, j)` scores
/// query `i` against video `j`.
pub fn batch_similarity_tracked<T: Scalar>(
    qb: &QueryBatch<T>,
    vb: &VideoBatch<T>,
    kind: ScoreKind,
) -> Result<Tensor<T>> {
    if qb.is_empty() || vb.is_empty() {
        return Err(Error::Empty("similarity batch"));
    }
    check_dim(qb.tokens.shape().1, vb.frames.shape().1)?;
    check_dim(qb.tokens.shape().1, vb.feats.shape().1)?;
    let mms = |bank: &Tensor<T>, counts: &[usize]| -> Result<Tensor<T>> {
        qb.tokens
            .matmul(&bank.transpose())?
            .segment_mean_max(&qb.lengths, counts)
    };
    match kind {
        ScoreKind::MmsF => mms(&vb.frames, &vb.frame_counts),
        ScoreKind::MmsV => mms(&vb.feats, &vb.feat_counts),
        ScoreKind::MmsFv => mms(&vb.frames, &vb.frame_counts)?.add(&mms(&vb.feats, &vb.feat_counts)?),
        ScoreKind::Sms => {
            let m = Matrix::from_fn(qb.len(), vb.len(), |i, _| {
                T::from_usize(qb.lengths[i]).expect("size fits")
            });
            mms(&vb.frames, &vb.frame_counts)?.mul(&Tensor::constant(m))
        }
        ScoreKind::Mp => {
            let rows: Vec<usize> = segment_starts(&qb.lengths)
                .into_iter()
                .zip(&qb.true_lengths)
                .map(|(s, &tl)| s + tl - 1)
                .collect();
            let pooled_q = qb.tokens.gather_rows(&rows)?;
            let total: usize = vb.frame_counts.iter().sum();
            let mut avg = Matrix::zeros(vb.len(), total);
            for (b, (s, &n)) in segment_starts(&vb.frame_counts)
                .into_iter()
                .zip(&vb.frame_counts)
                .enumerate()
            {
                let w = T::one() / T::from_usize(n).expect("size fits");
                for c in s..s + n {
                    avg.set(b, c, w);
                }
            }
            let means = Tensor::constant(avg).matmul(&vb.frames)?;
            pooled_q.matmul(&means.transpose())
        }
    }
}

/// In-batch similarity over untracked encodings, one pairwise score per
/// entry.
pub fn batch_similarity<T: Scalar>(
    queries: &[QueryEncoding<T>],
    videos: &[(FrameBank<T>, VideoBank<T>)],
    kind: ScoreKind,
) -> Result<SimilarityMatrix<T>> {
    let (Some(q0), false) = (queries.first(), videos.is_empty()) else {
        return Err(Error::Empty("similarity batch"));
    };
    let d = q0.dim();
    for q in queries {
        check_dim(d, q.dim())?;
    }
    for (fb, vb) in videos {
        check_dim(d, fb.dim())?;
        check_dim(d, vb.dim())?;
    }
    let mut scorer = Scorer::new();
    let mut scores = Matrix::zeros(queries.len(), videos.len());
    for (i, q) in queries.iter().enumerate() {
        for (j, (fb, vb)) in videos.iter().enumerate() {
            scores.set(i, j, scorer.score(kind, q, fb, vb));
        }
    }
    Ok(SimilarityMatrix { scores, kind })
}
