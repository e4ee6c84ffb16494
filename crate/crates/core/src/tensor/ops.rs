//! Differentiable primitives. Each forward computes a fresh [`Matrix`] and
//! registers a gradient rule on the output node.

use super::{dot, Matrix, Scalar, Tensor};
use crate::error::{Error, Result};

fn same_shape<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

fn is_row_of<T: Scalar>(op: &'static str, a: &Tensor<T>, row: &Tensor<T>) -> Result<()> {
    if row.shape() != (1, a.shape().1) {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: row.shape(),
        });
    }
    Ok(())
}

fn is_scalar<T: Scalar>(op: &'static str, a: &Tensor<T>, s: &Tensor<T>) -> Result<()> {
    if s.shape() != (1, 1) {
        return Err(Error::ShapeMismatch {
            op,
            left: a.shape(),
            right: s.shape(),
        });
    }
    Ok(())
}

/// Column sums as a 1 x cols row.
fn column_sums<T: Scalar>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, m.cols());
    for r in m.row_iter() {
        for (o, &x) in out.as_mut_slice().iter_mut().zip(r) {
            *o += x;
        }
    }
    out
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub fn softplus<T: Scalar>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Slope of the sigmoid GELU approximation `x·σ(1.702x)` used by CLIP.
const GELU_SLOPE: f64 = 1.702;

#[inline]
fn gelu_fwd<T: Scalar>(x: T) -> T {
    x * sigmoid(T::lit(GELU_SLOPE) * x)
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::lit(GELU_SLOPE);
    let s = sigmoid(k * x);
    s + k * x * s * (T::one() - s)
}

fn softmax_row_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x /= sum;
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let value = self.value().matmul(&other.value())?;
        Ok(Self::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                let a = p[0].value();
                let b = p[1].value();
                let ga = p[0]
                    .requires_grad()
                    .then(|| g.matmul_nt(&b).expect("shapes checked in forward"));
                let gb = p[1]
                    .requires_grad()
                    .then(|| a.matmul_tn(g).expect("shapes checked in forward"));
                vec![ga, gb]
            }),
        ))
    }

    pub fn transpose(&self) -> Self {
        let value = self.value().transpose();
        Self::from_op(value, vec![self.clone()], Box::new(|g, _, _| vec![Some(g.transpose())]))
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        same_shape("add", self, other)?;
        let value = self.value().zip_map(&other.value(), |a, b| a + b);
        Ok(Self::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.clone())]),
        ))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        same_shape("sub", self, other)?;
        let value = self.value().zip_map(&other.value(), |a, b| a - b);
        Ok(Self::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        ))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Self) -> Result<Self> {
        same_shape("mul", self, other)?;
        let value = self.value().zip_map(&other.value(), |a, b| a * b);
        Ok(Self::from_op(
            value,
            vec![self.clone(), other.clone()],
            Box::new(|g, p, _| {
                let a = p[0].value();
                let b = p[1].value();
                vec![
                    Some(g.zip_map(&b, |g, b| g * b)),
                    Some(g.zip_map(&a, |g, a| g * a)),
                ]
            }),
        ))
    }

    /// Adds a `1 x cols` row to every row.
    pub fn add_row(&self, row: &Self) -> Result<Self> {
        is_row_of("add_row", self, row)?;
        let mut value = self.value().clone();
        {
            let r = row.value();
            for i in 0..value.rows() {
                for (x, &b) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                    *x += b;
                }
            }
        }
        Ok(Self::from_op(
            value,
            vec![self.clone(), row.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(column_sums(g))]),
        ))
    }

    /// Multiplies every row elementwise by a `1 x cols` row.
    pub fn mul_row(&self, row: &Self) -> Result<Self> {
        is_row_of("mul_row", self, row)?;
        let mut value = self.value().clone();
        {
            let r = row.value();
            for i in 0..value.rows() {
                for (x, &s) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                    *x *= s;
                }
            }
        }
        Ok(Self::from_op(
            value,
            vec![self.clone(), row.clone()],
            Box::new(|g, p, _| {
                let a = p[0].value();
                let r = p[1].value();
                let mut ga = g.clone();
                let mut gr = Matrix::zeros(1, g.cols());
                for i in 0..g.rows() {
                    let a_row = a.row(i);
                    for (c, x) in ga.row_mut(i).iter_mut().enumerate() {
                        gr.as_mut_slice()[c] += *x * a_row[c];
                        *x *= r.as_slice()[c];
                    }
                }
                vec![Some(ga), Some(gr)]
            }),
        ))
    }

    /// Multiplication by a constant.
    pub fn scale(&self, c: T) -> Self {
        let value = self.value().map(|x| x * c);
        Self::from_op(value, vec![self.clone()], Box::new(move |g, _, _| vec![Some(g.map(|x| x * c))]))
    }

    pub fn neg(&self) -> Self {
        self.scale(-T::one())
    }

    /// Multiplication by a tracked `1 x 1` tensor.
    pub fn scale_by(&self, s: &Self) -> Result<Self> {
        is_scalar("scale_by", self, s)?;
        let k = s.value().as_slice()[0];
        let value = self.value().map(|x| x * k);
        Ok(Self::from_op(
            value,
            vec![self.clone(), s.clone()],
            Box::new(|g, p, _| {
                let a = p[0].value();
                let k = p[1].value().as_slice()[0];
                let gs = g.zip_map(&a, |g, a| g * a).sum();
                vec![Some(g.map(|x| x * k)), Some(Matrix::scalar(gs))]
            }),
        ))
    }

    /// Adds a tracked `1 x 1` tensor to every entry.
    pub fn add_scalar(&self, s: &Self) -> Result<Self> {
        is_scalar("add_scalar", self, s)?;
        let k = s.value().as_slice()[0];
        let value = self.value().map(|x| x + k);
        Ok(Self::from_op(
            value,
            vec![self.clone(), s.clone()],
            Box::new(|g, _, _| vec![Some(g.clone()), Some(Matrix::scalar(g.sum()))]),
        ))
    }

    pub fn sum(&self) -> Self {
        let (r, c) = self.shape();
        let value = Matrix::scalar(self.value().sum());
        Self::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(Matrix::filled(r, c, g.as_slice()[0]))]),
        )
    }

    pub fn mean(&self) -> Self {
        let (r, c) = self.shape();
        let n = T::from_usize(r * c).expect("size fits");
        self.sum().scale(T::one() / n)
    }

    pub fn softmax_rows(&self) -> Self {
        let mut value = self.value().clone();
        for i in 0..value.rows() {
            softmax_row_in_place(value.row_mut(i));
        }
        Self::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, _, y| {
                let mut gx = g.clone();
                for i in 0..g.rows() {
                    let yr = y.row(i);
                    let s = dot(g.row(i), yr);
                    for (x, &yv) in gx.row_mut(i).iter_mut().zip(yr) {
                        *x = yv * (*x - s);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    pub fn log_softmax_rows(&self) -> Self {
        let mut value = self.value().clone();
        for i in 0..value.rows() {
            let row = value.row_mut(i);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<T>().ln();
            for x in row.iter_mut() {
                *x -= lse;
            }
        }
        Self::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, _, y| {
                let mut gx = g.clone();
                for i in 0..g.rows() {
                    let s = g.row(i).iter().copied().sum::<T>();
                    for (x, &yv) in gx.row_mut(i).iter_mut().zip(y.row(i)) {
                        *x -= yv.exp() * s;
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Row-wise maximum as a `rows x 1` column, plus the argmax of each row
    /// (first occurrence on ties). The gradient flows to the argmax entry.
    pub fn max_rows(&self) -> Result<(Self, Vec<usize>)> {
        let (rows, cols) = self.shape();
        if cols == 0 {
            return Err(Error::Empty("max_rows"));
        }
        let mut arg = Vec::with_capacity(rows);
        let mut out = Matrix::zeros(rows, 1);
        {
            let v = self.value();
            for i in 0..rows {
                let (j, m) = argmax(v.row(i));
                arg.push(j);
                out.set(i, 0, m);
            }
        }
        let arg_c = arg.clone();
        let t = Self::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = Matrix::zeros(rows, cols);
                for (i, &j) in arg_c.iter().enumerate() {
                    gx.set(i, j, g.get(i, 0));
                }
                vec![Some(gx)]
            }),
        );
        Ok((t, arg))
    }

    /// Per-row normalization to zero mean and unit variance (no affine).
    pub fn layer_norm_rows(&self, eps: T) -> Self {
        let (rows, cols) = self.shape();
        let n = T::from_usize(cols).expect("size fits");
        let mut value = self.value().clone();
        let mut inv_std = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = value.row_mut(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        Self::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut gx = g.clone();
                for i in 0..rows {
                    let gr = g.row(i);
                    let yr = y.row(i);
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = dot(gr, yr) / n;
                    for (c, x) in gx.row_mut(i).iter_mut().enumerate() {
                        *x = inv_std[i] * (gr[c] - mg - yr[c] * mgy);
                    }
                }
                vec![Some(gx)]
            }),
        )
    }

    /// Sigmoid-form GELU, `x·σ(1.702x)`.
    pub fn gelu(&self) -> Self {
        let value = self.value().map(gelu_fwd);
        Self::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, p, _| {
                let x = p[0].value();
                vec![Some(g.zip_map(&x, |g, x| g * gelu_grad(x)))]
            }),
        )
    }

    /// Elementwise `ln(1 + e^x)` computed without overflow.
    pub fn softplus(&self) -> Self {
        let value = self.value().map(softplus);
        Self::from_op(
            value,
            vec![self.clone()],
            Box::new(|g, p, _| {
                let x = p[0].value();
                vec![Some(g.zip_map(&x, |g, x| g * sigmoid(x)))]
            }),
        )
    }

    /// Divides each row by its L2 norm. Zero rows are rejected.
    pub fn l2_normalize_rows(&self) -> Result<Self> {
        let (rows, _) = self.shape();
        let mut norms = Vec::with_capacity(rows);
        let value = {
            let v = self.value();
            for i in 0..rows {
                let r = v.row(i);
                norms.push(dot(r, r).sqrt());
            }
            v.l2_normalize_rows()?
        };
        Ok(Self::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, y| {
                let mut gx = g.clone();
                for i in 0..rows {
                    let yr = y.row(i);
                    let s = dot(g.row(i), yr);
                    for (x, &yv) in gx.row_mut(i).iter_mut().zip(yr) {
                        *x = (*x - yv * s) / norms[i];
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        let (rows, cols) = self.shape();
        let value = self.value().slice_rows(start, end)?;
        Ok(Self::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = Matrix::zeros(rows, cols);
                gx.as_mut_slice()[start * cols..end * cols].copy_from_slice(g.as_slice());
                vec![Some(gx)]
            }),
        ))
    }

    pub fn slice_cols(&self, start: usize, end: usize) -> Result<Self> {
        let (rows, cols) = self.shape();
        if start > end || end > cols {
            return Err(Error::InvalidArgument(format!(
                "column slice {start}..{end} out of bounds for {cols} columns"
            )));
        }
        let width = end - start;
        let value = {
            let v = self.value();
            Matrix::from_fn(rows, width, |r, c| v.get(r, start + c))
        };
        Ok(Self::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = Matrix::zeros(rows, cols);
                for r in 0..rows {
                    gx.row_mut(r)[start..end].copy_from_slice(g.row(r));
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Stacks tensors vertically.
    pub fn concat_rows(parts: &[Self]) -> Result<Self> {
        let value = {
            let vals: Vec<_> = parts.iter().map(|p| p.value()).collect();
            let refs: Vec<&Matrix<T>> = vals.iter().map(|v| &**v).collect();
            Matrix::concat_rows(&refs)?
        };
        let bounds: Vec<(usize, usize)> = {
            let mut start = 0;
            parts
                .iter()
                .map(|p| {
                    let r = p.shape().0;
                    let b = (start, start + r);
                    start += r;
                    b
                })
                .collect()
        };
        Ok(Self::from_op(
            value,
            parts.to_vec(),
            Box::new(move |g, _, _| {
                bounds
                    .iter()
                    .map(|&(s, e)| Some(g.slice_rows(s, e).expect("bounds from forward")))
                    .collect()
            }),
        ))
    }

    /// Row lookup into an embedding table; repeated ids accumulate gradient.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Self> {
        let (rows, cols) = self.shape();
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::InvalidArgument(format!(
                "row index {bad} out of bounds for {rows} rows"
            )));
        }
        let value = {
            let v = self.value();
            let mut data = Vec::with_capacity(ids.len() * cols);
            for &i in ids {
                data.extend_from_slice(v.row(i));
            }
            Matrix::new(ids.len(), cols, data)?
        };
        let ids = ids.to_vec();
        Ok(Self::from_op(
            value,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = Matrix::zeros(rows, cols);
                for (k, &i) in ids.iter().enumerate() {
                    for (x, &gv) in gx.row_mut(i).iter_mut().zip(g.row(k)) {
                        *x += gv;
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Scaled dot-product attention applied independently to consecutive row
    /// segments of `q`, `k`, `v` (one segment per sequence in the batch).
    /// With `causal`, row `i` of a segment only attends to rows `0..=i`.
    pub fn segment_attention(
        q: &Self,
        k: &Self,
        v: &Self,
        segments: &[usize],
        causal: bool,
    ) -> Result<Self> {
        same_shape("segment_attention", q, k)?;
        same_shape("segment_attention", q, v)?;
        let (rows, dim) = q.shape();
        let total: usize = segments.iter().sum();
        if total != rows {
            return Err(Error::InvalidArgument(format!(
                "attention segments cover {total} rows, input has {rows}"
            )));
        }
        let scale = T::one() / T::from_usize(dim).expect("size fits").sqrt();
        let starts = segment_starts(segments);
        let mut probs: Vec<Matrix<T>> = Vec::with_capacity(segments.len());
        let mut out = Matrix::zeros(rows, dim);
        {
            let (qv, kv, vv) = (q.value(), k.value(), v.value());
            for (&s, &len) in starts.iter().zip(segments) {
                let qs = qv.slice_rows(s, s + len)?;
                let ks = kv.slice_rows(s, s + len)?;
                let vs = vv.slice_rows(s, s + len)?;
                let mut p = qs.matmul_nt(&ks)?;
                for i in 0..len {
                    let row = p.row_mut(i);
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = if causal && j > i { T::neg_infinity() } else { *x * scale };
                    }
                    softmax_row_in_place(row);
                }
                let o = p.matmul(&vs)?;
                out.as_mut_slice()[s * dim..(s + len) * dim].copy_from_slice(o.as_slice());
                probs.push(p);
            }
        }
        let segs = segments.to_vec();
        Ok(Self::from_op(
            out,
            vec![q.clone(), k.clone(), v.clone()],
            Box::new(move |g, p, _| {
                let (qv, kv, vv) = (p[0].value(), p[1].value(), p[2].value());
                let mut gq = Matrix::zeros(rows, dim);
                let mut gk = Matrix::zeros(rows, dim);
                let mut gv = Matrix::zeros(rows, dim);
                for ((&s, &len), pm) in starts.iter().zip(&segs).zip(&probs) {
                    let rng = s * dim..(s + len) * dim;
                    let qs = qv.slice_rows(s, s + len).expect("forward bounds");
                    let ks = kv.slice_rows(s, s + len).expect("forward bounds");
                    let vs = vv.slice_rows(s, s + len).expect("forward bounds");
                    let go = g.slice_rows(s, s + len).expect("forward bounds");
                    let dv = pm.matmul_tn(&go).expect("shapes");
                    let dp = go.matmul_nt(&vs).expect("shapes");
                    let mut ds = dp;
                    for i in 0..len {
                        let pr = pm.row(i);
                        let sdot = dot(ds.row(i), pr);
                        for (x, &pv) in ds.row_mut(i).iter_mut().zip(pr) {
                            *x = pv * (*x - sdot) * scale;
                        }
                    }
                    let dq = ds.matmul(&ks).expect("shapes");
                    let dk = ds.matmul_tn(&qs).expect("shapes");
                    gq.as_mut_slice()[rng.clone()].copy_from_slice(dq.as_slice());
                    gk.as_mut_slice()[rng.clone()].copy_from_slice(dk.as_slice());
                    gv.as_mut_slice()[rng].copy_from_slice(dv.as_slice());
                }
                vec![Some(gq), Some(gk), Some(gv)]
            }),
        ))
    }

    /// Block-wise MeanMaxSim over a precomputed similarity matrix.
    ///
    /// `self` is `Σ row_segments x Σ col_segments`; entry `(a, b)` of the
    /// result is the mean, over rows of segment `a`, of the maximum over the
    /// columns of segment `b`.
    pub fn segment_mean_max(&self, row_segments: &[usize], col_segments: &[usize]) -> Result<Self> {
        let (rows, cols) = self.shape();
        if row_segments.iter().sum::<usize>() != rows || col_segments.iter().sum::<usize>() != cols {
            return Err(Error::InvalidArgument(format!(
                "segments ({} rows, {} cols) do not tile a {rows}x{cols} matrix",
                row_segments.iter().sum::<usize>(),
                col_segments.iter().sum::<usize>()
            )));
        }
        if row_segments.iter().chain(col_segments).any(|&s| s == 0) {
            return Err(Error::Empty("segment_mean_max segment"));
        }
        let rs = segment_starts(row_segments);
        let cs = segment_starts(col_segments);
        let nb = col_segments.len();
        // argmax[r * nb + b] = column index of the max of row r within segment b
        let mut arg = vec![0usize; rows * nb];
        let mut out = Matrix::zeros(row_segments.len(), nb);
        {
            let v = self.value();
            for (a, (&r0, &rl)) in rs.iter().zip(row_segments).enumerate() {
                let inv = T::one() / T::from_usize(rl).expect("size fits");
                for r in r0..r0 + rl {
                    let row = v.row(r);
                    for (b, (&c0, &cl)) in cs.iter().zip(col_segments).enumerate() {
                        let (j, m) = argmax(&row[c0..c0 + cl]);
                        arg[r * nb + b] = c0 + j;
                        let o = out.get(a, b);
                        out.set(a, b, o + m * inv);
                    }
                }
            }
        }
        let row_segments = row_segments.to_vec();
        Ok(Self::from_op(
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = Matrix::zeros(rows, cols);
                for (a, (&r0, &rl)) in rs.iter().zip(&row_segments).enumerate() {
                    let inv = T::one() / T::from_usize(rl).expect("size fits");
                    for r in r0..r0 + rl {
                        for b in 0..nb {
                            let j = arg[r * nb + b];
                            let cur = gx.get(r, j);
                            gx.set(r, j, cur + g.get(a, b) * inv);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}

/// Index and value of the first maximum.
#[inline]
fn argmax<T: Scalar>(xs: &[T]) -> (usize, T) {
    let mut best = (0, xs[0]);
    for (i, &x) in xs.iter().enumerate().skip(1) {
        if x > best.1 {
            best = (i, x);
        }
    }
    best
}

pub(crate) fn segment_starts(segments: &[usize]) -> Vec<usize> {
    let mut acc = 0;
    segments
        .iter()
        .map(|&s| {
            let start = acc;
            acc += s;
            start
        })
        .collect()
}
