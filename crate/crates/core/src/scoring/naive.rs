//! Reference interactions written as explicit loops over raw row-major
//! buffers. Used to cross-check the optimized kernels.

use super::{FrameBank, QueryEncoding, VideoBank};
use crate::tensor::{Matrix, Scalar};

fn sum_max<T: Scalar>(q: &Matrix<T>, docs: &Matrix<T>) -> T {
    let d = q.cols();
    let (qs, ds) = (q.as_slice(), docs.as_slice());
    let mut total = T::zero();
    for j in 0..q.rows() {
        let mut best = T::neg_infinity();
        for i in 0..docs.rows() {
            let mut s = T::zero();
            for k in 0..d {
                s += qs[j * d + k] * ds[i * d + k];
            }
            if s > best {
                best = s;
            }
        }
        total += best;
    }
    total
}

pub fn mp_score<T: Scalar>(q: &[T], fb: &FrameBank<T>) -> T {
    let f = fb.frames();
    let n = T::from_usize(f.rows()).expect("size fits");
    let mut s = T::zero();
    for k in 0..q.len() {
        let mut col = T::zero();
        for i in 0..f.rows() {
            col += f.get(i, k);
        }
        s += q[k] * (col / n);
    }
    s
}

pub fn sms_score<T: Scalar>(qe: &QueryEncoding<T>, fb: &FrameBank<T>) -> T {
    sum_max(qe.tokens(), fb.frames())
}

pub fn mms_f<T: Scalar>(qe: &QueryEncoding<T>, fb: &FrameBank<T>) -> T {
    sum_max(qe.tokens(), fb.frames()) / T::from_usize(qe.padded_length()).expect("size fits")
}

pub fn mms_v<T: Scalar>(qe: &QueryEncoding<T>, vb: &VideoBank<T>) -> T {
    sum_max(qe.tokens(), vb.feats()) / T::from_usize(qe.padded_length()).expect("size fits")
}

pub fn mms_fv<T: Scalar>(qe: &QueryEncoding<T>, fb: &FrameBank<T>, vb: &VideoBank<T>) -> T {
    mms_f(qe, fb) + mms_v(qe, vb)
}
