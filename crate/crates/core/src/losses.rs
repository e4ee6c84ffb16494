//! In-batch contrastive objectives over similarity matrices.
//!
//! The pairwise sigmoid loss is
//!
//! ```text
//! L(S) = (1/B) Σ_ij softplus(z_ij · (−t·S_ij + b))
//! ```
//!
//! with `z = +1` on matched pairs and `−1` elsewhere. The dual loss applies it
//! separately to the frame-level and video-level matrices and adds the two
//! with weights `λ_F`, `λ_V`; the combined variant applies it once to
//! `S_F + S_V`. InfoNCE is provided for comparison.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar, Tensor};

/// Logit scale used at initialization.
pub const DEFAULT_LOGIT_SCALE: f64 = 4.77;
/// Logit bias used at initialization.
pub const DEFAULT_LOGIT_BIAS: f64 = -12.93;
/// Smallest logit scale kept after an optimizer step.
pub const MIN_LOGIT_SCALE: f64 = 1e-3;

/// Learnable logit scale/bias and the fixed level weights.
#[derive(Clone, Debug)]
pub struct LossParams<T: Scalar> {
    pub t: Tensor<T>,
    pub b: Tensor<T>,
    /// Separate scale/bias for the video-level term; `None` shares `t`, `b`.
    pub video_level: Option<(Tensor<T>, Tensor<T>)>,
    pub lambda_f: T,
    pub lambda_v: T,
}

impl<T: Scalar> LossParams<T> {
    pub fn new(t: T, b: T, lambda_f: T, lambda_v: T) -> Result<Self> {
        if !(t > T::zero()) {
            return Err(Error::InvalidArgument(format!("logit scale must be positive, got {t}")));
        }
        if lambda_f < T::zero() || lambda_v < T::zero() {
            return Err(Error::InvalidArgument(format!(
                "loss weights must be non-negative, got {lambda_f} / {lambda_v}"
            )));
        }
        Ok(Self {
            t: Tensor::scalar(t, true),
            b: Tensor::scalar(b, true),
            video_level: None,
            lambda_f,
            lambda_v,
        })
    }

    /// Gives the video-level term its own scale and bias, initialized to the
    /// current shared values.
    pub fn with_per_level_scales(mut self) -> Self {
        let t = self.t.item().expect("1x1");
        let b = self.b.item().expect("1x1");
        self.video_level = Some((Tensor::scalar(t, true), Tensor::scalar(b, true)));
        self
    }

    pub fn frame_scale(&self) -> (&Tensor<T>, &Tensor<T>) {
        (&self.t, &self.b)
    }

    pub fn video_scale(&self) -> (&Tensor<T>, &Tensor<T>) {
        match &self.video_level {
            Some((t, b)) => (t, b),
            None => (&self.t, &self.b),
        }
    }

    /// All learnable leaves.
    pub fn tensors(&self) -> Vec<Tensor<T>> {
        let mut v = vec![self.t.clone(), self.b.clone()];
        if let Some((t, b)) = &self.video_level {
            v.push(t.clone());
            v.push(b.clone());
        }
        v
    }

    /// Keeps every logit scale strictly positive.
    pub fn project(&self) {
        let floor = T::lit(MIN_LOGIT_SCALE);
        let mut scales = vec![&self.t];
        if let Some((t, _)) = &self.video_level {
            scales.push(t);
        }
        for t in scales {
            t.update(|m| {
                let x = &mut m.as_mut_slice()[0];
                if *x < floor {
                    *x = floor;
                }
            });
        }
    }
}

impl<T: Scalar> Default for LossParams<T> {
    fn default() -> Self {
        Self::new(
            T::lit(DEFAULT_LOGIT_SCALE),
            T::lit(DEFAULT_LOGIT_BIAS),
            T::one(),
            T::one(),
        )
        .expect("defaults are valid")
    }
}

/// `±1` pairing labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairLabels<T> {
    z: Matrix<T>,
}

impl<T: Scalar> PairLabels<T> {
    /// `+1` on the diagonal, `−1` elsewhere.
    pub fn diagonal(batch: usize) -> Self {
        Self {
            z: Matrix::from_fn(batch, batch, |i, j| if i == j { T::one() } else { -T::one() }),
        }
    }

    pub fn new(z: Matrix<T>) -> Result<Self> {
        if z.rows() != z.cols() {
            return Err(Error::ShapeMismatch {
                op: "pair labels",
                left: z.shape(),
                right: (z.rows(), z.rows()),
            });
        }
        if z.as_slice().iter().any(|&x| x != T::one() && x != -T::one()) {
            return Err(Error::InvalidArgument("pair labels must be +1 or -1".into()));
        }
        Ok(Self { z })
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.z
    }

    pub fn batch(&self) -> usize {
        self.z.rows()
    }
}

fn square<T: Scalar>(s: &Tensor<T>) -> Result<usize> {
    let (r, c) = s.shape();
    if r != c || r == 0 {
        return Err(Error::ShapeMismatch {
            op: "loss (square similarity matrix)",
            left: (r, c),
            right: (r, r),
        });
    }
    Ok(r)
}

/// Pairwise sigmoid loss with explicit scale and bias tensors.
pub fn sigmoid_loss_with<T: Scalar>(
    s: &Tensor<T>,
    z: &PairLabels<T>,
    t: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>> {
    let batch = square(s)?;
    if z.batch() != batch {
        return Err(Error::ShapeMismatch {
            op: "sigmoid_loss labels",
            left: s.shape(),
            right: z.matrix().shape(),
        });
    }
    let logits = s.scale_by(t)?.neg().add_scalar(b)?;
    let signed = logits.mul(&Tensor::constant(z.matrix().clone()))?;
    Ok(signed.softplus().sum().scale(T::one() / T::from_usize(batch).expect("size fits")))
}

/// Pairwise sigmoid loss using the frame-level (shared) scale and bias.
pub fn sigmoid_loss<T: Scalar>(s: &Tensor<T>, z: &PairLabels<T>, p: &LossParams<T>) -> Result<Tensor<T>> {
    let (t, b) = p.frame_scale();
    sigmoid_loss_with(s, z, t, b)
}

fn same_shape<T: Scalar>(sf: &Tensor<T>, sv: &Tensor<T>) -> Result<()> {
    if sf.shape() != sv.shape() {
        return Err(Error::ShapeMismatch {
            op: "frame/video similarity matrices",
            left: sf.shape(),
            right: sv.shape(),
        });
    }
    Ok(())
}

/// `λ_F·L(S_F) + λ_V·L(S_V)`.
pub fn dual_sigmoid_loss<T: Scalar>(
    sf: &Tensor<T>,
    sv: &Tensor<T>,
    z: &PairLabels<T>,
    p: &LossParams<T>,
) -> Result<Tensor<T>> {
    same_shape(sf, sv)?;
    let (tf, bf) = p.frame_scale();
    let (tv, bv) = p.video_scale();
    let lf = sigmoid_loss_with(sf, z, tf, bf)?;
    let lv = sigmoid_loss_with(sv, z, tv, bv)?;
    lf.scale(p.lambda_f).add(&lv.scale(p.lambda_v))
}

/// Single sigmoid loss over `S_F + S_V`.
pub fn combined_sigmoid_loss<T: Scalar>(
    sf: &Tensor<T>,
    sv: &Tensor<T>,
    z: &PairLabels<T>,
    p: &LossParams<T>,
) -> Result<Tensor<T>> {
    same_shape(sf, sv)?;
    sigmoid_loss(&sf.add(sv)?, z, p)
}

/// Symmetric softmax cross-entropy with positives on the diagonal:
/// `−(1/2B) Σ_i [log softmax_row(tS)_ii + log softmax_col(tS)_ii]`.
pub fn infonce_loss<T: Scalar>(s: &Tensor<T>, t: &Tensor<T>) -> Result<Tensor<T>> {
    let batch = square(s)?;
    let logits = s.scale_by(t)?;
    let eye = Tensor::constant(Matrix::identity(batch));
    let rows = logits.log_softmax_rows().mul(&eye)?.sum();
    let cols = logits.transpose().log_softmax_rows().mul(&eye)?.sum();
    let n = T::from_usize(2 * batch).expect("size fits");
    Ok(rows.add(&cols)?.scale(-T::one() / n))
}

/// Training objective selector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "sigmoid-dual")]
    SigmoidDual,
    #[serde(rename = "sigmoid-combined")]
    SigmoidCombined,
    #[serde(rename = "infonce-dual")]
    InfonceDual,
    #[serde(rename = "infonce-combined")]
    InfonceCombined,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        Self::SigmoidCombined,
        Self::SigmoidDual,
        Self::InfonceCombined,
        Self::InfonceDual,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SigmoidDual => "sigmoid-dual",
            Self::SigmoidCombined => "sigmoid-combined",
            Self::InfonceDual => "infonce-dual",
            Self::InfonceCombined => "infonce-combined",
        }
    }

    /// Evaluates the objective on frame- and video-level matrices.
    pub fn compute<T: Scalar>(
        self,
        sf: &Tensor<T>,
        sv: &Tensor<T>,
        p: &LossParams<T>,
    ) -> Result<Tensor<T>> {
        let batch = square(sf)?;
        let z = PairLabels::diagonal(batch);
        match self {
            Self::SigmoidDual => dual_sigmoid_loss(sf, sv, &z, p),
            Self::SigmoidCombined => combined_sigmoid_loss(sf, sv, &z, p),
            Self::InfonceDual => {
                same_shape(sf, sv)?;
                let lf = infonce_loss(sf, p.frame_scale().0)?;
                let lv = infonce_loss(sv, p.video_scale().0)?;
                lf.scale(p.lambda_f).add(&lv.scale(p.lambda_v))
            }
            Self::InfonceCombined => {
                same_shape(sf, sv)?;
                infonce_loss(&sf.add(sv)?, p.frame_scale().0)
            }
        }
    }
}

impl fmt::Display for LossKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Unknown {
                kind: "loss kind",
                name: s.to_string(),
            })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::constant(Matrix::from_rows(rows).unwrap())
    }

    #[test]
    fn single_pair_values() {
        let z = PairLabels::diagonal(1);
        let p = LossParams::new(1.0, 0.0, 1.0, 1.0).unwrap();
        let l = sigmoid_loss(&s(&[&[0.0]]), &z, &p).unwrap().item().unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);

        let p = LossParams::<f64>::default();
        let pos = sigmoid_loss(&s(&[&[0.0]]), &z, &p).unwrap().item().unwrap();
        assert!((pos - (-12.93f64).exp().ln_1p()).abs() < 1e-15);
        assert!((pos - 2.4e-6).abs() < 1e-7);
        let neg_z = PairLabels::new(Matrix::from_rows(&[[-1.0]]).unwrap()).unwrap();
        let neg = sigmoid_loss(&s(&[&[0.0]]), &neg_z, &p).unwrap().item().unwrap();
        assert!((neg - 12.93).abs() < 1e-5);
    }

    #[test]
    fn infonce_degenerate_cases() {
        let t = Tensor::scalar(4.77, false);
        assert_eq!(infonce_loss(&s(&[&[0.3]]), &t).unwrap().item().unwrap(), 0.0);
        let zero = Tensor::scalar(0.0, false);
        let eye = Tensor::constant(Matrix::<f64>::identity(4));
        let l = infonce_loss(&eye, &zero).unwrap().item().unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);
        let big = Tensor::scalar(200.0, false);
        assert!(infonce_loss(&eye, &big).unwrap().item().unwrap() < 1e-12);
    }

    #[test]
    fn shape_and_label_errors() {
        let p = LossParams::<f64>::default();
        let rect = Tensor::constant(Matrix::zeros(2, 3));
        assert!(sigmoid_loss(&rect, &PairLabels::diagonal(2), &p).is_err());
        assert!(infonce_loss(&rect, &p.t).is_err());
        let sq2 = Tensor::constant(Matrix::zeros(2, 2));
        let sq3 = Tensor::constant(Matrix::zeros(3, 3));
        assert!(dual_sigmoid_loss(&sq2, &sq3, &PairLabels::diagonal(2), &p).is_err());
        assert!(combined_sigmoid_loss(&sq2, &sq3, &PairLabels::diagonal(2), &p).is_err());
        assert!(PairLabels::new(Matrix::from_rows(&[[1.0, 0.0], [1.0, 1.0]]).unwrap()).is_err());
        assert!(LossParams::new(0.0, 0.0, 1.0, 1.0).is_err());
        assert!(LossParams::new(1.0, 0.0, -1.0, 1.0).is_err());
    }

    #[test]
    fn projection_keeps_scale_positive() {
        let p = LossParams::<f64>::default().with_per_level_scales();
        p.t.update(|m| m.as_mut_slice()[0] = -3.0);
        p.video_scale().0.update(|m| m.as_mut_slice()[0] = 0.0);
        p.project();
        assert_eq!(p.t.item().unwrap(), MIN_LOGIT_SCALE);
        assert_eq!(p.video_scale().0.item().unwrap(), MIN_LOGIT_SCALE);
    }

    #[test]
    fn kind_names_round_trip() {
        for k in LossKind::ALL {
            assert_eq!(k.as_str().parse::<LossKind>().unwrap(), k);
        }
        assert!("hinge".parse::<LossKind>().is_err());
    }
}
