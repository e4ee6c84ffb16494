use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::tensor::{Matrix, Scalar, Tensor};

const LN_EPS: f64 = 1e-5;

pub(crate) fn gaussian<T: Scalar, R: Rng>(rng: &mut R, rows: usize, cols: usize, std: f64) -> Matrix<T> {
    let normal = Normal::new(0.0, std).expect("positive std");
    Matrix::from_fn(rows, cols, |_, _| T::lit(normal.sample(rng)))
}

/// `x · W + b` for a `fan_in x fan_out` weight.
#[derive(Clone, Debug)]
pub struct Linear<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn init<R: Rng>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::parameter(gaussian(rng, fan_in, fan_out, 1.0 / (fan_in as f64).sqrt())),
            bias: Tensor::parameter(Matrix::zeros(1, fan_out)),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::parameter(Matrix::zeros(fan_in, fan_out)),
            bias: Tensor::parameter(Matrix::zeros(1, fan_out)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.weight)?.add_row(&self.bias)
    }

    fn push_named(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.weight"), self.weight.clone()));
        out.push((format!("{prefix}.bias"), self.bias.clone()));
    }
}

/// Layer normalization with learned gain and shift.
#[derive(Clone, Debug)]
pub struct LayerNorm<T: Scalar> {
    pub gain: Tensor<T>,
    pub shift: Tensor<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(width: usize) -> Self {
        Self {
            gain: Tensor::parameter(Matrix::filled(1, width, T::one())),
            shift: Tensor::parameter(Matrix::zeros(1, width)),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.layer_norm_rows(T::lit(LN_EPS)).mul_row(&self.gain)?.add_row(&self.shift)
    }

    fn push_named(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        out.push((format!("{prefix}.gain"), self.gain.clone()));
        out.push((format!("{prefix}.shift"), self.shift.clone()));
    }
}

/// Pre-norm transformer block: single-head self-attention then a GELU MLP,
/// each wrapped in a residual connection.
#[derive(Clone, Debug)]
pub struct Block<T: Scalar> {
    pub ln_attn: LayerNorm<T>,
    pub query: Linear<T>,
    pub key: Linear<T>,
    pub value: Linear<T>,
    pub out: Linear<T>,
    pub ln_mlp: LayerNorm<T>,
    pub fc: Linear<T>,
    pub proj: Linear<T>,
}

impl<T: Scalar> Block<T> {
    pub fn init<R: Rng>(rng: &mut R, width: usize, mlp_ratio: usize) -> Self {
        Self {
            ln_attn: LayerNorm::new(width),
            query: Linear::init(rng, width, width),
            key: Linear::init(rng, width, width),
            value: Linear::init(rng, width, width),
            out: Linear::init(rng, width, width),
            ln_mlp: LayerNorm::new(width),
            fc: Linear::init(rng, width, width * mlp_ratio),
            proj: Linear::init(rng, width * mlp_ratio, width),
        }
    }

    /// Block whose residual branches output exactly zero.
    pub fn identity(width: usize, mlp_ratio: usize) -> Self {
        Self {
            ln_attn: LayerNorm::new(width),
            query: Linear::zeros(width, width),
            key: Linear::zeros(width, width),
            value: Linear::zeros(width, width),
            out: Linear::zeros(width, width),
            ln_mlp: LayerNorm::new(width),
            fc: Linear::zeros(width, width * mlp_ratio),
            proj: Linear::zeros(width * mlp_ratio, width),
        }
    }

    /// `segments` splits the stacked rows into independent sequences.
    pub fn forward(&self, x: &Tensor<T>, segments: &[usize], causal: bool) -> Result<Tensor<T>> {
        let h = self.ln_attn.forward(x)?;
        let attn = Tensor::segment_attention(
            &self.query.forward(&h)?,
            &self.key.forward(&h)?,
            &self.value.forward(&h)?,
            segments,
            causal,
        )?;
        let x = x.add(&self.out.forward(&attn)?)?;
        let h = self.ln_mlp.forward(&x)?;
        let m = self.proj.forward(&self.fc.forward(&h)?.gelu())?;
        x.add(&m)
    }

    pub(crate) fn push_named(&self, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
        self.ln_attn.push_named(&format!("{prefix}.ln_attn"), out);
        self.query.push_named(&format!("{prefix}.query"), out);
        self.key.push_named(&format!("{prefix}.key"), out);
        self.value.push_named(&format!("{prefix}.value"), out);
        self.out.push_named(&format!("{prefix}.out"), out);
        self.ln_mlp.push_named(&format!("{prefix}.ln_mlp"), out);
        self.fc.push_named(&format!("{prefix}.fc"), out);
        self.proj.push_named(&format!("{prefix}.proj"), out);
    }
}

pub(crate) fn push_linear<T: Scalar>(l: &Linear<T>, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
    l.push_named(prefix, out);
}

pub(crate) fn push_norm<T: Scalar>(l: &LayerNorm<T>, prefix: &str, out: &mut Vec<(String, Tensor<T>)>) {
    l.push_named(prefix, out);
}
