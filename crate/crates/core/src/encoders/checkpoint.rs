//! Parameter checkpoints: the index container with magic `VCP1`, a JSON
//! config block, then named tensors stored as 64-bit floats.
//!
//! Layout after the header: `D u32`, tensor count `u64`, config blob
//! (`u32` length + JSON), then per tensor `name (u16 + UTF-8)`, `rows u32`,
//! `cols u32`, `rows x cols f64`.

use std::path::Path;

use crate::codec::{Decoder, Encoder};
use crate::error::{Error, Result};
use crate::tensor::{Matrix, Scalar, Tensor};

use super::{EncoderConfig, EncoderParams};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"VCP1";
const CHECKPOINT_VERSION: u32 = 1;

/// Serializes `params` followed by `extras` (e.g. loss parameters).
pub fn write_checkpoint<T: Scalar>(
    params: &EncoderParams<T>,
    extras: &[(String, Matrix<T>)],
) -> Result<Vec<u8>> {
    let named = params.named_params();
    let mut e = Encoder::new(CHECKPOINT_MAGIC, CHECKPOINT_VERSION);
    e.u32(params.config.dim as u32);
    e.u64((named.len() + extras.len()) as u64);
    e.blob(&serde_json::to_vec(&params.config)?);
    let tensors = named
        .iter()
        .map(|p| (p.name.clone(), p.tensor.value().clone()))
        .chain(extras.iter().cloned());
    for (name, m) in tensors {
        e.short_str("tensor name", &name)?;
        e.u32(m.rows() as u32);
        e.u32(m.cols() as u32);
        e.f64s(m.as_slice().iter().map(|v| v.to_f64_lossy()));
    }
    Ok(e.finish())
}

/// Inverse of [`write_checkpoint`]; returns the parameters and the extras.
pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(EncoderParams<T>, Vec<(String, Matrix<T>)>)> {
    let mut d = Decoder::open(bytes, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
    let dim = d.u32("dim")? as usize;
    let count = d.u64("tensor count")? as usize;
    let config: EncoderConfig = serde_json::from_slice(d.blob("config")?)?;
    if config.dim != dim {
        return Err(Error::Format {
            field: "dim",
            detail: format!("header says {dim}, config says {}", config.dim),
        });
    }
    let mut tensors = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name = d.short_str("tensor name")?;
        let rows = d.u32("tensor rows")? as usize;
        let cols = d.u32("tensor cols")? as usize;
        let data = d.f64s("tensor data", rows.saturating_mul(cols))?;
        let m = Matrix::new(rows, cols, data.into_iter().map(T::lit).collect())?;
        tensors.push((name, m));
    }
    d.finish()?;

    let mut params = EncoderParams::<T>::init(config, 0)?;
    let expected: Vec<(String, (usize, usize))> = params
        .named_params()
        .into_iter()
        .map(|p| (p.name, p.tensor.shape()))
        .collect();
    if tensors.len() < expected.len() {
        return Err(Error::Format {
            field: "tensor count",
            detail: format!("{} tensors, model needs {}", tensors.len(), expected.len()),
        });
    }
    for ((name, shape), (got, m)) in expected.iter().zip(&tensors) {
        if name != got || *shape != m.shape() {
            return Err(Error::Format {
                field: "tensor name",
                detail: format!("expected {name} {shape:?}, found {got} {:?}", m.shape()),
            });
        }
    }
    let extras = tensors.split_off(expected.len());
    let mut loaded = tensors.into_iter();
    params.map_tensors(|_| Tensor::parameter(loaded.next().expect("count checked").1));
    Ok((params, extras))
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    params: &EncoderParams<T>,
    extras: &[(String, Matrix<T>)],
) -> Result<()> {
    std::fs::write(path, write_checkpoint(params, extras)?)?;
    Ok(())
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(EncoderParams<T>, Vec<(String, Matrix<T>)>)> {
    read_checkpoint(&std::fs::read(path)?)
}
