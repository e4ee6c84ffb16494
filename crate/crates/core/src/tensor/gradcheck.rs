use super::{Matrix, Scalar};
use crate::error::{Error, Result};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Central-difference gradient of a scalar function at `x`:
/// `(f(x + eps·e) − f(x − eps·e)) / (2·eps)` for every entry.
pub fn finite_diff_grad<T, F>(mut f: F, x: &Matrix<T>, eps: T) -> Result<Matrix<T>>
where
    T: Scalar,
    F: FnMut(&Matrix<T>) -> Result<T>,
{
    if !(eps > T::zero()) {
        return Err(Error::InvalidArgument(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let two_eps = eps + eps;
    for i in 0..x.as_slice().len() {
        let orig = probe.as_slice()[i];
        probe.as_mut_slice()[i] = orig + eps;
        let plus = f(&probe)?;
        probe.as_mut_slice()[i] = orig - eps;
        let minus = f(&probe)?;
        probe.as_mut_slice()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at entry {i}")));
        }
        out.as_mut_slice()[i] = (plus - minus) / two_eps;
    }
    Ok(out)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, floor)`, the comparison used by gradient checks.
pub fn relative_error<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>, floor: T) -> T {
    let diff = a.zip_map(b, |x, y| (x - y) * (x - y)).sum().sqrt();
    let na = a.as_slice().iter().map(|&x| x * x).sum::<T>().sqrt();
    let nb = b.as_slice().iter().map(|&x| x * x).sum::<T>().sqrt();
    diff / na.max(nb).max(floor)
}
