//! Analytic gradients of every primitive against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcolbert::tensor::{finite_diff_grad, relative_error};
use vcolbert::{Matrix64, Result, Tensor64};

const TRIALS: usize = 20;
const TOL: f64 = 1e-4;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Matrix64 {
    Matrix64::from_fn(rows, cols, |_, _| rng.gen_range(-2.0..2.0))
}

/// Projects an arbitrary-shaped output onto a fixed random weight so the
/// scalar objective depends on every output entry.
fn project(out: &Tensor64, w: &Matrix64) -> Result<Tensor64> {
    Ok(out.mul(&Tensor64::constant(w.clone()))?.sum())
}

/// Checks d/dx of `op(x)` projected onto a random weight, for `TRIALS`
/// random inputs of the given shape.
fn check_unary(name: &str, rows: usize, cols: usize, op: impl Fn(&Tensor64) -> Result<Tensor64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(name.len() as u64 * 7919);
    for trial in 0..TRIALS {
        let x0 = random(&mut rng, rows, cols);
        let probe = op(&Tensor64::constant(x0.clone())).unwrap();
        let (or, oc) = probe.shape();
        let w = random(&mut rng, or, oc);

        let x = Tensor64::parameter(x0.clone());
        project(&op(&x).unwrap(), &w).unwrap().backward().unwrap();
        let analytic = x.grad().unwrap();

        let numeric = finite_diff_grad(
            |m| project(&op(&Tensor64::constant(m.clone()))?, &w)?.item(),
            &x0,
            1e-5,
        )
        .unwrap();
        let err = relative_error(&analytic, &numeric, 1e-8);
        assert!(err < TOL, "{name} trial {trial}: relative error {err:e}");
    }
}

#[test]
fn elementwise_and_row_primitives() {
    check_unary("gelu", 3, 4, |x| Ok(x.gelu()));
    check_unary("softplus", 3, 4, |x| Ok(x.softplus()));
    check_unary("softmax_rows", 3, 5, |x| Ok(x.softmax_rows()));
    check_unary("log_softmax_rows", 3, 5, |x| Ok(x.log_softmax_rows()));
    check_unary("layer_norm_rows", 3, 6, |x| Ok(x.layer_norm_rows(1e-5)));
    check_unary("l2_normalize_rows", 4, 3, |x| x.l2_normalize_rows());
    check_unary("transpose", 2, 5, |x| Ok(x.transpose()));
    check_unary("scale", 2, 3, |x| Ok(x.scale(-1.7)));
    check_unary("mean", 3, 3, |x| Ok(x.mean()));
    check_unary("max_rows", 4, 6, |x| Ok(x.max_rows()?.0));
    check_unary("slice_rows", 5, 3, |x| x.slice_rows(1, 4));
    check_unary("slice_cols", 3, 5, |x| x.slice_cols(2, 5));
    check_unary("gather_rows", 4, 3, |x| x.gather_rows(&[2, 0, 2, 3]));
    check_unary("mul_self", 3, 3, |x| x.mul(x));
}

#[test]
fn binary_primitives_both_sides() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let b = random(&mut rng, 4, 2);
    check_unary("matmul_left", 3, 4, |x| x.matmul(&Tensor64::constant(b.clone())));
    let a = random(&mut rng, 2, 3);
    check_unary("matmul_right", 3, 4, |x| Tensor64::constant(a.clone()).matmul(x));
    let c = random(&mut rng, 3, 4);
    check_unary("add", 3, 4, |x| x.add(&Tensor64::constant(c.clone())));
    check_unary("sub_right", 3, 4, |x| Tensor64::constant(c.clone()).sub(x));
    check_unary("mul", 3, 4, |x| x.mul(&Tensor64::constant(c.clone())));
    let row = random(&mut rng, 1, 4);
    check_unary("add_row", 3, 4, |x| x.add_row(&Tensor64::constant(row.clone())));
    check_unary("mul_row", 3, 4, |x| x.mul_row(&Tensor64::constant(row.clone())));
    check_unary("row_of_add_row", 1, 4, |r| Tensor64::constant(c.clone()).add_row(r));
    check_unary("row_of_mul_row", 1, 4, |r| Tensor64::constant(c.clone()).mul_row(r));
    check_unary("scale_by", 1, 1, |s| Tensor64::constant(c.clone()).scale_by(s));
    check_unary("add_scalar", 1, 1, |s| Tensor64::constant(c.clone()).add_scalar(s));
    check_unary("concat_rows", 2, 4, |x| {
        Tensor64::concat_rows(&[Tensor64::constant(c.clone()), x.clone(), x.scale(2.0)])
    });
}

#[test]
fn fused_attention_and_mean_max() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let k = random(&mut rng, 7, 4);
    let v = random(&mut rng, 7, 4);
    for causal in [false, true] {
        check_unary("attention_q", 7, 4, |q| {
            Tensor64::segment_attention(
                q,
                &Tensor64::constant(k.clone()),
                &Tensor64::constant(v.clone()),
                &[3, 4],
                causal,
            )
        });
        check_unary("attention_self", 7, 4, |x| {
            Tensor64::segment_attention(x, x, x, &[4, 3], causal)
        });
    }
    check_unary("segment_mean_max", 5, 7, |x| x.segment_mean_max(&[2, 3], &[3, 1, 3]));
}

#[test]
fn quadratic_root_gradient() {
    let x = Tensor64::parameter(Matrix64::from_rows(&[[1.0, 2.0]]).unwrap());
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap().as_slice(), &[2.0, 4.0]);

    // Repeated backward passes accumulate.
    x.mul(&x).unwrap().sum().backward().unwrap();
    assert_eq!(x.grad().unwrap().as_slice(), &[4.0, 8.0]);
    x.zero_grad();
    assert!(x.grad().is_none());
}

#[test]
fn constant_root_has_zero_gradient() {
    let x = Tensor64::parameter(Matrix64::from_rows(&[[1.0, -3.0]]).unwrap());
    let c = Tensor64::constant(Matrix64::from_rows(&[[2.0]]).unwrap());
    // x contributes with weight zero.
    let root = x.scale(0.0).sum().add(&c).unwrap();
    root.backward().unwrap();
    assert_eq!(x.grad().unwrap().as_slice(), &[0.0, 0.0]);
}

#[test]
fn normalized_dot_matches_finite_differences() {
    let x0 = Matrix64::from_rows(&[[0.3, -1.2, 0.7]]).unwrap();
    let c = Matrix64::from_rows(&[[0.5, 0.25, -2.0]]).unwrap();
    let f = |m: &Tensor64| -> Result<Tensor64> {
        Ok(m.l2_normalize_rows()?.mul(&Tensor64::constant(c.clone()))?.sum())
    };
    let x = Tensor64::parameter(x0.clone());
    f(&x).unwrap().backward().unwrap();
    let fd = finite_diff_grad(|m| f(&Tensor64::constant(m.clone()))?.item(), &x0, 1e-5).unwrap();
    assert!(relative_error(&x.grad().unwrap(), &fd, 1e-12) < 1e-6);
}

#[test]
fn non_scalar_root_rejected() {
    let x = Tensor64::parameter(Matrix64::zeros(2, 2));
    assert!(x.scale(2.0).backward().is_err());
}

#[test]
fn finite_diff_examples() {
    let x = Matrix64::from_rows(&[[3.0]]).unwrap();
    let g = finite_diff_grad(|m| Ok(m.get(0, 0).powi(2)), &x, 1e-5).unwrap();
    assert!((g.get(0, 0) - 6.0).abs() < 1e-8);

    let x = Matrix64::from_rows(&[[3.0, 4.0]]).unwrap();
    let g = finite_diff_grad(|m| Ok(m.row(0).iter().map(|v| v * v).sum::<f64>().sqrt()), &x, 1e-5)
        .unwrap();
    assert!((g.get(0, 0) - 0.6).abs() < 1e-6 && (g.get(0, 1) - 0.8).abs() < 1e-6);

    assert!(finite_diff_grad(|_| Ok(f64::NAN), &x, 1e-5).is_err());
    assert!(finite_diff_grad(|_| Ok(0.0), &x, 0.0).is_err());
}

#[test]
fn forward_examples_and_determinism() {
    let s = Tensor64::constant(Matrix64::zeros(1, 2)).softmax_rows();
    assert_eq!(s.value().as_slice(), &[0.5, 0.5]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let a = random(&mut rng, 6, 5);
    let run = || {
        let t = Tensor64::constant(a.clone());
        t.layer_norm_rows(1e-5).gelu().softmax_rows().value().clone()
    };
    let (x, y) = (run(), run());
    assert!(x.as_slice().iter().zip(y.as_slice()).all(|(p, q)| p.to_bits() == q.to_bits()));
    assert!(x.is_finite());
}

#[test]
fn shape_errors_are_explicit() {
    let a = Tensor64::constant(Matrix64::zeros(2, 3));
    let b = Tensor64::constant(Matrix64::zeros(2, 2));
    assert!(a.add(&b).is_err());
    assert!(a.matmul(&a).is_err());
    assert!(a.add_row(&b).is_err());
    assert!(Tensor64::constant(Matrix64::zeros(1, 2)).l2_normalize_rows().is_err());
}
