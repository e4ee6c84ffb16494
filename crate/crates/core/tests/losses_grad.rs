//! Loss values against per-pair closed forms and gradients against central
//! differences.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vcolbert::losses::{
    combined_sigmoid_loss, dual_sigmoid_loss, infonce_loss, sigmoid_loss, LossParams, PairLabels,
};
use vcolbert::tensor::{finite_diff_grad, relative_error};
use vcolbert::{Matrix64, Result, Tensor64};

fn random_sim(rng: &mut ChaCha8Rng, b: usize) -> Matrix64 {
    Matrix64::from_fn(b, b, |_, _| rng.gen_range(-1.0..1.0))
}

/// Independent per-pair oracle: (1/B) Σ ln(1 + exp(z(−tS+b))) evaluated in
/// the overflow-safe form.
fn sigmoid_oracle(s: &Matrix64, z: &Matrix64, t: f64, b: f64) -> f64 {
    let n = s.rows() as f64;
    let mut total = 0.0;
    for i in 0..s.rows() {
        for j in 0..s.cols() {
            let x = z.get(i, j) * (-t * s.get(i, j) + b);
            total += if x > 0.0 { x + (-x).exp().ln_1p() } else { x.exp().ln_1p() };
        }
    }
    total / n
}

type LossFn<'a> = dyn Fn(&Tensor64, &Tensor64, &Tensor64, &Tensor64) -> Result<Tensor64> + 'a;

/// Gradient of `loss(sf, sv, t, b)` w.r.t. every input versus finite
/// differences.
fn check(name: &str, loss: &LossFn<'_>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sf0 = random_sim(&mut rng, 4);
    let sv0 = random_sim(&mut rng, 4);
    let t0 = Matrix64::scalar(rng.gen_range(1.0..5.0));
    let b0 = Matrix64::scalar(rng.gen_range(-3.0..1.0));

    let (sf, sv) = (Tensor64::parameter(sf0.clone()), Tensor64::parameter(sv0.clone()));
    let (t, b) = (Tensor64::parameter(t0.clone()), Tensor64::parameter(b0.clone()));
    loss(&sf, &sv, &t, &b).unwrap().backward().unwrap();

    let c = Tensor64::constant;
    let inputs = [&sf0, &sv0, &t0, &b0];
    let analytic = [&sf, &sv, &t, &b].map(|x| x.grad().unwrap_or_else(|| Matrix64::zeros(x.shape().0, x.shape().1)));
    for (k, x0) in inputs.iter().enumerate() {
        let fd = finite_diff_grad(
            |m| {
                let mut args = inputs.map(|x| c((*x).clone()));
                args[k] = c(m.clone());
                loss(&args[0], &args[1], &args[2], &args[3])?.item()
            },
            x0,
            1e-5,
        )
        .unwrap();
        let err = relative_error(&analytic[k], &fd, 1e-10);
        assert!(err < 1e-4, "{name}: input {k} relative error {err:e}");
    }
}

fn params(t: &Tensor64, b: &Tensor64) -> LossParams<f64> {
    let mut p = LossParams::new(1.0, 0.0, 1.0, 1.0).unwrap();
    p.t = t.clone();
    p.b = b.clone();
    p
}

#[test]
fn gradients_match_finite_differences() {
    let z = PairLabels::diagonal(4);
    for seed in 0..5 {
        check("sigmoid", &|sf, _, t, b| sigmoid_loss(sf, &z, &params(t, b)), seed);
        check("dual", &|sf, sv, t, b| dual_sigmoid_loss(sf, sv, &z, &params(t, b)), seed);
        check(
            "dual weighted",
            &|sf, sv, t, b| {
                let mut p = params(t, b);
                p.lambda_f = 0.3;
                p.lambda_v = 1.7;
                dual_sigmoid_loss(sf, sv, &z, &p)
            },
            seed,
        );
        check("combined", &|sf, sv, t, b| combined_sigmoid_loss(sf, sv, &z, &params(t, b)), seed);
        check("infonce", &|sf, _, t, _| infonce_loss(sf, t), seed);
    }
}

#[test]
fn paper_default_closed_forms() {
    let p = LossParams::<f64>::default();
    let zero = Tensor64::constant(Matrix64::zeros(1, 1));
    let pos = sigmoid_loss(&zero, &PairLabels::diagonal(1), &p).unwrap().item().unwrap();
    let neg_z = PairLabels::new(Matrix64::from_rows(&[[-1.0]]).unwrap()).unwrap();
    let neg = sigmoid_loss(&zero, &neg_z, &p).unwrap().item().unwrap();
    assert!((pos - (1.0 + (-12.93f64).exp()).ln()).abs() < 1e-6);
    assert!((neg - (1.0 + 12.93f64.exp()).ln()).abs() < 1e-6);
}

#[test]
fn dual_reduces_to_its_terms() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let sf = Tensor64::constant(random_sim(&mut rng, 5));
    let sv = Tensor64::constant(random_sim(&mut rng, 5));
    let z = PairLabels::diagonal(5);
    let p = LossParams::<f64>::default();
    let lf = sigmoid_loss(&sf, &z, &p).unwrap().item().unwrap();
    let lv = sigmoid_loss(&sv, &z, &p).unwrap().item().unwrap();
    let dual = dual_sigmoid_loss(&sf, &sv, &z, &p).unwrap().item().unwrap();
    assert!((dual - (lf + lv)).abs() < 1e-12);

    let mut only_f = LossParams::<f64>::default();
    only_f.lambda_f = 0.7;
    only_f.lambda_v = 0.0;
    let d = dual_sigmoid_loss(&sf, &sv, &z, &only_f).unwrap().item().unwrap();
    assert!((d - 0.7 * lf).abs() < 1e-12);

    let zeros = Tensor64::constant(Matrix64::zeros(5, 5));
    let c = combined_sigmoid_loss(&sf, &zeros, &z, &p).unwrap().item().unwrap();
    assert!((c - lf).abs() < 1e-12);

    // Per-level scales default to the shared values.
    let per = LossParams::<f64>::default().with_per_level_scales();
    let d2 = dual_sigmoid_loss(&sf, &sv, &z, &per).unwrap().item().unwrap();
    assert!((d2 - dual).abs() < 1e-12);
}

#[test]
fn combined_differs_from_dual() {
    // t = 1, b = 0 keeps the softplus arguments in its curved region.
    let p = LossParams::new(1.0, 0.0, 1.0, 1.0).unwrap();
    let z = PairLabels::diagonal(2);
    let sf = Tensor64::constant(Matrix64::from_rows(&[[1.0, -1.0], [0.5, 0.2]]).unwrap());
    let sv = Tensor64::constant(Matrix64::from_rows(&[[-0.8, 0.9], [0.1, 1.0]]).unwrap());
    let dual = dual_sigmoid_loss(&sf, &sv, &z, &p).unwrap().item().unwrap();
    let comb = combined_sigmoid_loss(&sf, &sv, &z, &p).unwrap().item().unwrap();
    assert!((dual - comb).abs() > 0.01, "dual {dual} combined {comb}");
}

#[test]
fn large_logits_stay_finite_and_exact() {
    let z = PairLabels::diagonal(2);
    let p = LossParams::new(40.0, 5.0, 1.0, 1.0).unwrap();
    let s = Matrix64::from_rows(&[[-1.0, 1.0], [1.0, -1.0]]).unwrap();
    // |z(−tS+b)| reaches 45 on every entry.
    let got = sigmoid_loss(&Tensor64::constant(s.clone()), &z, &p).unwrap().item().unwrap();
    let want = sigmoid_oracle(&s, z.matrix(), 40.0, 5.0);
    assert!(got.is_finite());
    assert!((got - want).abs() < 1e-9);

    let t = Tensor64::scalar(500.0, false);
    let l = infonce_loss(&Tensor64::constant(s), &t).unwrap().item().unwrap();
    assert!(l.is_finite());
}

fn permuted(m: &Matrix64, perm: &[usize]) -> Matrix64 {
    Matrix64::from_fn(m.rows(), m.cols(), |i, j| m.get(perm[i], perm[j]))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn sigmoid_loss_decomposes_per_pair(seed in any::<u64>(), b in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sim(&mut rng, b);
        let z = Matrix64::from_fn(b, b, |_, _| if rng.gen_bool(0.4) { 1.0 } else { -1.0 });
        let (t, bias) = (rng.gen_range(0.5..6.0), rng.gen_range(-13.0..2.0));
        let p = LossParams::new(t, bias, 1.0, 1.0).unwrap();
        let labels = PairLabels::new(z.clone()).unwrap();
        let got = sigmoid_loss(&Tensor64::constant(s.clone()), &labels, &p).unwrap().item().unwrap();
        prop_assert!((got - sigmoid_oracle(&s, &z, t, bias)).abs() < 1e-9);
    }

    #[test]
    fn losses_are_permutation_equivariant(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = 5;
        let sf = random_sim(&mut rng, b);
        let sv = random_sim(&mut rng, b);
        let mut perm: Vec<usize> = (0..b).collect();
        for i in (1..b).rev() { perm.swap(i, rng.gen_range(0..=i)); }
        let z = PairLabels::diagonal(b);
        let p = LossParams::<f64>::default();
        let c = Tensor64::constant;
        let eval = |f: &Matrix64, v: &Matrix64| -> [f64; 3] {
            [
                dual_sigmoid_loss(&c(f.clone()), &c(v.clone()), &z, &p).unwrap().item().unwrap(),
                combined_sigmoid_loss(&c(f.clone()), &c(v.clone()), &z, &p).unwrap().item().unwrap(),
                infonce_loss(&c(f.clone()), &p.t).unwrap().item().unwrap(),
            ]
        };
        let a = eval(&sf, &sv);
        let bb = eval(&permuted(&sf, &perm), &permuted(&sv, &perm));
        for k in 0..3 {
            prop_assert!((a[k] - bb[k]).abs() < 1e-10);
        }
    }

    #[test]
    fn sigmoid_loss_is_monotone_in_pair_similarity(seed in any::<u64>(), i in 0usize..4, j in 0usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = random_sim(&mut rng, 4);
        let z = PairLabels::diagonal(4);
        let p = LossParams::new(4.77, -2.0, 1.0, 1.0).unwrap();
        let base = sigmoid_loss(&Tensor64::constant(s.clone()), &z, &p).unwrap().item().unwrap();
        let mut up = s.clone();
        up.set(i, j, s.get(i, j) + 0.1);
        let moved = sigmoid_loss(&Tensor64::constant(up), &z, &p).unwrap().item().unwrap();
        if i == j { prop_assert!(moved < base); } else { prop_assert!(moved > base); }
    }
}
