use super::{AdamState, Tape, Tensor, Var};
use crate::error::Error;
use crate::gradcheck::{finite_diff, max_rel_error};
use crate::rng;

const FD_H: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;

/// Run `forward` on leaves built from `inputs`, compare tape gradients of
/// every input against central finite differences.
fn fd_check(inputs: &[Tensor], forward: impl Fn(&mut Tape, &[Var]) -> Var) -> f64 {
    let eval = |flat: &[f64]| -> f64 {
        let mut tape = Tape::new();
        let mut off = 0;
        let vars: Vec<Var> = inputs
            .iter()
            .map(|t| {
                let d = flat[off..off + t.numel()].to_vec();
                off += t.numel();
                tape.leaf(Tensor::new(t.shape().to_vec(), d).unwrap(), false)
            })
            .collect();
        let out = forward(&mut tape, &vars);
        tape.value(out).item()
    };
    let flat: Vec<f64> = inputs.iter().flat_map(|t| t.data().to_vec()).collect();
    let numeric = finite_diff(eval, &flat, FD_H);

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let loss = forward(&mut tape, &vars);
    tape.backward(loss).unwrap();
    let analytic: Vec<f64> = vars
        .iter()
        .flat_map(|&v| tape.grad(v).unwrap().data().to_vec())
        .collect();
    max_rel_error(&analytic, &numeric)
}

/// Scalarize an arbitrary output by a fixed random projection, so FD checks
/// exercise the full Jacobian and not just the sum of rows.
fn project(tape: &mut Tape, x: Var, seed: u64) -> Var {
    let mut r = rng::seeded(seed);
    let shape = tape.value(x).shape().to_vec();
    let w = tape.leaf(rng::normal_tensor(&mut r, shape), false);
    let p = tape.mul(x, w).unwrap();
    tape.sum(p).unwrap()
}

#[test]
fn matmul_identity_and_permutation() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::eye(2), false);
    let i2 = tape.matmul(a, a).unwrap();
    assert_eq!(tape.value(i2), &Tensor::eye(2));

    let m = tape.leaf(
        Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap(),
        false,
    );
    let p = tape.leaf(
        Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]).unwrap(),
        false,
    );
    let mp = tape.matmul(m, p).unwrap();
    assert_eq!(
        tape.value(mp).data(),
        &[2.0, 1.0, 4.0, 3.0],
        "column swap"
    );
}

#[test]
fn matmul_shape_mismatch_is_dimension_error() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::zeros(vec![2, 3]), false);
    let b = tape.leaf(Tensor::zeros(vec![2, 3]), false);
    assert!(matches!(tape.matmul(a, b), Err(Error::Dim(_))));
}

#[test]
fn matmul_gradients_match_finite_differences() {
    let mut r = rng::seeded(1);
    let a = rng::normal_tensor(&mut r, vec![3, 4]);
    let b = rng::normal_tensor(&mut r, vec![4, 5]);
    let err = fd_check(&[a, b], |t, v| {
        let m = t.matmul(v[0], v[1]).unwrap();
        project(t, m, 11)
    });
    assert!(err < 1e-5, "matmul fd error {err}");
}

#[test]
fn softmax_uniform_and_stability() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::new(vec![1, 3], vec![0.0; 3]).unwrap(), false);
    let y = tape.softmax_rows(x).unwrap();
    for v in tape.value(y).data() {
        assert!((v - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = tape.leaf(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap(), false);
    let y = tape.softmax_rows(big).unwrap();
    assert!(tape.value(y).is_finite());
    assert!(tape.value(y).data()[0] > 1.0 - 1e-12);
    assert!(tape.value(y).data()[1] < 1e-12);
}

#[test]
fn softmax_rows_sum_to_one_and_shift_invariant() {
    let mut r = rng::seeded(2);
    let x = rng::normal_tensor(&mut r, vec![4, 6]);
    let mut shifted = x.clone();
    for row in 0..4 {
        for j in 0..6 {
            shifted.data_mut()[row * 6 + j] += 3.7;
        }
    }
    let mut tape = Tape::new();
    let a = tape.leaf(x.clone(), false);
    let b = tape.leaf(shifted, false);
    let ya = tape.softmax_rows(a).unwrap();
    let yb = tape.softmax_rows(b).unwrap();
    for row in 0..4 {
        let s: f64 = tape.value(ya).data()[row * 6..(row + 1) * 6].iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
    for (va, vb) in tape.value(ya).data().iter().zip(tape.value(yb).data()) {
        assert!((va - vb).abs() < 1e-10);
    }
    let err = fd_check(&[x], |t, v| {
        let s = t.softmax_rows(v[0]).unwrap();
        project(t, s, 13)
    });
    assert!(err < FD_TOL, "softmax fd error {err}");
}

#[test]
fn sigmoid_midpoint_and_saturation() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![0.0, 40.0, -40.0]), false);
    let y = tape.sigmoid(x).unwrap();
    let d = tape.value(y).data();
    assert_eq!(d[0], 0.5);
    assert!((d[1] - 1.0).abs() < 1e-12 && d[1].is_finite());
    assert!(d[2] < 1e-12 && d[2].is_finite());
}

#[test]
fn cosine_identities() {
    let mut tape = Tape::new();
    let v = tape.leaf(Tensor::from_vec(vec![1.0, 2.0, -3.0]), false);
    let nv = tape.scale(v, -1.0).unwrap();
    let same = tape.cosine(v, v).unwrap();
    assert!((tape.value(same).item() - 1.0).abs() < 1e-15);
    let opp = tape.cosine(v, nv).unwrap();
    assert!((tape.value(opp).item() + 1.0).abs() < 1e-15);
    let e1 = tape.leaf(Tensor::from_vec(vec![1.0, 0.0]), false);
    let e2 = tape.leaf(Tensor::from_vec(vec![0.0, 1.0]), false);
    let orth = tape.cosine(e1, e2).unwrap();
    assert_eq!(tape.value(orth).item(), 0.0);
}

#[test]
fn cosine_zero_norm_is_degenerate() {
    let mut tape = Tape::new();
    let z = tape.leaf(Tensor::zeros(vec![3]), false);
    let v = tape.leaf(Tensor::from_vec(vec![1.0, 0.0, 0.0]), false);
    assert!(matches!(tape.cosine(z, v), Err(Error::DegenerateInput(_))));
}

#[test]
fn cosine_scale_invariance() {
    let mut r = rng::seeded(3);
    for _ in 0..20 {
        let a = rng::normal_tensor(&mut r, vec![8]);
        let b = rng::normal_tensor(&mut r, vec![8]);
        use rand::Rng;
        let (lam, mu) = (r.gen_range(0.01..50.0), r.gen_range(0.01..50.0));
        let mut tape = Tape::new();
        let (va, vb) = (tape.leaf(a, false), tape.leaf(b, false));
        let (sa, sb) = (tape.scale(va, lam).unwrap(), tape.scale(vb, mu).unwrap());
        let c1 = tape.cosine(va, vb).unwrap();
        let c2 = tape.cosine(sa, sb).unwrap();
        assert!((tape.value(c1).item() - tape.value(c2).item()).abs() < 1e-12);
    }
}

#[test]
fn mean_pool_and_concat_channels_and_layernorm() {
    let mut tape = Tape::new();
    let x = tape.leaf(
        Tensor::new(vec![2, 2], vec![1.0, 1.0, 3.0, 3.0]).unwrap(),
        false,
    );
    let m = tape.mean_pool_rows(x).unwrap();
    assert_eq!(tape.value(m).data(), &[2.0, 2.0]);

    let a = tape.leaf(Tensor::zeros(vec![4, 5, 2]), false);
    let b = tape.leaf(Tensor::full(vec![4, 5, 3], 1.0), false);
    let c = tape.concat_channels(a, b).unwrap();
    assert_eq!(tape.value(c).shape(), &[4, 5, 5]);

    let mut r = rng::seeded(4);
    let x = rng::normal_tensor(&mut r, vec![3, 16]);
    let lx = tape.leaf(x, false);
    let y = tape.layernorm_rows(lx).unwrap();
    for row in 0..3 {
        let d = &tape.value(y).data()[row * 16..(row + 1) * 16];
        let mean = d.iter().sum::<f64>() / 16.0;
        let var = d.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert!(mean.abs() < 1e-12, "row mean {mean}");
        assert!((var - 1.0).abs() < 1e-9, "row variance {var}");
    }
}

#[test]
fn backward_of_sum_is_ones() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, -2.0, 5.0]), true);
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn backward_rejects_non_scalar_loss_and_double_call() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    assert!(matches!(tape.backward(x), Err(Error::Contract(_))));

    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
    let s = tape.sum(x).unwrap();
    tape.backward(s).unwrap();
    assert!(matches!(tape.backward(s), Err(Error::Contract(_))));
}

#[test]
fn cosine_grad_matches_finite_differences() {
    let mut r = rng::seeded(5);
    let x = rng::normal_tensor(&mut r, vec![6]);
    let c = rng::normal_tensor(&mut r, vec![6]);
    let err = fd_check(&[x], |t, v| {
        let cv = t.leaf(c.clone(), false);
        t.cosine(v[0], cv).unwrap()
    });
    assert!(err < FD_TOL, "cosine fd error {err}");
}

#[test]
fn every_kernel_passes_gradient_checks() {
    let mut r = rng::seeded(6);
    for trial in 0..20u64 {
        let a = rng::normal_tensor(&mut r, vec![3, 4]);
        let b = rng::normal_tensor(&mut r, vec![3, 4]);
        let err = fd_check(&[a.clone(), b.clone()], |t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            let d = t.sub(s, v[1]).unwrap();
            let m = t.mul(d, v[1]).unwrap();
            let sc = t.scale(m, 0.7).unwrap();
            project(t, sc, trial)
        });
        assert!(err < FD_TOL, "elementwise fd error {err}");

        let err = fd_check(std::slice::from_ref(&a), |t, v| {
            let tr = t.transpose(v[0]).unwrap();
            let rs = t.reshape(tr, vec![2, 6]).unwrap();
            let sm = t.sigmoid(rs).unwrap();
            let ge = t.gelu(sm).unwrap();
            let ln = t.layernorm_rows(ge).unwrap();
            project(t, ln, trial ^ 1)
        });
        assert!(err < FD_TOL, "unary-chain fd error {err}");

        let err = fd_check(std::slice::from_ref(&a), |t, v| {
            let n = t.l2_normalize_rows(v[0]).unwrap();
            let p = t.mean_pool_rows(n).unwrap();
            project(t, p, trial ^ 2)
        });
        assert!(err < FD_TOL, "normalize/pool fd error {err}");

        let x3 = rng::normal_tensor(&mut r, vec![4, 4, 2]);
        let w = rng::normal_tensor(&mut r, vec![3, 2, 3, 3]);
        let bias = rng::normal_tensor(&mut r, vec![3]);
        let ch = rng::normal_tensor(&mut r, vec![3]);
        let sp = rng::normal_tensor(&mut r, vec![4, 4]);
        let err = fd_check(&[x3, w, bias, ch, sp], |t, v| {
            let c = t.conv2d(v[0], v[1], v[2]).unwrap();
            let mc = t.mul_channels(c, v[3]).unwrap();
            let ac = t.add_channels(mc, v[3]).unwrap();
            let ms = t.mul_spatial(ac, v[4]).unwrap();
            project(t, ms, trial ^ 3)
        });
        assert!(err < FD_TOL, "conv-chain fd error {err}");

        let g = rng::normal_tensor(&mut r, vec![2, 3]);
        let err = fd_check(&[g], |t, v| {
            let u = t.upsample_nearest(v[0], 2).unwrap();
            project(t, u, trial ^ 4)
        });
        assert!(err < FD_TOL, "upsample fd error {err}");

        let q = rng::normal_tensor(&mut r, vec![3, 5]);
        let km = vec![false, true, false, false, true];
        let err = fd_check(&[q], |t, v| {
            let s = t.softmax_rows_masked(v[0], Some(&km)).unwrap();
            project(t, s, trial ^ 5)
        });
        assert!(err < FD_TOL, "masked-softmax fd error {err}");

        let tbl = rng::normal_tensor(&mut r, vec![7, 4]);
        let err = fd_check(&[tbl], |t, v| {
            let e = t.embedding(v[0], &[2, 2, 5, 0]).unwrap();
            project(t, e, trial ^ 6)
        });
        assert!(err < FD_TOL, "embedding fd error {err}");

        let lg = rng::normal_tensor(&mut r, vec![4, 4]);
        let err = fd_check(&[lg], |t, v| t.xent_diag(v[0]).unwrap());
        assert!(err < FD_TOL, "xent_diag fd error {err}");

        let sv = rng::normal_tensor(&mut r, vec![1]);
        let xx = rng::normal_tensor(&mut r, vec![2, 3]);
        let err = fd_check(&[xx, sv], |t, v| {
            let e = t.exp(v[1]).unwrap();
            let s = t.scale_var(v[0], e).unwrap();
            project(t, s, trial ^ 7)
        });
        assert!(err < FD_TOL, "scale_var/exp fd error {err}");

        let img = rng::normal_tensor(&mut r, vec![4, 6, 2]);
        let err = fd_check(&[img], |t, v| {
            let p = t.patchify(v[0], 2).unwrap();
            project(t, p, trial ^ 8)
        });
        assert!(err < FD_TOL, "patchify fd error {err}");

        let u = rng::normal_tensor(&mut r, vec![2, 5]);
        let w2 = rng::normal_tensor(&mut r, vec![2, 5]);
        let row = rng::normal_tensor(&mut r, vec![5]);
        let err = fd_check(&[u, w2, row], |t, v| {
            let cr = t.concat_rows(v[0], v[1]).unwrap();
            let ar = t.add_row(cr, v[2]).unwrap();
            let sl = t.slice_rows(ar, 1, 3).unwrap();
            let ms = t.mse(sl, v[1]).unwrap();
            t.scale(ms, 3.0).unwrap()
        });
        assert!(err < FD_TOL, "rows-chain fd error {err}");
    }
}

#[test]
fn patchify_layout_matches_manual_extraction() {
    // 4x4 single-channel, 2x2 patches: patch 0 is the top-left block
    let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
    let img = Tensor::new(vec![4, 4, 1], data).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(img, false);
    let p = tape.patchify(v, 2).unwrap();
    assert_eq!(tape.value(p).shape(), &[4, 4]);
    assert_eq!(
        tape.value(p).data()[0..4],
        [0.0, 1.0, 4.0, 5.0],
        "top-left patch"
    );
    assert_eq!(
        tape.value(p).data()[12..16],
        [10.0, 11.0, 14.0, 15.0],
        "bottom-right patch"
    );
}

#[test]
fn backward_is_deterministic_across_replays() {
    let mut r = rng::seeded(7);
    let x = rng::normal_tensor(&mut r, vec![4, 4]);
    let run = || {
        let mut tape = Tape::new();
        let v = tape.leaf(x.clone(), true);
        let s = tape.softmax_rows(v).unwrap();
        let l = tape.layernorm_rows(s).unwrap();
        let loss = tape.sum(l).unwrap();
        tape.backward(loss).unwrap();
        tape.grad(v).unwrap()
    };
    assert_eq!(run(), run());
}

#[test]
fn nonfinite_forward_is_an_error() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::from_vec(vec![1e308]), false);
    // 2 * 1e308 overflows to +inf, which every kernel must reject
    assert!(matches!(tape.scale(x, 2.0), Err(Error::NonFinite(_))));
}

// ---- Adam ----

#[test]
fn adam_zero_grads_leave_params_nearly_unchanged() {
    let mut p = Tensor::from_vec(vec![1.0, -2.0, 3.0]);
    let before = p.clone();
    let mut adam = AdamState::for_params(1e-3, &[&p]);
    let g = Tensor::zeros(vec![3]);
    for _ in 0..10 {
        adam.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
    }
    for (a, b) in p.data().iter().zip(before.data()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn adam_first_step_magnitude_is_learning_rate() {
    // with zeroed state, mhat = g, vhat = g^2, so the update is
    // lr * g / (|g| + eps) = lr * sign(g) up to eps
    let mut p = Tensor::from_vec(vec![0.0, 0.0]);
    let g = Tensor::from_vec(vec![0.3, -4.0]);
    let mut adam = AdamState::for_params(1e-3, &[&p]);
    adam.step(&mut [&mut p], std::slice::from_ref(&g)).unwrap();
    assert!((p.data()[0] + 1e-3).abs() < 1e-8);
    assert!((p.data()[1] - 1e-3).abs() < 1e-8);
    assert_eq!(adam.step_count(), 1);
}

#[test]
fn adam_minimizes_quadratic_bowl() {
    let mut x = Tensor::from_vec(vec![2.0, -1.5, 0.8, 3.0]);
    let mut adam = AdamState::for_params(1e-2, &[&x]);
    for _ in 0..2000 {
        let g = Tensor::from_vec(x.data().iter().map(|v| 2.0 * v).collect());
        adam.step(&mut [&mut x], std::slice::from_ref(&g)).unwrap();
    }
    assert!(x.l2_norm() < 1e-3, "|x| = {}", x.l2_norm());
}

#[test]
fn adam_shape_mismatch_is_dimension_error() {
    let mut p = Tensor::zeros(vec![2]);
    let g = Tensor::zeros(vec![3]);
    let mut adam = AdamState::for_params(1e-3, &[&p]);
    assert!(matches!(
        adam.step(&mut [&mut p], std::slice::from_ref(&g)),
        Err(Error::Dim(_))
    ));
}
