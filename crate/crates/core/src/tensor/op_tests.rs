use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Entries bounded away from zero so ReLU-style kinks are not straddled.
fn rand_away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| {
        let m = rng.gen_range(0.1..1.0);
        if rng.gen_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn assert_checks(name: &str, f: impl Fn(&mut Tape, &[Var]) -> Var, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>) {
    for seed in 0..10 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let report = grad_check(&f, &inputs, 1e-5).unwrap();
        assert!(
            report.max_rel_error < 1e-4,
            "{name} seed {seed}: rel error {} at {:?}",
            report.max_rel_error,
            report.worst
        );
    }
}

#[test]
fn square_derivative() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::scalar(3.0), true);
    let y = tape.mul(x, x);
    let g = tape.backward(y);
    assert_eq!(g.wrt(x).unwrap().data(), &[6.0]);
}

#[test]
fn sum_tanh_wx_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let w = rand_tensor(&mut rng, &[3, 3]);
    let x = rand_tensor(&mut rng, &[3, 1]);
    let f = |w: &Tensor| w.matmul(&x).map(f64::tanh).sum();
    let mut tape = Tape::new();
    let wv = tape.leaf(w.clone(), true);
    let xv = tape.constant(x.clone());
    let y = tape.matmul(wv, xv);
    let y = tape.tanh(y);
    let loss = tape.sum(y);
    let g = tape.backward(loss);
    let analytic = g.wrt(wv).unwrap();
    let eps = 1e-5;
    for i in 0..9 {
        let mut p = w.clone();
        p.data_mut()[i] += eps;
        let mut m = w.clone();
        m.data_mut()[i] -= eps;
        let numeric = (f(&p) - f(&m)) / (2.0 * eps);
        let a = analytic.data()[i];
        assert!((a - numeric).abs() / (a.abs() + numeric.abs() + 1e-12) < 1e-6);
    }
}

#[test]
fn constant_input_gets_no_gradient() {
    let mut tape = Tape::new();
    let c = tape.constant(Tensor::scalar(2.0));
    let x = tape.leaf(Tensor::scalar(5.0), true);
    let y = tape.mul(c, x);
    let g = tape.backward(y);
    assert!(g.wrt(c).is_none());
    assert_eq!(g.wrt(x).unwrap().data(), &[2.0]);
}

#[test]
fn detached_parameter_is_absent_from_the_map() {
    let mut store = ParamStore::new();
    let used = store.add("used", Tensor::scalar(1.5));
    let unused = store.add("unused", Tensor::scalar(1.0));
    let mut tape = Tape::new();
    let u = tape.param(&store, used);
    let _ = tape.param(&store, unused);
    let y = tape.mul(u, u);
    let g = tape.backward(y);
    assert_eq!(g.param(used).unwrap().data(), &[3.0]);
    assert!(g.param(unused).is_none());
}

#[test]
fn fan_out_accumulates() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = rand_tensor(&mut rng, &[4]);
    let single = {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let t = tape.tanh(x);
        let s = tape.sum(t);
        tape.backward(s).wrt(x).unwrap().clone()
    };
    let double = {
        let mut tape = Tape::new();
        let x = tape.leaf(x0.clone(), true);
        let a = tape.tanh(x);
        let b = tape.tanh(x);
        let s = tape.add(a, b);
        let s = tape.sum(s);
        tape.backward(s).wrt(x).unwrap().clone()
    };
    for (s, d) in single.data().iter().zip(double.data()) {
        assert!((2.0 * s - d).abs() < 1e-15);
    }
    // a parameter recorded twice on one tape also sums its uses
    let mut store = ParamStore::new();
    let id = store.add("p", x0.clone());
    let mut tape = Tape::new();
    let p1 = tape.param(&store, id);
    let p2 = tape.param(&store, id);
    let a = tape.tanh(p1);
    let b = tape.tanh(p2);
    let s = tape.add(a, b);
    let s = tape.sum(s);
    let g = tape.backward(s);
    assert_eq!(g.param(id).unwrap().data(), double.data());
}

#[test]
#[should_panic(expected = "scalar loss")]
fn non_scalar_loss_is_rejected() {
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::zeros(&[2]), true);
    let y = tape.tanh(x);
    tape.backward(y);
}

#[test]
fn identity_has_negligible_error() {
    let r = grad_check(|_, v| v[0], &[Tensor::new(&[3], vec![0.3, -1.2, 2.0])], 1e-5).unwrap();
    assert!(r.max_rel_error < 1e-9, "{}", r.max_rel_error);
    assert_eq!(r.checked, 3);
}

#[test]
fn non_finite_gradient_is_reported_with_location() {
    // scaling by infinity makes both gradients non-finite
    let err = grad_check(|t, v| t.scale(v[0], f64::INFINITY), &[Tensor::scalar(1.0)], 1e-5).unwrap_err();
    assert!(matches!(err, GradCheckError::NonFinite { input: 0, index: 0, .. }));
}

#[test]
fn elementwise_ops_pass_grad_check() {
    assert_checks("add", |t, v| t.add(v[0], v[1]), |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])]);
    assert_checks("sub", |t, v| t.sub(v[0], v[1]), |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])]);
    assert_checks("mul", |t, v| t.mul(v[0], v[1]), |r| vec![rand_tensor(r, &[2, 3]), rand_tensor(r, &[2, 3])]);
    assert_checks("scale", |t, v| t.scale(v[0], -1.7), |r| vec![rand_tensor(r, &[5])]);
    assert_checks("tanh", |t, v| t.tanh(v[0]), |r| vec![rand_tensor(r, &[6])]);
    assert_checks("sigmoid", |t, v| t.sigmoid(v[0]), |r| vec![rand_tensor(r, &[6])]);
    assert_checks("relu", |t, v| t.relu(v[0]), |r| vec![rand_away_from_zero(r, &[6])]);
    assert_checks("abs", |t, v| t.abs(v[0]), |r| vec![rand_away_from_zero(r, &[6])]);
    assert_checks("clamp_min", |t, v| t.clamp_min(v[0], 0.0), |r| vec![rand_away_from_zero(r, &[6])]);
    assert_checks("sum", |t, v| t.sum(v[0]), |r| vec![rand_tensor(r, &[4])]);
    assert_checks("reshape", |t, v| t.reshape(v[0], &[3, 2]), |r| vec![rand_tensor(r, &[2, 3])]);
}

#[test]
fn matrix_ops_pass_grad_check() {
    assert_checks("matmul", |t, v| t.matmul(v[0], v[1]), |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4, 2])]);
    assert_checks("add_bias", |t, v| t.add_bias(v[0], v[1]), |r| vec![rand_tensor(r, &[3, 4]), rand_tensor(r, &[4])]);
    assert_checks("softmax_rows", |t, v| t.softmax_rows(v[0]), |r| vec![rand_tensor(r, &[3, 4])]);
    assert_checks("concat_cols", |t, v| t.concat_cols(v[0], v[1]), |r| vec![rand_tensor(r, &[3, 2]), rand_tensor(r, &[3, 4])]);
    assert_checks("node_mix", |t, v| t.node_mix(v[0], v[1], 3), |r| vec![rand_tensor(r, &[3, 3]), rand_tensor(r, &[6, 2])]);
    assert_checks("permute_frames", |t, v| t.permute_frames(v[0], 2, 3, 4), |r| vec![rand_tensor(r, &[2, 12])]);
    assert_checks("adaptive_avg_pool", |t, v| t.adaptive_avg_pool(v[0], 4), |r| vec![rand_tensor(r, &[2, 7])]);
    assert_checks("pad_rows", |t, v| t.pad_rows(v[0], 5, -1.0), |r| vec![rand_tensor(r, &[3, 2])]);
    assert_checks("trim_rows", |t, v| t.trim_rows(v[0], 2), |r| vec![rand_tensor(r, &[4, 2])]);
}

#[test]
fn temporal_ops_pass_grad_check() {
    assert_checks(
        "causal_conv k3 d2",
        |t, v| t.causal_conv(v[0], v[1], 2),
        |r| vec![rand_tensor(r, &[7, 2]), rand_tensor(r, &[3 * 2, 3])],
    );
    assert_checks(
        "causal_conv k2 d1",
        |t, v| t.causal_conv(v[0], v[1], 1),
        |r| vec![rand_tensor(r, &[5, 3]), rand_tensor(r, &[2 * 3, 2])],
    );
    assert_checks("max pool", |t, v| t.pool2(v[0], PoolKind::Max), |r| vec![rand_tensor(r, &[6, 3])]);
    assert_checks("avg pool", |t, v| t.pool2(v[0], PoolKind::Avg), |r| vec![rand_tensor(r, &[6, 3])]);
    assert_checks("upsample2", |t, v| t.upsample2(v[0]), |r| vec![rand_tensor(r, &[3, 2])]);
    assert_checks("norm_relu", |t, v| t.norm_relu(v[0], 1e-5), |r| vec![rand_away_from_zero(r, &[4, 5])]);
    assert_checks(
        "dropout",
        |t, v| {
            let mut rng = ChaCha8Rng::seed_from_u64(99);
            t.dropout(v[0], 0.3, &mut rng)
        },
        |r| vec![rand_tensor(r, &[4, 5])],
    );
    assert_checks(
        "lstm",
        |t, v| t.lstm(v[0], v[1]),
        |r| vec![rand_tensor(r, &[5, 12]), rand_tensor(r, &[3, 12])],
    );
    assert_checks(
        "softmax_xent",
        |t, v| t.softmax_xent(v[0], &[0, 2, 1, 3], &[true, true, false, true]),
        |r| vec![rand_tensor(r, &[4, 4])],
    );
}

#[test]
fn causal_conv_hand_example() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(&[3, 1], vec![1.0, 2.0, 3.0]));
    let k = tape.constant(Tensor::new(&[2, 1], vec![1.0, 1.0]));
    let y = tape.causal_conv(x, k, 1);
    assert_eq!(tape.value(y).data(), &[1.0, 3.0, 5.0]);
}

#[test]
fn forward_and_backward_are_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[6, 4]);
        let w = rand_tensor(&mut rng, &[3 * 4, 8]);
        let mut tape = Tape::new();
        let xv = tape.leaf(x, true);
        let wv = tape.leaf(w, true);
        let y = tape.causal_conv(xv, wv, 2);
        let y = tape.dropout(y, 0.3, &mut rng);
        let y = tape.tanh(y);
        let s = tape.sum(y);
        let g = tape.backward(s);
        (tape.value(y).clone(), g.wrt(wv).unwrap().clone(), g.wrt(xv).unwrap().clone())
    };
    let a = run();
    let b = run();
    assert_eq!(a.0.data(), b.0.data());
    assert_eq!(a.1.data(), b.1.data());
    assert_eq!(a.2.data(), b.2.data());
}
