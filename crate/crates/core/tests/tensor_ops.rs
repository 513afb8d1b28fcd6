mod support;

use amyloid_synth::tensor::{Activation, Tape, Tensor};
use amyloid_synth::Error;
use support::*;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn conv2d_identity_kernel_reproduces_input() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
    let mut k = Tensor::zeros(&[1, 1, 3, 3]);
    k.data_mut()[4] = 1.0;
    let k = tape.constant(k);
    let b = tape.constant(Tensor::zeros(&[1]));
    let y = tape.conv2d(x, k, b, 1, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 3, 3]);
    assert_eq!(tape.value(y).data(), &[1.0; 9]);
}

#[test]
fn conv2d_small_cases_match_nested_loops() {
    let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let k = t(&[1, 1, 2, 2], &[1.0, 0.0, 0.0, 1.0]);
    assert_eq!(conv2d_oracle(&x, &k, &[0.0], 1, 0), vec![5.0]);
    let mut tape = Tape::new();
    let (xv, kv, bv) = (tape.constant(x), tape.constant(k), tape.constant(Tensor::zeros(&[1])));
    let y = tape.conv2d(xv, kv, bv, 1, 0).unwrap();
    assert_eq!(tape.value(y).data(), &[5.0]);

    let x = Tensor::full(&[1, 1, 4, 4], 1.0);
    let k = Tensor::full(&[1, 1, 2, 2], 1.0);
    assert_eq!(conv2d_oracle(&x, &k, &[0.0], 2, 0), vec![4.0; 4]);
    let mut tape = Tape::new();
    let (xv, kv, bv) = (tape.constant(x), tape.constant(k), tape.constant(Tensor::zeros(&[1])));
    let y = tape.conv2d(xv, kv, bv, 2, 0).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 1, 2, 2]);
    assert_eq!(tape.value(y).data(), &[4.0; 4]);
}

#[test]
fn conv2d_random_shapes_match_nested_loops() {
    let mut rng = seeded(11);
    for (n, cin, cout, h, w, kh, stride, pad) in
        [(2, 3, 4, 8, 6, 3, 1, 1), (1, 2, 5, 9, 9, 4, 2, 1), (3, 1, 2, 5, 7, 2, 3, 0), (1, 4, 1, 4, 4, 4, 1, 2)]
    {
        let x = random_tensor(&[n, cin, h, w], &mut rng);
        let k = random_tensor(&[cout, cin, kh, kh], &mut rng);
        let b = random_tensor(&[cout], &mut rng);
        let expect = conv2d_oracle(&x, &k, b.data(), stride, pad);
        let mut tape = Tape::new();
        let (xv, kv, bv) = (tape.constant(x), tape.constant(k), tape.constant(b.clone()));
        let y = tape.conv2d(xv, kv, bv, stride, pad).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_transpose2d_cases() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    let k = tape.constant(Tensor::full(&[2, 3, 4, 4], 0.7));
    let b = tape.constant(Tensor::zeros(&[3]));
    let y = tape.conv_transpose2d(x, k, b, 2, 1).unwrap();
    assert_eq!(tape.value(y).shape(), &[1, 3, 6, 6]);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));

    let y_in = t(&[1, 1, 1, 1], &[3.0]);
    let k = Tensor::full(&[1, 1, 2, 2], 1.0);
    assert_eq!(conv_transpose2d_oracle(&y_in, &k, &[0.0], 2, 0), vec![3.0; 4]);
    let mut tape = Tape::new();
    let (yv, kv, bv) = (tape.constant(y_in), tape.constant(k), tape.constant(Tensor::zeros(&[1])));
    let out = tape.conv_transpose2d(yv, kv, bv, 2, 0).unwrap();
    assert_eq!(tape.value(out).data(), &[3.0; 4]);

    let mut rng = seeded(5);
    for (n, cin, cout, h, kh, stride, pad) in [(2, 3, 2, 4, 4, 2, 1), (1, 2, 3, 3, 3, 1, 1), (1, 1, 1, 5, 2, 3, 0)] {
        let y_in = random_tensor(&[n, cin, h, h], &mut rng);
        let k = random_tensor(&[cin, cout, kh, kh], &mut rng);
        let b = random_tensor(&[cout], &mut rng);
        let expect = conv_transpose2d_oracle(&y_in, &k, b.data(), stride, pad);
        let mut tape = Tape::new();
        let (yv, kv, bv) = (tape.constant(y_in), tape.constant(k), tape.constant(b.clone()));
        let out = tape.conv_transpose2d(yv, kv, bv, stride, pad).unwrap();
        assert_eq!(tape.value(out).data().len(), expect.len());
        for (a, e) in tape.value(out).data().iter().zip(&expect) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    let mut rng = seeded(99);
    for _ in 0..20 {
        let x = random_tensor(&[1, 1, 4, 4], &mut rng);
        let y = random_tensor(&[1, 1, 3, 3], &mut rng);
        let k = random_tensor(&[1, 1, 2, 2], &mut rng);
        let zero = Tensor::zeros(&[1]);
        let ax = conv2d_oracle(&x, &k, &[0.0], 1, 0);
        let lhs: f64 = ax.iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let mut tape = Tape::new();
        let (yv, kv, bv) = (tape.constant(y), tape.constant(k), tape.constant(zero));
        let aty = tape.conv_transpose2d(yv, kv, bv, 1, 0).unwrap();
        let rhs: f64 = x.data().iter().zip(tape.value(aty).data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() <= 1e-12 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn convolution_errors() {
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]));
    let b = tape.constant(Tensor::zeros(&[1]));
    assert!(matches!(tape.conv2d(x, k, b, 1, 0), Err(Error::ShapeMismatch(_))));
    let k = tape.constant(Tensor::zeros(&[1, 2, 3, 3]));
    assert!(matches!(tape.conv2d(x, k, b, 0, 0), Err(Error::InvalidHyperparam(_))));
    assert!(matches!(tape.conv_transpose2d(x, k, b, 1, 0), Err(Error::ShapeMismatch(_))));
}

#[test]
fn activations_and_dropout() {
    let mut tape = Tape::new();
    let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
    let l = tape.activation(x, Activation::LeakyRelu(0.2)).unwrap();
    assert_eq!(tape.value(l).data(), &[-0.2, 0.0, 2.0]);
    let s = tape.activation(x, Activation::Sigmoid).unwrap();
    assert_eq!(tape.value(s).data()[1], 0.5);
    let th = tape.activation(x, Activation::Tanh).unwrap();
    assert_eq!(tape.value(th).data()[1], 0.0);
    assert!(tape.activation(x, Activation::LeakyRelu(1.5)).is_err());

    let d = tape.dropout(x, 0.0, true, 3).unwrap();
    assert_eq!(tape.value(d).data(), tape.value(x).data());
    let d = tape.dropout(x, 0.9, false, 3).unwrap();
    assert_eq!(tape.value(d).data(), tape.value(x).data());
    assert!(matches!(tape.dropout(x, 1.0, true, 3), Err(Error::InvalidHyperparam(_))));

    let ones = tape.constant(Tensor::full(&[10_000], 1.0));
    let d = tape.dropout(ones, 0.5, true, 17).unwrap();
    let mean = tape.value(d).data().iter().sum::<f64>() / 10_000.0;
    assert!((0.9..=1.1).contains(&mean), "dropout mean {mean}");
    let again = tape.dropout(ones, 0.5, true, 17).unwrap();
    assert_eq!(tape.value(d).data(), tape.value(again).data());
}

#[test]
fn backward_of_sum_of_squares() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, 2.0, 3.0]).with_requires_grad(true));
    let sq = tape.square(x);
    let loss = tape.sum(sq);
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
    assert!(matches!(tape.backward(loss), Err(Error::GraphConsumed)));
}

#[test]
fn backward_requires_scalar() {
    let mut tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]).with_requires_grad(true));
    let y = tape.square(x);
    assert!(matches!(tape.backward(y), Err(Error::NotScalar(_))));
}

#[test]
fn forward_ops_do_not_touch_inputs() {
    let mut rng = seeded(2);
    let x = random_tensor(&[2, 2, 4, 4], &mut rng);
    let k = random_tensor(&[3, 2, 3, 3], &mut rng);
    let mut tape = Tape::new();
    let (xv, kv, bv) = (tape.leaf(x.clone()), tape.leaf(k.clone()), tape.constant(Tensor::zeros(&[3])));
    let y = tape.conv2d(xv, kv, bv, 1, 1).unwrap();
    let a = tape.activation(y, Activation::Relu).unwrap();
    let _ = tape.dropout(a, 0.3, true, 1).unwrap();
    assert_eq!(tape.value(xv).data(), x.data());
    assert_eq!(tape.value(kv).data(), k.data());
}

#[test]
fn single_conv_mse_gradient_matches_finite_differences() {
    let mut rng = seeded(42);
    let x = random_tensor(&[2, 2, 5, 5], &mut rng);
    let k = random_tensor(&[3, 2, 3, 3], &mut rng);
    let b = random_tensor(&[3], &mut rng);
    let target = random_tensor(&[2, 3, 5, 5], &mut rng);
    let err = grad_check(
        &[x, k, b],
        |tape, v| {
            let y = tape.conv2d(v[0], v[1], v[2], 1, 1).unwrap();
            let tv = tape.constant(target.clone());
            let d = tape.sub(y, tv).unwrap();
            let sq = tape.square(d);
            tape.mean(sq)
        },
        None,
        &mut rng,
    );
    assert!(err < 1e-6, "max relative error {err:e}");
}
