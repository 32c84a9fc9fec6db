use super::*;
use crate::gradcheck::grad_check;
use proptest::prelude::*;

fn t(shape: [usize; 5], data: &[f64]) -> Tensor5<f64> {
    Tensor5::from_vec(Shape(shape), data.to_vec()).unwrap()
}

fn rand(shape: [usize; 5], seed: u64) -> Tensor5<f64> {
    Tensor5::random_uniform(Shape(shape), -1.0, 1.0, seed)
}

/// Six-nested-loop cross-correlation with zero padding.
fn naive_conv(x: &Tensor5<f64>, w: &Tensor5<f64>, b: Option<&[f64]>) -> Tensor5<f64> {
    let xs = x.shape();
    let ws = w.shape();
    let (kd_n, kh_n, kw_n) = (ws.d() as isize, ws.h() as isize, ws.w() as isize);
    Tensor5::from_fn(xs.with_channels(ws.n()), |[n, co, d, h, wi]| {
        let mut acc = b.map_or(0.0, |b| b[co]);
        for ci in 0..xs.c() {
            for kd in 0..kd_n {
                for kh in 0..kh_n {
                    for kw in 0..kw_n {
                        let (sd, sh, sw) = (
                            d as isize + kd - kd_n / 2,
                            h as isize + kh - kh_n / 2,
                            wi as isize + kw - kw_n / 2,
                        );
                        if sd < 0
                            || sh < 0
                            || sw < 0
                            || sd >= xs.d() as isize
                            || sh >= xs.h() as isize
                            || sw >= xs.w() as isize
                        {
                            continue;
                        }
                        acc += w.at([co, ci, kd as usize, kh as usize, kw as usize])
                            * x.at([n, ci, sd as usize, sh as usize, sw as usize]);
                    }
                }
            }
        }
        acc
    })
}

fn max_abs_diff(a: &Tensor5<f64>, b: &Tensor5<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn conv_of(x: &Tensor5<f64>, w: &Tensor5<f64>, b: Option<&Tensor5<f64>>) -> Tensor5<f64> {
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.constant(w.clone());
    let bv = b.map(|b| tape.constant(b.clone()));
    let y = tape.conv3d(xv, wv, bv).unwrap();
    let out = tape.value(y).clone();
    out
}

#[test]
fn conv3d_sliding_window_example() {
    let x = t([1, 1, 1, 1, 3], &[1.0, 2.0, 3.0]);
    let w = t([1, 1, 1, 1, 3], &[1.0, 1.0, 1.0]);
    let b = t([1, 1, 1, 1, 1], &[0.0]);
    let y = conv_of(&x, &w, Some(&b));
    assert_eq!(y.data(), &[3.0, 6.0, 5.0]);
}

#[test]
fn conv3d_delta_kernel_is_identity() {
    let x = rand([2, 1, 4, 5, 3], 3);
    let mut w = Tensor5::zeros(Shape([1, 1, 3, 3, 3]));
    w.set([0, 0, 1, 1, 1], 1.0);
    assert_eq!(conv_of(&x, &w, None), x);
}

#[test]
fn conv3d_matches_naive_loop_on_random_cube() {
    let x = rand([1, 1, 2, 2, 2], 11);
    let w = rand([1, 1, 3, 3, 3], 12);
    let b = rand([1, 1, 1, 1, 1], 13);
    let fast = conv_of(&x, &w, Some(&b));
    let slow = naive_conv(&x, &w, Some(b.data()));
    assert!(max_abs_diff(&fast, &slow) < 1e-12);
}

#[test]
fn conv3d_rejects_even_kernel_and_channel_mismatch() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(rand([1, 2, 3, 3, 3], 1));
    let even = tape.constant(rand([1, 2, 2, 2, 2], 2));
    assert!(matches!(
        tape.conv3d(x, even, None),
        Err(Error::InvalidArgument(_))
    ));
    let wrong_cin = tape.constant(rand([1, 3, 3, 3, 3], 3));
    assert!(matches!(
        tape.conv3d(x, wrong_cin, None),
        Err(Error::Shape { .. })
    ));
}

#[test]
fn conv3d_handles_large_kernels_and_pointwise() {
    for k in [1usize, 5, 7] {
        let x = rand([1, 2, 4, 3, 5], 40 + k as u64);
        let w = rand([3, 2, k, k, k], 50 + k as u64);
        let fast = conv_of(&x, &w, None);
        let slow = naive_conv(&x, &w, None);
        assert!(max_abs_diff(&fast, &slow) < 1e-12, "k={k}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv3d_equals_naive_oracle(
        n in 1usize..=2, cin in 1usize..=2, cout in 1usize..=2,
        d in 1usize..=4, h in 1usize..=4, w in 1usize..=4,
        k in prop::sample::select(vec![1usize, 3]), seed in any::<u64>(),
    ) {
        let x = rand([n, cin, d, h, w], seed);
        let wt = rand([cout, cin, k, k, k], seed ^ 0x5555);
        let b = rand([cout, 1, 1, 1, 1], seed ^ 0xaaaa);
        let fast = conv_of(&x, &wt, Some(&b));
        let slow = naive_conv(&x, &wt, Some(b.data()));
        prop_assert!(max_abs_diff(&fast, &slow) < 1e-12);
    }

    #[test]
    fn conv3d_is_linear_without_bias(a in -3.0f64..3.0, seed in any::<u64>()) {
        let x = rand([1, 2, 3, 4, 3], seed);
        let w = rand([2, 2, 3, 3, 3], seed.wrapping_add(1));
        let lhs = conv_of(&x.map(|v| a * v), &w, None);
        let rhs = conv_of(&x, &w, None).map(|v| a * v);
        prop_assert!(max_abs_diff(&lhs, &rhs) < 1e-12);
    }

    #[test]
    fn maxpool_bounded_by_window_max_and_mean(seed in any::<u64>()) {
        let x = rand([1, 2, 4, 5, 4], seed);
        let tape = Tape::new();
        let xv = tape.constant(x.clone());
        let y = tape.maxpool3d(xv).unwrap();
        let out = tape.value(y).clone();
        let s = out.shape();
        for c in 0..s.c() { for d in 0..s.d() { for h in 0..s.h() { for w in 0..s.w() {
            let mut win = vec![];
            for kd in 0..2 { for kh in 0..2 { for kw in 0..2 {
                win.push(x.at([0, c, 2*d+kd, 2*h+kh, 2*w+kw]));
            }}}
            let mx = win.iter().copied().fold(f64::MIN, f64::max);
            let mean = win.iter().sum::<f64>() / 8.0;
            let v = out.at([0, c, d, h, w]);
            prop_assert!(v <= mx && v >= mean);
            prop_assert_eq!(v, mx);
        }}}}
    }
}

#[test]
fn relu_examples_and_zero_gradient_on_negatives() {
    let tape = Tape::new();
    let x = tape.variable(t([1, 1, 1, 1, 3], &[-1.0, 0.0, 2.0]));
    let y = tape.relu(x);
    assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);

    let tape = Tape::new();
    let x = tape.variable(t([1, 1, 1, 1, 3], &[-1.0, -0.5, -2.0]));
    let y = tape.relu(x);
    assert!(tape.value(y).data().iter().all(|&v| v == 0.0));
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    assert!(g.wrt(x).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn relu_gradient_matches_finite_differences() {
    let p = t([1, 1, 1, 1, 2], &[-0.5, 0.5]);
    let err = grad_check(|tp, x| tp.sum(tp.relu(x)), &p, 1e-5).unwrap();
    assert!(err < 1e-6, "{err}");
}

fn prelu_eval(x: &[f64], slope: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let tape = Tape::new();
    let xv = tape.constant(t([1, slope.len(), 1, 1, x.len() / slope.len()], x));
    let sv = tape.variable(t([1, slope.len(), 1, 1, 1], slope));
    let y = tape.prelu(xv, sv).unwrap();
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    let out = tape.value(y).data().to_vec();
    (out, g.wrt(sv).unwrap().data().to_vec())
}

#[test]
fn prelu_degenerate_slopes_and_hand_example() {
    let x = [-1.5, 0.0, 2.0, -0.25];
    assert_eq!(prelu_eval(&x, &[0.0]).0, vec![0.0, 0.0, 2.0, 0.0]);
    assert_eq!(prelu_eval(&x, &[1.0]).0, x.to_vec());
    let (y, ds) = prelu_eval(&[-2.0], &[0.25]);
    assert_eq!(y, vec![-0.5]);
    assert_eq!(ds, vec![-2.0]);
}

#[test]
fn prelu_rejects_wrong_slope_count() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(rand([1, 3, 2, 2, 2], 1));
    let s = tape.constant(rand([1, 2, 1, 1, 1], 2));
    assert!(tape.prelu(x, s).is_err());
}

fn bn_train(x: &Tensor5<f64>, gamma: f64, beta: f64) -> Tensor5<f64> {
    let c = x.shape().c();
    let tape = Tape::new();
    let xv = tape.constant(x.clone());
    let g = tape.constant(Tensor5::full(Shape([1, c, 1, 1, 1]), gamma));
    let b = tape.constant(Tensor5::full(Shape([1, c, 1, 1, 1]), beta));
    let (y, _) = tape.batchnorm_train(xv, g, b, 1e-5).unwrap();
    let out = tape.value(y).clone();
    out
}

#[test]
fn batchnorm_standardized_batch_is_a_fixed_point() {
    let x = t([2, 1, 1, 1, 2], &[1.0, -1.0, 1.0, -1.0]);
    let y = bn_train(&x, 1.0, 0.0);
    let scale = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (a, b) in y.data().iter().zip(x.data()) {
        assert!((a - b * scale).abs() < 1e-12);
    }
}

#[test]
fn batchnorm_constant_channel_maps_to_beta() {
    let x = Tensor5::full(Shape([2, 2, 2, 2, 2]), 0.7);
    let y = bn_train(&x, 1.3, 0.4);
    assert!(y.data().iter().all(|&v| (v - 0.4).abs() < 1e-12));
}

#[test]
fn batchnorm_train_moments() {
    let x = rand([2, 2, 2, 2, 2], 77).map(|v| 3.0 * v + 1.0);
    let y = bn_train(&x, 1.0, 0.0);
    let s = y.shape();
    for c in 0..s.c() {
        let mut vals = vec![];
        for n in 0..s.n() {
            for i in 0..s.spatial() {
                vals.push(y.data()[(n * s.c() + c) * s.spatial() + i]);
            }
        }
        let m = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64;
        assert!(m.abs() < 1e-10);
        assert!((var - 1.0).abs() < 1e-5 + 1e-6, "var {var}");
    }
}

#[test]
fn gaussian_filter_preserves_constants_in_the_interior() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor5::full(Shape([1, 1, 13, 13, 13]), 2.5));
    let y = tape.gaussian_filter3d(x, 1.5, 3).unwrap();
    assert!((tape.value(y).at([0, 0, 6, 6, 6]) - 2.5).abs() < 1e-12);
}

#[test]
fn gaussian_filter_impulse_response_is_outer_product() {
    let r = 2;
    let taps = crate::ops::filter::gaussian_kernel(1.0, r).unwrap();
    let n = 2 * r + 1;
    let mut x = Tensor5::zeros(Shape([1, 1, n, n, n]));
    x.set([0, 0, r, r, r], 1.0);
    let tape = Tape::new();
    let xv = tape.constant(x);
    let y = tape.gaussian_filter3d(xv, 1.0, r).unwrap();
    let out = tape.value(y);
    for d in 0..n {
        for h in 0..n {
            for w in 0..n {
                let expect = taps[d] * taps[h] * taps[w];
                assert!((out.at([0, 0, d, h, w]) - expect).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn gaussian_filter_is_linear_and_rejects_bad_sigma() {
    let (a, b) = (0.7, -1.9);
    let x = rand([1, 1, 5, 6, 4], 5);
    let y = rand([1, 1, 5, 6, 4], 6);
    let tape = Tape::new();
    let combo = x
        .data()
        .iter()
        .zip(y.data())
        .map(|(p, q)| a * p + b * q)
        .collect();
    let lhs = tape.constant(Tensor5::from_vec(x.shape(), combo).unwrap());
    let fl = tape.gaussian_filter3d(lhs, 1.5, 2).unwrap();
    let xv = tape.constant(x);
    let yv = tape.constant(y);
    let fx = tape.gaussian_filter3d(xv, 1.5, 2).unwrap();
    let fy = tape.gaussian_filter3d(yv, 1.5, 2).unwrap();
    let (fl, fx, fy) = (tape.value(fl), tape.value(fx), tape.value(fy));
    for i in 0..fl.len() {
        assert!((fl.data()[i] - (a * fx.data()[i] + b * fy.data()[i])).abs() < 1e-12);
    }
    drop((fl, fx, fy));
    assert!(tape.gaussian_filter3d(xv, 0.0, 2).is_err());
    assert!(tape.gaussian_filter3d(xv, -1.0, 2).is_err());
}

#[test]
fn maxpool_examples() {
    // [1,2,3,4] along W, the other axes of extent 2 and constant
    let x = Tensor5::from_fn(Shape([1, 1, 2, 2, 4]), |[_, _, _, _, w]| (w + 1) as f64);
    let tape = Tape::new();
    let xv = tape.variable(x);
    let y = tape.maxpool3d(xv).unwrap();
    assert_eq!(tape.value(y).data(), &[2.0, 4.0]);

    let c = tape.constant(Tensor5::full(Shape([1, 2, 4, 6, 5]), 0.3));
    let yc = tape.maxpool3d(c).unwrap();
    assert_eq!(tape.shape(yc), Shape([1, 2, 2, 3, 2]));
    assert!(tape.value(yc).data().iter().all(|&v| v == 0.3));

    let small = tape.constant(Tensor5::zeros(Shape([1, 1, 1, 4, 4])));
    assert!(tape.maxpool3d(small).is_err());
}

#[test]
fn maxpool_ties_route_gradient_to_first_maximum() {
    let tape = Tape::new();
    let xv = tape.variable(Tensor5::full(Shape([1, 1, 2, 2, 2]), 1.0));
    let y = tape.maxpool3d(xv).unwrap();
    let loss = tape.sum(y).unwrap();
    let g = tape.backward(loss).unwrap();
    let gx = g.wrt(xv).unwrap();
    assert_eq!(gx.data()[0], 1.0);
    assert!(gx.data()[1..].iter().all(|&v| v == 0.0));
}

#[test]
fn reduce_examples() {
    let tape = Tape::new();
    let x = tape.variable(t([1, 1, 1, 1, 3], &[1.0, 2.0, 3.0]));
    let m = tape.mean(x).unwrap();
    assert_eq!(tape.value(m).item(), 2.0);

    let tape = Tape::<f64>::new();
    let z = tape.variable(Tensor5::zeros(Shape([1, 1, 2, 2, 2])));
    let s = tape.sum(z).unwrap();
    assert_eq!(tape.value(s).item(), 0.0);
    let g = tape.backward(s).unwrap();
    assert!(g.wrt(z).unwrap().data().iter().all(|&v| v == 1.0));

    let tape = Tape::<f64>::new();
    let e = tape.constant(Tensor5::zeros(Shape([0, 1, 1, 1, 1])));
    assert!(matches!(tape.mean(e), Err(Error::Empty(_))));
}

#[test]
fn mean_gradient_matches_finite_differences() {
    let p = rand([1, 1, 2, 2, 2], 9);
    let err = grad_check(|tp, x| tp.mean(x), &p, 1e-5).unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn zip_and_map_examples() {
    let tape = Tape::new();
    let x = tape.constant(rand([1, 1, 2, 3, 2], 4));
    let d = tape.sub(x, x).unwrap();
    assert!(tape.value(d).data().iter().all(|&v| v == 0.0));

    let v = tape.constant(t([1, 1, 1, 1, 2], &[-2.0, 3.0]));
    let sq = tape.square(v);
    assert_eq!(tape.value(sq).data(), &[4.0, 9.0]);

    let other = tape.constant(rand([1, 1, 2, 3, 3], 5));
    assert!(tape.add(x, other).is_err());
    assert!(matches!(
        tape.map(v, MapKind::Sqrt),
        Err(Error::NegativeSqrt(_))
    ));
}

#[test]
fn composed_squared_distance_matches_direct_norm() {
    let a = rand([1, 2, 3, 2, 2], 21);
    let b = rand([1, 2, 3, 2, 2], 22);
    let direct: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum();
    let tape = Tape::new();
    let (av, bv) = (tape.constant(a), tape.constant(b));
    let d = tape.sub(av, bv).unwrap();
    let s = tape.sum(tape.square(d)).unwrap();
    assert!((tape.value(s).item() - direct).abs() < 1e-12);
}

#[test]
fn backward_simple_losses() {
    let x0 = rand([1, 1, 2, 2, 2], 30);
    let tape = Tape::new();
    let x = tape.variable(x0.clone());
    let m = tape.mean(x).unwrap();
    let g = tape.backward(m).unwrap();
    assert!(g
        .wrt(x)
        .unwrap()
        .data()
        .iter()
        .all(|&v| (v - 1.0 / 8.0).abs() < 1e-15));

    let tape = Tape::new();
    let x = tape.variable(x0.clone());
    let l = tape.sum(tape.square(x)).unwrap();
    let g = tape.backward(l).unwrap();
    for (gv, xv) in g.wrt(x).unwrap().data().iter().zip(x0.data()) {
        assert_eq!(*gv, 2.0 * xv);
    }

    assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
}

#[test]
fn frozen_parameters_receive_no_gradient() {
    let frozen = Parameter::new("w", rand([1, 1, 3, 3, 3], 1), false);
    let live = Parameter::new("v", rand([1, 1, 3, 3, 3], 2), true);
    let tape = Tape::new();
    let x = tape.variable(rand([1, 1, 3, 3, 3], 3));
    let (fw, lw) = (tape.param(&frozen), tape.param(&live));
    let y = tape.conv3d(x, fw, None).unwrap();
    let z = tape.conv3d(y, lw, None).unwrap();
    let l = tape.sum(z).unwrap();
    let g = tape.backward(l).unwrap();
    assert!(g.param(&frozen).is_none());
    assert!(g.param(&live).is_some());
    assert!(g.wrt(x).is_some());
}

#[test]
fn backward_is_bit_deterministic() {
    let x0 = rand([2, 2, 4, 4, 4], 8);
    let w0 = rand([3, 2, 3, 3, 3], 9);
    let tape = Tape::new();
    let x = tape.variable(x0);
    let w = tape.variable(w0);
    let y = tape.conv3d(x, w, None).unwrap();
    let p = tape.maxpool3d(y).unwrap();
    let l = tape.mean(tape.square(p)).unwrap();
    let g1 = tape.backward(l).unwrap();
    let g2 = tape.backward(l).unwrap();
    assert_eq!(g1.wrt(x), g2.wrt(x));
    assert_eq!(g1.wrt(w), g2.wrt(w));
}

#[test]
fn grad_check_examples() {
    let p = rand([1, 1, 2, 2, 2], 1);
    assert!(grad_check(|tp, x| tp.mean(x), &p, 1e-5).unwrap() < 1e-10);

    // keep coordinates away from the kink at zero
    let p = rand([1, 1, 3, 3, 3], 2).map(|v| if v.abs() < 0.1 { v + 0.3 } else { v });
    assert!(grad_check(|tp, x| tp.sum(tp.relu(x)), &p, 1e-5).unwrap() < 1e-6);
}

#[test]
fn grad_check_conv_batchnorm_prelu_chain() {
    let w = rand([2, 1, 3, 3, 3], 40);
    let bias = rand([2, 1, 1, 1, 1], 41);
    let target = rand([2, 2, 3, 3, 3], 42);
    let point = rand([2, 1, 3, 3, 3], 43);
    let f = |tp: &Tape<f64>, x: Var| {
        let wv = tp.constant(w.clone());
        let bv = tp.constant(bias.clone());
        let y = tp.conv3d(x, wv, Some(bv))?;
        let g = tp.constant(t([1, 2, 1, 1, 1], &[1.2, 0.8]));
        let b = tp.constant(t([1, 2, 1, 1, 1], &[0.1, -0.2]));
        let (y, _) = tp.batchnorm_train(y, g, b, 1e-5)?;
        let s = tp.constant(t([1, 2, 1, 1, 1], &[0.25, 0.1]));
        let y = tp.prelu(y, s)?;
        let tv = tp.constant(target.clone());
        let d = tp.mul(y, tv)?;
        tp.mean(d)
    };
    let err = grad_check(f, &point, 1e-5).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grad_check_reports_non_finite() {
    let p = t([1, 1, 1, 1, 2], &[0.0, 1.0]);
    let f = |tp: &Tape<f64>, x: Var| {
        let z = tp.constant(Tensor5::zeros(Shape([1, 1, 1, 1, 2])));
        let r = tp.div(x, z)?;
        tp.sum(r)
    };
    assert!(matches!(grad_check(f, &p, 1e-5), Err(Error::NonFinite(_))));
}

#[test]
fn gradients_of_parameter_ops_match_finite_differences() {
    // gradient with respect to the weights, checked by treating the weights as the point
    let x = rand([2, 2, 3, 4, 3], 60);
    let dy = rand([2, 3, 3, 4, 3], 61);
    let w0 = rand([3, 2, 3, 3, 3], 62);
    let err = grad_check(
        |tp, w| {
            let xv = tp.constant(x.clone());
            let y = tp.conv3d(xv, w, None)?;
            let d = tp.constant(dy.clone());
            tp.sum(tp.mul(y, d)?)
        },
        &w0,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_attention_primitives() {
    let p = rand([2, 3, 2, 2, 3], 70);
    let k0 = rand([2, 3, 2, 2, 3], 71);
    let v0 = rand([2, 3, 2, 2, 3], 72);
    let w = rand([2, 3, 2, 2, 3], 73);
    let f = |tp: &Tape<f64>, q: Var| {
        let k = tp.constant(k0.clone());
        let v = tp.constant(v0.clone());
        let qn = tp.l2_normalize_rows(q);
        let kn = tp.l2_normalize_rows(k);
        let a = tp.gram(qn, kn)?;
        let temp = tp.constant(Tensor5::scalar(1.7));
        let a = tp.scale_by(a, temp)?;
        let a = tp.softmax_rows(a);
        let o = tp.attend(a, v)?;
        let wv = tp.constant(w.clone());
        tp.sum(tp.mul(o, wv)?)
    };
    assert!(grad_check(f, &p, 1e-5).unwrap() < 1e-6);

    // gradient through the value and the key paths
    let f2 = |tp: &Tape<f64>, v: Var| {
        let q = tp.constant(p.clone());
        let a = tp.gram(q, v)?;
        let a = tp.softmax_rows(a);
        let o = tp.attend(a, v)?;
        let wv = tp.constant(w.clone());
        tp.sum(tp.mul(o, wv)?)
    };
    assert!(grad_check(f2, &v0, 1e-5).unwrap() < 1e-6);
}

#[test]
fn grad_check_layernorm_gelu_depthwise() {
    let p = rand([1, 3, 3, 3, 2], 80);
    let dw = rand([3, 1, 3, 3, 3], 81);
    let db = rand([1, 3, 1, 1, 1], 82);
    let w = rand([1, 3, 3, 3, 2], 83);
    let f = |tp: &Tape<f64>, x: Var| {
        let g = tp.constant(t([1, 3, 1, 1, 1], &[1.1, 0.9, 1.3]));
        let b = tp.constant(t([1, 3, 1, 1, 1], &[0.0, 0.2, -0.1]));
        let y = tp.channel_layernorm(x, g, b, 1e-5)?;
        let wv = tp.constant(dw.clone());
        let bv = tp.constant(db.clone());
        let y = tp.depthwise_conv3d(y, wv, Some(bv))?;
        let y = tp.gelu(y);
        let wt = tp.constant(w.clone());
        tp.sum(tp.mul(y, wt)?)
    };
    assert!(grad_check(f, &p, 1e-5).unwrap() < 1e-6);

    let err = grad_check(
        |tp, wv| {
            let x = tp.constant(p.clone());
            let y = tp.depthwise_conv3d(x, wv, None)?;
            let wt = tp.constant(w.clone());
            tp.sum(tp.mul(y, wt)?)
        },
        &dw,
        1e-5,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn grad_check_batchnorm_eval_and_gaussian() {
    let p = rand([2, 2, 4, 4, 4], 90);
    let w = rand([2, 2, 4, 4, 4], 91);
    let f = |tp: &Tape<f64>, x: Var| {
        let g = tp.constant(t([1, 2, 1, 1, 1], &[1.1, 0.9]));
        let b = tp.constant(t([1, 2, 1, 1, 1], &[0.3, -0.1]));
        let y = tp.batchnorm_eval(x, g, b, &[0.1, -0.2], &[0.9, 1.4], 1e-5)?;
        let y = tp.gaussian_filter3d(y, 1.0, 2)?;
        let wv = tp.constant(w.clone());
        tp.sum(tp.mul(y, wv)?)
    };
    assert!(grad_check(f, &p, 1e-5).unwrap() < 1e-6);
}
