//! Convolution ops against nested-loop references, and finite-difference
//! checks of every differentiable op.

use acv_ndops::{
    conv2d, conv3d, deconv3d, grad_check_many, interpolate, ops, random_projection, ConvParams, GradCheckConfig,
    InterpMode, Tape, Tensor,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Direct cross-correlation over three spatial axes, zero padding.
#[allow(clippy::too_many_arguments)]
fn conv3d_loops(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: [usize; 3],
    pad: [usize; 3],
    dil: [usize; 3],
) -> Tensor<f64> {
    let (ci, xd, xh, xw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, kd, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3], w.shape()[4]);
    let out = |n: usize, k: usize, a: usize| (n + 2 * pad[a] - dil[a] * (k - 1) - 1) / stride[a] + 1;
    let (od, oh, ow) = (out(xd, kd, 0), out(xh, kh, 1), out(xw, kw, 2));
    Tensor::from_fn(&[co, od, oh, ow], |i| {
        let mut acc = b.map_or(0.0, |b| b.data()[i[0]]);
        for c in 0..ci {
            for a in 0..kd {
                for bb in 0..kh {
                    for cc in 0..kw {
                        let z = (i[1] * stride[0] + a * dil[0]) as isize - pad[0] as isize;
                        let y = (i[2] * stride[1] + bb * dil[1]) as isize - pad[1] as isize;
                        let xx = (i[3] * stride[2] + cc * dil[2]) as isize - pad[2] as isize;
                        if z < 0 || y < 0 || xx < 0 || z >= xd as isize || y >= xh as isize || xx >= xw as isize {
                            continue;
                        }
                        acc += w.at(&[i[0], c, a, bb, cc]) * x.at(&[c, z as usize, y as usize, xx as usize]);
                    }
                }
            }
        }
        acc
    })
}

/// Transposed convolution as a scatter-accumulate over input voxels.
fn deconv3d_loops(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
    let (ci, xd, xh, xw) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (co, k) = (w.shape()[1], w.shape()[2]);
    let o = |n: usize| (n - 1) * stride + k - 2 * pad;
    let mut out = Tensor::zeros(&[co, o(xd), o(xh), o(xw)]);
    for c in 0..ci {
        for z in 0..xd {
            for y in 0..xh {
                for xx in 0..xw {
                    let v = x.at(&[c, z, y, xx]);
                    for oc in 0..co {
                        for a in 0..k {
                            for b in 0..k {
                                for cc in 0..k {
                                    let tz = (z * stride + a) as isize - pad as isize;
                                    let ty = (y * stride + b) as isize - pad as isize;
                                    let tx = (xx * stride + cc) as isize - pad as isize;
                                    let ext = out.shape().to_vec();
                                    if tz < 0 || ty < 0 || tx < 0 || tz >= ext[1] as isize || ty >= ext[2] as isize || tx >= ext[3] as isize {
                                        continue;
                                    }
                                    let idx = [oc, tz as usize, ty as usize, tx as usize];
                                    let cur = out.at(&idx);
                                    out.set(&idx, cur + v * w.at(&[c, oc, a, b, cc]));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, pad, dil) in [(1, 0, 1), (1, 1, 1), (2, 1, 1), (1, 2, 2)] {
        let x = random(&mut rng, &[2, 5, 5]);
        let w = random(&mut rng, &[3, 2, 3, 3]);
        let b = random(&mut rng, &[3]);
        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x.clone()), tape.constant(w.clone()), tape.constant(b.clone()));
        let p = ConvParams { kernel: wv, bias: Some(bv), stride: vec![stride; 2], padding: vec![pad; 2], dilation: vec![dil; 2] };
        let y = conv2d(&mut tape, xv, &p).unwrap();

        let x3 = x.clone().reshape(&[2, 1, 5, 5]).unwrap();
        let w3 = w.clone().reshape(&[3, 2, 1, 3, 3]).unwrap();
        let expect = conv3d_loops(&x3, &w3, Some(&b), [1, stride, stride], [0, pad, pad], [1, dil, dil]);
        let s = expect.shape().to_vec();
        let expect = expect.reshape(&[s[0], s[2], s[3]]).unwrap();
        assert!(tape.value(y).max_abs_diff(&expect) <= 1e-10);
    }
}

#[test]
fn conv3d_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for (shape, k, stride, pad) in [([2, 4, 5, 6], 3, 1, 1), ([3, 5, 4, 4], 3, 2, 1), ([1, 3, 3, 3], 1, 1, 0)] {
        let x = random(&mut rng, &shape);
        let w = random(&mut rng, &[2, shape[0], k, k, k]);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = conv3d(&mut tape, xv, &ConvParams::uniform(wv, None, 3, stride, pad)).unwrap();
        let expect = conv3d_loops(&x, &w, None, [stride; 3], [pad; 3], [1; 3]);
        assert!(tape.value(y).max_abs_diff(&expect) <= 1e-12);
    }
}

#[test]
fn conv3d_identity_kernel() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = random(&mut rng, &[1, 3, 4, 5]);
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let k = tape.constant(Tensor::ones(&[1, 1, 1, 1, 1]));
    let y = conv3d(&mut tape, xv, &ConvParams::uniform(k, None, 3, 1, 0)).unwrap();
    assert_eq!(tape.value(y), &x);
}

#[test]
fn deconv3d_matches_scatter_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for shape in [[2, 2, 2, 2], [3, 2, 3, 4], [1, 1, 2, 3]] {
        let x = random(&mut rng, &shape);
        let w = random(&mut rng, &[shape[0], 2, 4, 4, 4]);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = deconv3d(&mut tape, xv, &ConvParams::uniform(wv, None, 3, 2, 1)).unwrap();
        let expect = deconv3d_loops(&x, &w, 2, 1);
        assert_eq!(tape.shape(y), &[2, 2 * shape[1], 2 * shape[2], 2 * shape[3]]);
        assert!(tape.value(y).max_abs_diff(&expect) <= 1e-12);
    }
}

#[test]
fn deconv3d_adjoint_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let x = random(&mut rng, &[2, 2, 3, 2]);
    let w = random(&mut rng, &[2, 3, 4, 4, 4]);
    let mut tape = Tape::new();
    let (xv, wv) = (tape.param(x), tape.constant(w.clone()));
    let y = deconv3d(&mut tape, xv, &ConvParams::uniform(wv, None, 3, 2, 1)).unwrap();
    let out_shape = tape.shape(y).to_vec();
    let s = ops::sum(&mut tape, y).unwrap();
    tape.backward(s).unwrap();
    let expect = conv3d_loops(&Tensor::ones(&out_shape), &w, None, [2; 3], [1; 3], [1; 3]);
    assert!(tape.grad(xv).unwrap().max_abs_diff(&expect) <= 1e-12);
}

fn check(name: &str, f: impl Fn(&mut Tape<f64>, &[acv_ndops::Var]) -> acv_ndops::Result<acv_ndops::Var>, xs: &[Tensor<f64>]) {
    let r = grad_check_many(
        |t, v| {
            let y = f(t, v)?;
            random_projection(t, y, 99)
        },
        xs,
        GradCheckConfig::default(),
    )
    .unwrap();
    assert!(r.passed(), "{name}: {r:?}");
}

#[test]
fn gradients_of_convolutions() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for (c, h, w) in [(1, 4, 4), (2, 5, 3), (3, 6, 6)] {
        let xs = [random(&mut rng, &[c, h, w]), random(&mut rng, &[2, c, 3, 3]), random(&mut rng, &[2])];
        check("conv2d", |t, v| conv2d(t, v[0], &ConvParams::uniform(v[1], Some(v[2]), 2, 2, 1)), &xs);
    }
    for shape in [[1, 3, 3, 3], [2, 4, 3, 5], [2, 2, 4, 4]] {
        let xs = [random(&mut rng, &shape), random(&mut rng, &[2, shape[0], 3, 3, 3]), random(&mut rng, &[2])];
        check("conv3d", |t, v| conv3d(t, v[0], &ConvParams::uniform(v[1], Some(v[2]), 3, 1, 1)), &xs);
        let xs = [random(&mut rng, &shape), random(&mut rng, &[shape[0], 2, 4, 4, 4]), random(&mut rng, &[2])];
        check("deconv3d", |t, v| deconv3d(t, v[0], &ConvParams::uniform(v[1], Some(v[2]), 3, 2, 1)), &xs);
    }
}

#[test]
fn gradients_of_pointwise_and_layout_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for shape in [[2, 3, 4], [1, 5, 2], [3, 2, 2]] {
        let c = shape[0];
        let a = random(&mut rng, &shape);
        let b = random(&mut rng, &shape);
        check("add", |t, v| ops::add(t, v[0], v[1]), &[a.clone(), b.clone()]);
        check("mul", |t, v| ops::mul(t, v[0], v[1]), &[a.clone(), b.clone()]);
        check("scale", |t, v| ops::scale(t, v[0], -1.7), &[a.clone()]);
        // keep away from the kink at zero
        let shifted = a.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
        check("relu", |t, v| ops::relu(t, v[0]), &[shifted]);
        check(
            "channel_affine",
            |t, v| ops::channel_affine(t, v[0], v[1], v[2]),
            &[a.clone(), random(&mut rng, &[c]), random(&mut rng, &[c])],
        );
        check("channel_norm", |t, v| ops::channel_norm(t, v[0], 1e-5), &[a.clone()]);
        let mut wshape = shape.to_vec();
        wshape[0] = 1;
        check("broadcast_mul", |t, v| ops::broadcast_mul(t, v[0], v[1]), &[random(&mut rng, &wshape), a.clone()]);
        check("concat", |t, v| ops::concat(t, &[v[0], v[1]]), &[a.clone(), b.clone()]);
        check("slice_channels", |t, v| ops::slice_channels(t, v[0], 0..1), &[a.clone()]);
        for axis in 0..3 {
            check("softmax", |t, v| ops::softmax(t, v[0], axis), &[a.clone()]);
            let values = Tensor::from_fn(&[shape[axis]], |i| i[0] as f64 * 1.5);
            check("expectation", |t, v| ops::expectation(t, v[0], axis, values.clone()), &[a.clone()]);
        }
        check("reshape", |t, v| ops::reshape(t, v[0], &[shape.iter().product()]), &[a.clone()]);
        check("sum", |t, v| ops::sum(t, v[0]), &[a.clone()]);
    }
}

#[test]
fn gradients_of_interpolation() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    for (shape, target) in [([1, 2, 3], [4, 6]), ([2, 3, 2], [2, 5]), ([1, 4, 4], [2, 3])] {
        check("bilinear", |t, v| interpolate(t, v[0], &target, InterpMode::Bilinear), &[random(&mut rng, &shape)]);
    }
    for (shape, target) in [([1, 2, 2, 2], [4, 4, 4]), ([2, 2, 3, 2], [3, 6, 4]), ([1, 3, 2, 2], [6, 3, 3])] {
        check("trilinear", |t, v| interpolate(t, v[0], &target, InterpMode::Trilinear), &[random(&mut rng, &shape)]);
    }
}

#[test]
fn softmax_conv_chain_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(24);
    let xs = [random(&mut rng, &[2, 4, 3, 3]), random(&mut rng, &[1, 2, 3, 3, 3])];
    check(
        "softmax∘conv3d",
        |t, v| {
            let y = conv3d(t, v[0], &ConvParams::uniform(v[1], None, 3, 1, 1))?;
            ops::softmax(t, y, 1)
        },
        &xs,
    );
}

#[test]
fn channel_norm_standardises() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let x = random(&mut rng, &[3, 4, 5]).map(|v| 7.0 * v + 2.0);
    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let y = ops::channel_norm(&mut tape, xv, 0.0).unwrap();
    for chunk in tape.value(y).data().chunks(20) {
        let mean = chunk.iter().sum::<f64>() / 20.0;
        let var = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
        assert!(mean.abs() < 1e-12 && (var - 1.0).abs() < 1e-12);
    }
}

proptest! {
    #[test]
    fn softmax_normalises_extreme_logits(logits in proptest::collection::vec(-1e4f64..1e4, 1..12)) {
        let n = logits.len();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_vec(&[n], logits).unwrap());
        let y = ops::softmax(&mut tape, x, 0).unwrap();
        let total: f64 = tape.value(y).data().iter().sum();
        prop_assert!((total - 1.0).abs() <= 1e-6);
        prop_assert!(tape.value(y).data().iter().all(|&p| (0.0..=1.0).contains(&p)));
    }

    #[test]
    fn interpolation_preserves_constants(c in -50.0f64..50.0, d in 1usize..6, h in 1usize..6, w in 1usize..6,
                                         td in 1usize..9, th in 1usize..9, tw in 1usize..9) {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, d, h, w], c));
        let y = interpolate(&mut tape, x, &[td, th, tw], InterpMode::Trilinear).unwrap();
        prop_assert!(tape.value(y).data().iter().all(|&v| v == c));
    }
}
