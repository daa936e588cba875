mod common;

use common::{project, randn, rng};
use terrafuse::tensor::gradcheck::{self, Probe, STEP};
use terrafuse::tensor::{ConvOpts, Tape, Tensor, Var};

const TOL: f64 = 1e-4;

fn assert_grad<F>(inputs: &[Tensor<f64>], build: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Var<'t, f64>,
{
    let probes: Vec<_> = inputs.iter().map(|_| Probe::All).collect();
    let r = gradcheck::check(inputs, &probes, STEP, build);
    assert!(r.max_rel_error < TOL, "{r:?}");
}

#[test]
fn conv2d_output_shapes() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 11, 64, 64]));
    let w = tape.constant(Tensor::zeros([16, 11, 3, 3]));
    let y = x.conv2d(&w, None, ConvOpts::same(1)).unwrap();
    assert_eq!(y.shape(), vec![1, 16, 64, 64]);

    let x = tape.constant(Tensor::zeros([1, 8, 64, 64]));
    let w = tape.constant(Tensor::zeros([8, 8, 3, 3]));
    let y = x.conv2d(&w, None, ConvOpts::atrous(2)).unwrap();
    assert_eq!(y.shape(), vec![1, 8, 64, 64]);

    let opts = ConvOpts {
        stride: 2,
        padding: 1,
        dilation: 1,
    };
    let y = x.conv2d(&w, None, opts).unwrap();
    assert_eq!(y.shape(), vec![1, 8, 32, 32]);
}

#[test]
fn conv2d_channel_mismatch_names_axis() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 3, 8, 8]));
    let w = tape.constant(Tensor::zeros([4, 2, 3, 3]));
    let err = x.conv2d(&w, None, ConvOpts::same(1)).unwrap_err();
    assert!(err.to_string().contains("input channel"), "{err}");
    let bad = tape.constant(Tensor::zeros([3, 8, 8]));
    assert!(bad.conv2d(&w, None, ConvOpts::same(1)).is_err());
    let zero_stride = ConvOpts {
        stride: 0,
        ..Default::default()
    };
    let w = tape.constant(Tensor::zeros([4, 3, 3, 3]));
    assert!(x.conv2d(&w, None, zero_stride).is_err());
}

#[test]
fn conv2d_matches_direct_loop() {
    let mut r = rng(11);
    let x = randn(&mut r, &[2, 3, 7, 6]);
    let w = randn(&mut r, &[4, 3, 3, 3]);
    let b = randn(&mut r, &[4]);
    let opts = ConvOpts {
        stride: 2,
        padding: 2,
        dilation: 2,
    };
    let tape = Tape::new();
    let y = tape
        .constant(x.clone())
        .conv2d(
            &tape.constant(w.clone()),
            Some(&tape.constant(b.clone())),
            opts,
        )
        .unwrap()
        .value();
    let [n, cout, oh, ow] = y.dims4("t").unwrap();
    for i in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.data()[co];
                    for ci in 0..3 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * 2 + ky * 2) as isize - 2;
                                let ix = (ox * 2 + kx * 2) as isize - 2;
                                if (0..7).contains(&iy) && (0..6).contains(&ix) {
                                    acc += x.data()
                                        [((i * 3 + ci) * 7 + iy as usize) * 6 + ix as usize]
                                        * w.data()[((co * 3 + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    let got = y.data()[((i * cout + co) * oh + oy) * ow + ox];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn conv2d_gradients_match_finite_differences() {
    let configs = [
        ConvOpts::same(1),
        ConvOpts::atrous(2),
        ConvOpts {
            stride: 2,
            padding: 1,
            dilation: 1,
        },
        ConvOpts::default(),
        ConvOpts {
            stride: 1,
            padding: 3,
            dilation: 3,
        },
    ];
    for (seed, opts) in configs.into_iter().enumerate() {
        let mut r = rng(100 + seed as u64);
        let k = if seed == 3 { 1 } else { 3 };
        let inputs = [
            randn(&mut r, &[1, 2, 6, 6]),
            randn(&mut r, &[3, 2, k, k]),
            randn(&mut r, &[3]),
        ];
        assert_grad(&inputs, move |tape, v| {
            let y = v[0].conv2d(&v[1], Some(&v[2]), opts).unwrap();
            project(tape, y, seed as u64)
        });
    }
}

#[test]
fn conv_transpose_shapes_and_identity() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 32, 16, 16]));
    let w = tape.constant(Tensor::zeros([32, 16, 2, 2]));
    let y = x.conv_transpose2d(&w, None, 2, 0).unwrap();
    assert_eq!(y.shape(), vec![1, 16, 32, 32]);

    let data: Vec<f32> = (0..12).map(|v| v as f32 - 3.0).collect();
    let x = tape.constant(Tensor::new([1, 1, 3, 4], data.clone()).unwrap());
    let w = tape.constant(Tensor::full([1, 1, 1, 1], 2.5));
    let y = x.conv_transpose2d(&w, None, 1, 0).unwrap().value();
    let want: Vec<f32> = data.iter().map(|v| v * 2.5).collect();
    assert_eq!(y.data(), &want[..]);
}

#[test]
fn conv_transpose_is_adjoint_of_conv() {
    for (seed, (stride, pad, k, size)) in [(1, 0, 3, 6), (2, 1, 3, 7), (2, 0, 2, 8), (3, 1, 4, 8)]
        .into_iter()
        .enumerate()
    {
        let mut r = rng(200 + seed as u64);
        let x = randn(&mut r, &[2, 3, size, size]);
        let w = randn(&mut r, &[4, 3, k, k]);
        let tape = Tape::new();
        let opts = ConvOpts {
            stride,
            padding: pad,
            dilation: 1,
        };
        let cx = tape
            .constant(x.clone())
            .conv2d(&tape.constant(w.clone()), None, opts)
            .unwrap()
            .value();
        let y = randn(&mut r, cx.shape());
        let ty = tape
            .constant(y.clone())
            .conv_transpose2d(&tape.constant(w.clone()), None, stride, pad)
            .unwrap()
            .value();
        // Output may be smaller than x when the stride does not tile exactly;
        // choose sizes where it does.
        assert_eq!(ty.shape(), x.shape(), "case {seed}");
        let lhs = cx.dot(&y);
        let rhs = x.dot(&ty);
        assert!(
            (lhs - rhs).abs() < 1e-6 * lhs.abs().max(1.0),
            "{lhs} vs {rhs}"
        );
    }
}

#[test]
fn conv_transpose_gradients_match_finite_differences() {
    for (seed, (stride, pad, k)) in [(2, 0, 2), (1, 1, 3), (2, 1, 3), (1, 0, 1), (3, 0, 3)]
        .into_iter()
        .enumerate()
    {
        let mut r = rng(300 + seed as u64);
        let inputs = [
            randn(&mut r, &[1, 3, 4, 4]),
            randn(&mut r, &[3, 2, k, k]),
            randn(&mut r, &[2]),
        ];
        assert_grad(&inputs, move |tape, v| {
            let y = v[0]
                .conv_transpose2d(&v[1], Some(&v[2]), stride, pad)
                .unwrap();
            project(tape, y, seed as u64)
        });
    }
}

#[test]
fn maxpool_hand_checked() {
    let tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::from_fn([1, 1, 4, 4], |i| i as f32), true);
    let y = x.maxpool2d(2, 2).unwrap();
    assert_eq!(y.value().data(), &[5.0, 7.0, 13.0, 15.0]);
    assert_eq!(y.shape(), vec![1, 1, 2, 2]);
}

#[test]
fn maxpool_ties_route_to_first_element() {
    let tape = Tape::<f32>::new();
    let x = tape.leaf(Tensor::full([1, 1, 4, 4], 3.0), true);
    let y = x.maxpool2d(2, 2).unwrap();
    assert!(y.value().data().iter().all(|&v| v == 3.0));
    let loss = y.sum();
    let g = tape.backward(loss);
    let gx = g.get(x).unwrap();
    let mut want = vec![0.0f32; 16];
    for &i in &[0, 2, 8, 10] {
        want[i] = 1.0;
    }
    assert_eq!(gx.data(), &want[..]);
}

#[test]
fn maxpool_rejects_oversized_kernel() {
    let tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros([1, 1, 3, 5]));
    assert!(x.maxpool2d(4, 1).is_err());
    // floor semantics: 5 wide with k=2 gives 2 columns
    assert_eq!(x.maxpool2d(2, 2).unwrap().shape(), vec![1, 1, 1, 2]);
}

#[test]
fn maxpool_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let mut r = rng(400 + seed);
        // distinct values spaced well beyond the FD step: no ties, no switching
        let mut vals: Vec<f64> = (0..3 * 64).map(|i| i as f64 * 0.01).collect();
        use rand::seq::SliceRandom;
        vals.shuffle(&mut r);
        let x = Tensor::new([1, 3, 8, 8], vals).unwrap();
        assert_grad(&[x], move |tape, v| {
            project(tape, v[0].maxpool2d(2, 2).unwrap(), seed)
        });
    }
}

/// Scalar half-pixel bilinear interpolation, coded independently.
fn bilinear_oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s as usize).min(n_in - 1);
        let i1 = if i0 + 1 < n_in { i0 + 1 } else { i0 };
        (i0, i1, s - i0 as f64)
    };
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (y0, y1, fy) = coord(y, h, oh);
        for x in 0..ow {
            let (x0, x1, fx) = coord(x, w, ow);
            let a = src[y0 * w + x0] + fx * (src[y0 * w + x1] - src[y0 * w + x0]);
            let b = src[y1 * w + x0] + fx * (src[y1 * w + x1] - src[y1 * w + x0]);
            out[y * ow + x] = a + fy * (b - a);
        }
    }
    out
}

#[test]
fn bilinear_constant_and_identity() {
    let tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full([1, 2, 2, 2], 4.25));
    let up = c.bilinear_upsample(4, 4).unwrap().value();
    assert!(up.data().iter().all(|&v| v == 4.25));

    let mut r = rng(7);
    let x = randn(&mut r, &[2, 3, 5, 6]);
    let same = tape
        .constant(x.clone())
        .bilinear_upsample(5, 6)
        .unwrap()
        .value();
    assert_eq!(same.data(), x.data());
    assert!(tape.constant(x).bilinear_upsample(0, 3).is_err());
}

#[test]
fn bilinear_matches_scalar_oracle() {
    let tape = Tape::<f64>::new();
    let x = Tensor::new([1, 1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
    let up = tape
        .constant(x.clone())
        .bilinear_upsample(4, 4)
        .unwrap()
        .value();
    let want = bilinear_oracle(x.data(), 2, 2, 4, 4);
    assert_eq!(up.data(), &want[..]);
    // first row: 0, 0.25, 0.75, 1 under the half-pixel convention
    assert_eq!(&up.data()[..4], &[0.0, 0.25, 0.75, 1.0]);

    let mut r = rng(8);
    let x = randn(&mut r, &[1, 1, 5, 3]);
    let up = tape
        .constant(x.clone())
        .bilinear_upsample(9, 8)
        .unwrap()
        .value();
    let want = bilinear_oracle(x.data(), 5, 3, 9, 8);
    for (a, b) in up.data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn bilinear_gradients_match_finite_differences() {
    for (seed, (h, w, oh, ow)) in [
        (2, 2, 4, 4),
        (3, 5, 6, 10),
        (4, 4, 3, 5),
        (1, 1, 4, 4),
        (5, 3, 8, 8),
    ]
    .into_iter()
    .enumerate()
    {
        let mut r = rng(500 + seed as u64);
        let x = randn(&mut r, &[1, 2, h, w]);
        assert_grad(&[x], move |tape, v| {
            project(tape, v[0].bilinear_upsample(oh, ow).unwrap(), seed as u64)
        });
    }
}

fn bn_forward<'t>(
    v: &[Var<'t, f64>],
    training: bool,
    rm: &Tensor<f64>,
    rv: &Tensor<f64>,
) -> Var<'t, f64> {
    v[0].batch_norm(&v[1], &v[2], rm, rv, training, 0.9, 1e-5)
        .unwrap()
        .out
}

#[test]
fn batchnorm_identity_on_standardized_input() {
    // Each channel holds ±1 in equal numbers: mean 0, biased variance 1.
    let x = Tensor::from_fn([2, 2, 2, 2], |i| if i % 2 == 0 { 1.0 } else { -1.0 });
    let tape = Tape::<f64>::new();
    let v = [
        tape.constant(x.clone()),
        tape.constant(Tensor::ones([2])),
        tape.constant(Tensor::zeros([2])),
    ];
    let out = bn_forward(&v, true, &Tensor::zeros([2]), &Tensor::ones([2])).value();
    for (a, b) in out.data().iter().zip(x.data()) {
        assert!((a - b).abs() < 1e-5);
    }
}

#[test]
fn batchnorm_eval_is_affine() {
    let mut r = rng(9);
    let x = randn(&mut r, &[2, 3, 4, 4]);
    let gamma = Tensor::new([3], vec![2.0, -0.5, 1.5]).unwrap();
    let beta = Tensor::new([3], vec![0.1, 0.2, -0.3]).unwrap();
    let tape = Tape::<f64>::new();
    let v = [
        tape.constant(x.clone()),
        tape.constant(gamma.clone()),
        tape.constant(beta.clone()),
    ];
    let bn = v[0]
        .batch_norm(
            &v[1],
            &v[2],
            &Tensor::zeros([3]),
            &Tensor::ones([3]),
            false,
            0.9,
            1e-5,
        )
        .unwrap();
    let s = 1.0 / (1.0f64 + 1e-5).sqrt();
    for (j, (&o, &xi)) in bn.out.value().data().iter().zip(x.data()).enumerate() {
        let ch = (j / 16) % 3;
        let want = gamma.data()[ch] * xi * s + beta.data()[ch];
        assert!((o - want).abs() < 1e-12);
    }
    assert_eq!(bn.running_mean.data(), &[0.0; 3]);
}

#[test]
fn batchnorm_updates_running_stats() {
    let x = Tensor::<f64>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    let tape = Tape::new();
    let v = [
        tape.constant(x),
        tape.constant(Tensor::ones([1])),
        tape.constant(Tensor::zeros([1])),
    ];
    let bn = v[0]
        .batch_norm(
            &v[1],
            &v[2],
            &Tensor::zeros([1]),
            &Tensor::ones([1]),
            true,
            0.9,
            1e-5,
        )
        .unwrap();
    // batch mean 2.5, unbiased variance 5/3
    assert!((bn.running_mean.data()[0] - 0.25).abs() < 1e-12);
    assert!((bn.running_var.data()[0] - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    let short = tape.constant(Tensor::zeros([2]));
    assert!(v[0]
        .batch_norm(
            &short,
            &v[2],
            &Tensor::zeros([1]),
            &Tensor::ones([1]),
            true,
            0.9,
            1e-5
        )
        .is_err());
}

#[test]
fn batchnorm_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let mut r = rng(600 + seed);
        let inputs = [
            randn(&mut r, &[2, 3, 3, 3]),
            randn(&mut r, &[3]),
            randn(&mut r, &[3]),
        ];
        let rm = randn(&mut r, &[3]);
        let rv = randn(&mut r, &[3]).map(|v| v.abs() + 0.5);
        let training = seed % 2 == 0;
        assert_grad(&inputs, move |tape, v| {
            project(tape, bn_forward(v, training, &rm, &rv), seed)
        });
    }
}

#[test]
fn softmax_cases() {
    let tape = Tape::<f64>::new();
    let x = Tensor::new([1, 3, 1, 2], vec![0.0, 100.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
    let p = tape.constant(x).softmax_channels().unwrap().value();
    assert!((p.data()[0] - 1.0 / 3.0).abs() < 1e-15);
    assert!((p.data()[2] - 1.0 / 3.0).abs() < 1e-15);
    assert!((p.data()[1] - 1.0).abs() < 1e-15 && p.data()[3] < 1e-40);
    assert!(p.all_finite());

    let mut r = rng(10);
    let x = randn(&mut r, &[3, 3, 5, 5]).map(|v| v * 20.0);
    let p = tape.constant(x).softmax_channels().unwrap().value();
    for i in 0..3 {
        for j in 0..25 {
            let s: f64 = (0..3).map(|c| p.data()[(i * 3 + c) * 25 + j]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }
}

#[test]
fn softmax_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let mut r = rng(700 + seed);
        let x = randn(&mut r, &[2, 3, 3, 3]).map(|v| v * 3.0);
        assert_grad(&[x], move |tape, v| {
            project(tape, v[0].softmax_channels().unwrap(), seed)
        });
    }
}

#[test]
fn plumbing_gradients_match_finite_differences() {
    for seed in 0..5u64 {
        let mut r = rng(800 + seed);
        let a = randn(&mut r, &[1, 2, 3, 3]);
        let b = randn(&mut r, &[1, 2, 3, 3]);
        let c = randn(&mut r, &[1, 3, 3, 3]);
        assert_grad(&[a, b, c], move |tape, v| {
            let s = v[0].add(&v[1]).unwrap();
            let m = s.mul(&v[0]).unwrap().relu();
            let cat = Var::concat_channels(&[m, v[2], v[1]]).unwrap();
            let pooled = cat.global_avg_pool().unwrap().scale(1.7);
            let up = pooled.bilinear_upsample(2, 2).unwrap();
            project(tape, cat, seed)
                .add(&project(tape, up, seed + 1))
                .unwrap()
        });
    }
}

#[test]
fn concat_and_gap_shapes() {
    let tape = Tape::<f32>::new();
    let a = tape.constant(Tensor::zeros([2, 3, 4, 4]));
    let b = tape.constant(Tensor::zeros([2, 5, 4, 4]));
    assert_eq!(
        Var::concat_channels(&[a, b]).unwrap().shape(),
        vec![2, 8, 4, 4]
    );
    let c = tape.constant(Tensor::zeros([2, 5, 4, 3]));
    let err = Var::concat_channels(&[a, c]).unwrap_err();
    assert!(err.to_string().contains("width"));
    assert_eq!(b.global_avg_pool().unwrap().shape(), vec![2, 5, 1, 1]);
    assert!(a.add(&b).is_err());
}

#[test]
fn backward_is_linear_in_the_loss() {
    let mut r = rng(12);
    let x = randn(&mut r, &[1, 2, 5, 5]);
    let w = randn(&mut r, &[3, 2, 3, 3]);
    let grads = |which: u8| -> Vec<f64> {
        let tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let wv = tape.leaf(w.clone(), true);
        let y = xv.conv2d(&wv, None, ConvOpts::same(1)).unwrap().relu();
        let l1 = project(&tape, y, 1);
        let l2 = project(&tape, y.softmax_channels().unwrap(), 2);
        let loss = match which {
            0 => l1,
            1 => l2,
            _ => l1.add(&l2).unwrap(),
        };
        tape.backward(loss).get(wv).unwrap().data().to_vec()
    };
    let (g1, g2, g12) = (grads(0), grads(1), grads(2));
    for i in 0..g1.len() {
        assert!((g1[i] + g2[i] - g12[i]).abs() < 1e-6);
    }
}

#[test]
fn forward_and_backward_are_bit_deterministic() {
    let run = || {
        let mut r = rng(13);
        let x = Tensor::<f64>::from_fn([2, 3, 8, 8], |_| rand::Rng::gen_range(&mut r, -1.0..1.0))
            .cast::<f32>();
        let w = Tensor::<f32>::from_fn([4, 3, 3, 3], |i| (i as f32 * 0.37).sin());
        let tape = Tape::new();
        let xv = tape.leaf(x, true);
        let wv = tape.leaf(w, true);
        let y = xv
            .conv2d(&wv, None, ConvOpts::atrous(2))
            .unwrap()
            .maxpool2d(2, 2)
            .unwrap();
        let loss = y.mul(&y).unwrap().mean();
        let g = tape.backward(loss);
        (
            loss.item().to_bits(),
            g.get(wv)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
            g.get(xv)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect::<Vec<_>>(),
        )
    };
    assert_eq!(run(), run());
}
