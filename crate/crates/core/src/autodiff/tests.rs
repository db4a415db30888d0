use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn random(shape: &[usize], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Central finite differences on every input entry; returns the max
/// relative error against the tape gradient.
fn fd_max_rel_err<F>(inputs: &[Tensor<f64>], f: F) -> f64
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor<f64>]| {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.param(t.clone())).collect();
        let root = f(&mut tape, &vars);
        (tape, vars, root)
    };
    let (mut tape, vars, root) = eval(inputs);
    tape.backward(root).unwrap();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = tape.grad(vars[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; input.numel()]);
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let (tp, _, rp) = eval(&plus);
            let (tm, _, rm) = eval(&minus);
            let numeric = (tp.item(rp) - tm.item(rm)) / (2.0 * h);
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    worst
}

fn conv_oracle(input: &Tensor<f64>, kernel: &Tensor<f64>, bias: &[f64], pad: usize) -> Vec<f64> {
    let (c_in, h, w) = input.chw().unwrap();
    let s = kernel.shape();
    let (c_out, k) = (s[0], s[2]);
    let (oh, ow) = (h + 2 * pad + 1 - k, w + 2 * pad + 1 - k);
    let mut out = vec![0.0; c_out * oh * ow];
    for o in 0..c_out {
        for y in 0..oh {
            for x in 0..ow {
                let mut acc = bias[o];
                for c in 0..c_in {
                    for ky in 0..k {
                        for kx in 0..k {
                            let iy = y as isize + ky as isize - pad as isize;
                            let ix = x as isize + kx as isize - pad as isize;
                            if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                continue;
                            }
                            acc += kernel.data()[((o * c_in + c) * k + ky) * k + kx]
                                * input.data()[(c * h + iy as usize) * w + ix as usize];
                        }
                    }
                }
                out[(o * oh + y) * ow + x] = acc;
            }
        }
    }
    out
}

#[test]
fn conv_unit_kernel_scales_input() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[1, 3, 3], 1.0).unwrap());
    let k = tape.constant(t64(&[1, 1, 1, 1], &[2.0]));
    let b = tape.constant(t64(&[1], &[0.0]));
    let y = tape.conv2d(x, k, b, 0).unwrap();
    assert_eq!(tape.shape(y), [1, 3, 3]);
    assert!(tape.value(y).data().iter().all(|&v| v == 2.0));
}

#[test]
fn conv_padded_window_covers_small_input() {
    let mut tape = Tape::<f64>::new();
    let input = t64(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
    let kernel = Tensor::full(&[1, 1, 3, 3], 1.0).unwrap();
    let expected = conv_oracle(&input, &kernel, &[0.0], 1);
    let x = tape.constant(input);
    let k = tape.constant(kernel);
    let b = tape.constant(t64(&[1], &[0.0]));
    let y = tape.conv2d(x, k, b, 1).unwrap();
    assert_eq!(tape.value(y).data(), expected.as_slice());
    assert_eq!(tape.value(y).data()[0], 10.0);
}

#[test]
fn conv_matches_nested_loop_oracle() {
    for (pad, k) in [(0, 3), (1, 3), (0, 1), (2, 5)] {
        let input = random(&[3, 7, 6], 1, -1.0, 1.0);
        let kernel = random(&[4, 3, k, k], 2, -1.0, 1.0);
        let bias = random(&[4], 3, -1.0, 1.0);
        let expected = conv_oracle(&input, &kernel, bias.data(), pad);
        let mut tape = Tape::new();
        let (x, kk, b) = (tape.constant(input), tape.constant(kernel), tape.constant(bias));
        let y = tape.conv2d(x, kk, b, pad).unwrap();
        for (a, e) in tape.value(y).data().iter().zip(&expected) {
            assert!((a - e).abs() < 1e-12);
        }
    }
}

#[test]
fn conv_rejects_channel_mismatch() {
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::zeros(&[2, 4, 4]).unwrap());
    let k = tape.constant(Tensor::zeros(&[1, 3, 3, 3]).unwrap());
    let b = tape.constant(Tensor::zeros(&[1]).unwrap());
    assert!(matches!(tape.conv2d(x, k, b, 1), Err(Error::InvalidShape(_))));
}

#[test]
fn conv_gradients_match_finite_differences() {
    for pad in [0, 1] {
        let inputs = [
            random(&[2, 5, 4], 10, -1.0, 1.0),
            random(&[3, 2, 3, 3], 11, -1.0, 1.0),
            random(&[3], 12, -1.0, 1.0),
        ];
        let err = fd_max_rel_err(&inputs, |t, v| {
            let y = t.conv2d(v[0], v[1], v[2], pad).unwrap();
            let y2 = t.square(y);
            t.sum(y2)
        });
        assert!(err < 1e-5, "pad {pad}: {err}");
    }
}

#[test]
fn relu_and_sigmoid_values() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[3], &[-1.0, 3.0, 0.0]));
    let r = tape.relu(x);
    assert_eq!(tape.value(r).data(), &[0.0, 3.0, 0.0]);
    let s = tape.sigmoid(x);
    assert_eq!(tape.value(s).data()[2], 0.5);
    let big = tape.constant(t64(&[2], &[100.0, -100.0]));
    let sb = tape.sigmoid(big);
    assert_eq!(tape.value(sb).data(), &[1.0 - SIGMOID_EPS, SIGMOID_EPS]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[2], &[0.0, 1.0]));
    let r = tape.relu(x);
    let s = tape.sum(r);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[0.0, 1.0]);
}

#[test]
fn sigmoid_derivative_at_one() {
    let err = fd_max_rel_err(&[t64(&[1], &[1.0])], |t, v| {
        let s = t.sigmoid(v[0]);
        t.sum(s)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    let a = random(&[2, 3, 3], 20, 0.5, 1.5);
    let b = random(&[2, 3, 3], 21, 0.5, 1.5);
    let s = random(&[1], 22, 0.5, 1.5);
    let err = fd_max_rel_err(&[a, b, s], |t, v| {
        let m = t.mul(v[0], v[1]).unwrap();
        let d = t.div(m, v[2]).unwrap();
        let e = t.sub(d, v[1]).unwrap();
        let f = t.add(e, v[2]).unwrap();
        let g = t.scale(f, 0.7);
        let g = t.add_scalar(g, 3.0);
        let l = t.log(g);
        let q = t.square(l);
        t.mean(q)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn broadcasting_rejects_incompatible_shapes() {
    let mut tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros(&[2, 2]).unwrap());
    let b = tape.constant(Tensor::zeros(&[3]).unwrap());
    assert!(matches!(tape.add(a, b), Err(Error::InvalidShape(_))));
}

#[test]
fn softmax_group_symmetric_cases() {
    let mut tape = Tape::<f64>::new();
    let z: Vec<Var> = (0..2).map(|_| tape.constant(Tensor::zeros(&[3, 3]).unwrap())).collect();
    for out in tape.softmax_group(&z).unwrap() {
        assert!(tape.value(out).data().iter().all(|&v| v == 0.5));
    }
    let ones: Vec<Var> = (0..3).map(|_| tape.constant(Tensor::full(&[1, 1], 1.0).unwrap())).collect();
    for out in tape.softmax_group(&ones).unwrap() {
        assert!((tape.item(out) - 1.0 / 3.0).abs() < 1e-15);
    }
    assert!(matches!(tape.softmax_group(&[]), Err(Error::InvalidArgument(_))));
}

#[test]
fn softmax_group_gradients_match_finite_differences() {
    let maps: Vec<Tensor<f64>> = (0..3).map(|i| random(&[3, 4], 30 + i, -1.0, 1.0)).collect();
    let weights = random(&[3, 4], 40, -1.0, 1.0);
    let mut inputs = maps;
    inputs.push(weights);
    let err = fd_max_rel_err(&inputs, |t, v| {
        let outs = t.softmax_group(&v[..3]).unwrap();
        let prods: Vec<Var> = outs.iter().map(|&o| t.mul(o, v[3]).unwrap()).collect();
        let prods: Vec<Var> = prods.into_iter().enumerate().map(|(i, p)| t.scale(p, (i + 1) as f64)).collect();
        let total = t.add_all(&prods).unwrap();
        t.sum(total)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn upsample_constant_and_passthrough() {
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::full(&[2, 3, 2], 0.25).unwrap());
    let u = tape.upsample_bilinear(c, (7, 5)).unwrap();
    assert!(tape.value(u).data().iter().all(|&v| (v - 0.25).abs() < 1e-15));
    let one = tape.constant(t64(&[1, 1, 1], &[7.0]));
    let u = tape.upsample_bilinear(one, (4, 4)).unwrap();
    assert!(tape.value(u).data().iter().all(|&v| v == 7.0));
    let r = random(&[2, 3, 4], 50, -1.0, 1.0);
    let x = tape.constant(r.clone());
    let same = tape.upsample_bilinear(x, (3, 4)).unwrap();
    assert_eq!(tape.value(same).data(), r.data());
    assert!(matches!(tape.upsample_bilinear(x, (0, 4)), Err(Error::InvalidArgument(_))));
}

/// Direct per-pixel bilinear interpolation with half-pixel centers.
fn bilinear_oracle(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let sy = (((y as f64) + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let sx = (((x as f64) + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            out[y * ow + x] = src[y0 * w + x0] * (1.0 - fy) * (1.0 - fx)
                + src[y0 * w + x1] * (1.0 - fy) * fx
                + src[y1 * w + x0] * fy * (1.0 - fx)
                + src[y1 * w + x1] * fy * fx;
        }
    }
    out
}

#[test]
fn upsample_2x2_to_4x4_matches_oracle() {
    let src = [1.0, 2.0, 3.0, 4.0];
    let expected = [
        1.0, 1.25, 1.75, 2.0, 1.5, 1.75, 2.25, 2.5, 2.5, 2.75, 3.25, 3.5, 3.0, 3.25, 3.75, 4.0,
    ];
    let oracle = bilinear_oracle(&src, 2, 2, 4, 4);
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(t64(&[1, 2, 2], &src));
    let u = tape.upsample_bilinear(x, (4, 4)).unwrap();
    for ((a, o), e) in tape.value(u).data().iter().zip(&oracle).zip(&expected) {
        assert!((a - o).abs() < 1e-6 && (a - e).abs() < 1e-6);
    }
    let src = random(&[1, 3, 5], 51, -1.0, 1.0);
    let oracle = bilinear_oracle(src.data(), 3, 5, 8, 11);
    let x = tape.constant(src);
    let u = tape.upsample_bilinear(x, (8, 11)).unwrap();
    for (a, o) in tape.value(u).data().iter().zip(&oracle) {
        assert!((a - o).abs() < 1e-12);
    }
}

#[test]
fn upsample_gradients_match_finite_differences() {
    let inputs = [random(&[2, 3, 2], 52, -1.0, 1.0), random(&[2, 7, 5], 53, -1.0, 1.0)];
    let err = fd_max_rel_err(&inputs, |t, v| {
        let u = t.upsample_bilinear(v[0], (7, 5)).unwrap();
        let p = t.mul(u, v[1]).unwrap();
        t.sum(p)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn block_sum_values_and_errors() {
    let mut tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::full(&[4, 4], 1.0).unwrap());
    let b = tape.block_sum(x, 2).unwrap();
    assert_eq!(tape.shape(b), [2, 2]);
    assert!(tape.value(b).data().iter().all(|&v| v == 4.0));
    let odd = tape.constant(Tensor::zeros(&[5, 4]).unwrap());
    assert!(matches!(tape.block_sum(odd, 2), Err(Error::InvalidShape(_))));
}

#[test]
fn block_sum_cell_gradient_is_block_indicator() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(random(&[4, 6], 60, -1.0, 1.0));
    let b = tape.block_sum(x, 2).unwrap();
    let cell = tape.gather(b, &[4]).unwrap();
    let s = tape.sum(cell);
    tape.backward(s).unwrap();
    let g = tape.grad(x).unwrap();
    for r in 0..4 {
        for c in 0..6 {
            let inside = r / 2 == 1 && c / 2 == 1;
            assert_eq!(g[r * 6 + c], if inside { 1.0 } else { 0.0 });
        }
    }
    let err = fd_max_rel_err(&[random(&[2, 4, 6], 61, -1.0, 1.0)], |t, v| {
        let b = t.block_sum(v[0], 2).unwrap();
        let q = t.square(b);
        t.sum(q)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn max_pool_routes_gradient_to_argmax() {
    let err = fd_max_rel_err(&[random(&[2, 4, 6], 62, -1.0, 1.0)], |t, v| {
        let p = t.max_pool2x2(v[0]).unwrap();
        let q = t.square(p);
        t.sum(q)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn reductions() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let s = tape.sum(x);
    let m = tape.mean(x);
    assert_eq!(tape.item(s), 10.0);
    assert_eq!(tape.item(m), 2.5);
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0; 4]);
}

#[test]
fn structural_ops_gradients() {
    let inputs = [
        random(&[2, 3, 3], 70, -1.0, 1.0),
        random(&[1, 3, 3], 71, -1.0, 1.0),
        random(&[3, 3, 3], 72, -1.0, 1.0),
    ];
    let err = fd_max_rel_err(&inputs, |t, v| {
        let bc = t.broadcast_channels(v[1], 3).unwrap();
        let m = t.mul(bc, v[2]).unwrap();
        let cat = t.concat(&[v[0], m]).unwrap();
        let sl = t.slice_channels(cat, 1, 3).unwrap();
        let r = t.reshape(sl, &[27]).unwrap();
        let g = t.gather(r, &[0, 5, 5, 26, 13]).unwrap();
        let q = t.square(g);
        t.sum(q)
    });
    assert!(err < 1e-6, "{err}");
}

#[test]
fn backward_basics_and_accumulation() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[1], &[2.0]));
    let y = tape.scale(x, 3.0);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[3.0]);
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    tape.zero_grad();
    let sq = tape.square(x);
    tape.backward(sq).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[4.0]);

    let v = tape.param(Tensor::zeros(&[2]).unwrap());
    assert!(matches!(tape.backward(v), Err(Error::InvalidArgument(_))));
}

#[test]
fn constants_receive_no_grad() {
    let mut tape = Tape::<f64>::new();
    let x = tape.param(t64(&[1], &[2.0]));
    let c = tape.constant(t64(&[1], &[5.0]));
    let y = tape.mul(x, c).unwrap();
    tape.backward(y).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[5.0]);
    assert!(tape.grad(c).is_none());
}

#[test]
fn forward_is_deterministic_at_f32() {
    let run = || {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(random(&[3, 16, 16], 80, -1.0, 1.0).cast());
        let k = tape.param(random(&[8, 3, 3, 3], 81, -1.0, 1.0).cast());
        let b = tape.param(random(&[8], 82, -1.0, 1.0).cast());
        let y = tape.conv2d(x, k, b, 1).unwrap();
        let s = tape.sum(y);
        tape.backward(s).unwrap();
        (tape.value(y).clone(), tape.grad(k).unwrap().to_vec())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert_eq!(a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(), b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    assert_eq!(ga.iter().map(|v| v.to_bits()).collect::<Vec<_>>(), gb.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn softmax_outputs_sum_to_one(seed in any::<u64>(), n in 1usize..5) {
        let mut tape = Tape::<f64>::new();
        let maps: Vec<Var> = (0..n).map(|i| tape.constant(random(&[3, 5], seed ^ i as u64, -10.0, 10.0))).collect();
        let outs = tape.softmax_group(&maps).unwrap();
        for p in 0..15 {
            let s: f64 = outs.iter().map(|&o| tape.value(o).data()[p]).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn block_sum_preserves_mass(seed in any::<u64>(), block in 1usize..5) {
        let x = random(&[2, block * 3, block * 2], seed, -10.0, 10.0);
        let total: f64 = x.data().iter().sum();
        let abs: f64 = x.data().iter().map(|v| v.abs()).sum();
        let mut tape = Tape::new();
        let v = tape.constant(x);
        let b = tape.block_sum(v, block).unwrap();
        let out: f64 = tape.value(b).data().iter().sum();
        prop_assert!((out - total).abs() < 1e-4 * abs);
    }

    #[test]
    fn forward_and_backward_stay_finite(seed in any::<u64>()) {
        let mut tape = Tape::<f32>::new();
        let x = tape.param(random(&[2, 4, 4], seed, -10.0, 10.0).cast());
        let k = tape.param(random(&[3, 2, 3, 3], seed.wrapping_add(1), -10.0, 10.0).cast());
        let b = tape.param(random(&[3], seed.wrapping_add(2), -10.0, 10.0).cast());
        let y = tape.conv2d(x, k, b, 1).unwrap();
        let s = tape.sigmoid(y);
        let l = tape.log(s);
        let p = tape.max_pool2x2(l).unwrap();
        let u = tape.upsample_bilinear(p, (4, 4)).unwrap();
        let sm = tape.softmax_channels(u).unwrap();
        let r = tape.relu(sm);
        let m = tape.mean(r);
        tape.backward(m).unwrap();
        prop_assert!(tape.value(m).is_finite());
        for v in [x, k, b] {
            prop_assert!(tape.grad(v).unwrap().iter().all(|g| g.is_finite()));
        }
    }
}
