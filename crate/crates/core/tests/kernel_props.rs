use proptest::prelude::*;

use rescale_lab::geometry::Padding;
use rescale_lab::kernels::{
    avgpool_sums, avgpool_with, compute_effective_bias, conv2d_int, dense_int, depthwise_conv2d_int, pool_rescaler,
};
use rescale_lab::qcore::QuantParams;
use rescale_lab::tensor::QTensor;

/// A small NHWC convolution problem with OHWI (or `[KH, KW, C]`) weights.
#[derive(Debug, Clone)]
struct Conv {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: (usize, usize),
    padding: Padding,
    z: i32,
    x: Vec<i8>,
    weights: Vec<i8>,
    bias: Vec<i32>,
}

fn conv_problem(depthwise: bool) -> impl Strategy<Value = Conv> {
    (
        1usize..3,
        1usize..7,
        1usize..7,
        1usize..4,
        1usize..4,
        1usize..4,
        1usize..4,
        1usize..3,
        1usize..3,
        any::<bool>(),
        -128i32..128,
    )
        .prop_filter(
            "VALID needs the kernel to fit",
            |&(_, h, w, _, _, kh, kw, _, _, same, _)| same || (kh <= h && kw <= w),
        )
        .prop_flat_map(move |(n, h, w, c, o, kh, kw, sy, sx, same, z)| {
            let o = if depthwise { c } else { o };
            let wlen = if depthwise { kh * kw * c } else { o * kh * kw * c };
            (
                prop::collection::vec(any::<i8>(), n * h * w * c),
                prop::collection::vec(-127i8..=127, wlen),
                prop::collection::vec(-100_000i32..100_000, o),
            )
                .prop_map(move |(x, weights, bias)| Conv {
                    n,
                    h,
                    w,
                    c,
                    o,
                    kh,
                    kw,
                    stride: (sy, sx),
                    padding: if same { Padding::Same } else { Padding::Valid },
                    z,
                    x,
                    weights,
                    bias,
                })
        })
}

/// Output size and leading pad, following the usual SAME/VALID rules.
fn axis(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, i64) {
    match padding {
        Padding::Valid => ((input - kernel) / stride + 1, 0),
        Padding::Same => {
            let out = input.div_ceil(stride);
            let total = ((out - 1) * stride + kernel) as i64 - input as i64;
            (out, total.max(0) / 2)
        }
    }
}

/// `Σ (x − Z_x)·w + b` over in-bounds taps, in i64.
fn reference(p: &Conv, depthwise: bool) -> Vec<i64> {
    let (oh, pt) = axis(p.h, p.kh, p.stride.0, p.padding);
    let (ow, pl) = axis(p.w, p.kw, p.stride.1, p.padding);
    let mut out = Vec::new();
    for n in 0..p.n {
        for oy in 0..oh {
            for ox in 0..ow {
                for o in 0..p.o {
                    let mut acc = p.bias[o] as i64;
                    for ty in 0..p.kh {
                        for tx in 0..p.kw {
                            let iy = (oy * p.stride.0 + ty) as i64 - pt;
                            let ix = (ox * p.stride.1 + tx) as i64 - pl;
                            if iy < 0 || ix < 0 || iy >= p.h as i64 || ix >= p.w as i64 {
                                continue;
                            }
                            let px = |c: usize| {
                                p.x[((n * p.h + iy as usize) * p.w + ix as usize) * p.c + c] as i64 - p.z as i64
                            };
                            if depthwise {
                                acc += px(o) * p.weights[(ty * p.kw + tx) * p.c + o] as i64;
                            } else {
                                for c in 0..p.c {
                                    acc += px(c) * p.weights[((o * p.kh + ty) * p.kw + tx) * p.c + c] as i64;
                                }
                            }
                        }
                    }
                    out.push(acc);
                }
            }
        }
    }
    out
}

fn params(z: i32) -> QuantParams {
    QuantParams::new(0.05, z).unwrap()
}

fn run_conv(p: &Conv, depthwise: bool) -> Vec<i64> {
    let x = QTensor::activation(p.x.clone(), vec![p.n, p.h, p.w, p.c], params(p.z)).unwrap();
    let (shape, axis) = if depthwise {
        (vec![p.kh, p.kw, p.c], 2)
    } else {
        (vec![p.o, p.kh, p.kw, p.c], 0)
    };
    let w = QTensor::weights(p.weights.clone(), shape, vec![0.01; p.o], axis).unwrap();
    let b = compute_effective_bias(&p.bias, &w, axis, p.z).unwrap();
    let acc = if depthwise {
        depthwise_conv2d_int(&x, &w, &b, p.stride, p.padding)
    } else {
        conv2d_int(&x, &w, &b, p.stride, p.padding)
    };
    acc.unwrap().data.into_iter().map(i64::from).collect()
}

fn dense_acc(x: &[i8], n: usize, weights: &[i8], outs: usize, bias: &[i32], z: i32) -> Vec<i32> {
    let f = x.len() / n;
    let x = QTensor::activation(x.to_vec(), vec![n, f], params(z)).unwrap();
    let w = QTensor::weights(weights.to_vec(), vec![outs, f], vec![0.01; outs], 0).unwrap();
    let b = compute_effective_bias(bias, &w, 0, z).unwrap();
    dense_int(&x, &w, &b).unwrap().data
}

/// Batch, features, outputs, two inputs, weights, bias.
type DenseProblem = (usize, usize, usize, Vec<i8>, Vec<i8>, Vec<i8>, Vec<i32>);

fn dense_problem() -> impl Strategy<Value = DenseProblem> {
    (1usize..5, 1usize..40, 1usize..6).prop_flat_map(|(n, f, o)| {
        (
            Just(n),
            Just(f),
            Just(o),
            prop::collection::vec(-64i8..64, n * f),
            prop::collection::vec(-64i8..64, n * f),
            prop::collection::vec(-127i8..=127, o * f),
            prop::collection::vec(-10_000i32..10_000, o),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn conv_matches_reference(p in conv_problem(false)) {
        prop_assert_eq!(run_conv(&p, false), reference(&p, false));
    }

    #[test]
    fn depthwise_matches_reference(p in conv_problem(true)) {
        prop_assert_eq!(run_conv(&p, true), reference(&p, true));
    }

    #[test]
    fn dense_is_linear_at_zero_offset((n, _, o, x1, x2, w, b) in dense_problem()) {
        let sum: Vec<i8> = x1.iter().zip(&x2).map(|(a, b)| a + b).collect();
        let f1 = dense_acc(&x1, n, &w, o, &b, 0);
        let f2 = dense_acc(&x2, n, &w, o, &b, 0);
        let f12 = dense_acc(&sum, n, &w, o, &b, 0);
        for i in 0..f12.len() {
            let bias = b[i % o];
            prop_assert_eq!(f1[i] + f2[i] - bias, f12[i]);
        }
    }

    #[test]
    fn dense_commutes_with_batch_order((n, f, o, x, _, w, b) in dense_problem(), z in -128i32..128) {
        let forward = dense_acc(&x, n, &w, o, &b, z);
        let reversed: Vec<i8> = x.chunks(f).rev().flatten().copied().collect();
        let backward = dense_acc(&reversed, n, &w, o, &b, z);
        let undone: Vec<i32> = backward.chunks(o).rev().flatten().copied().collect();
        prop_assert_eq!(forward, undone);
    }

    #[test]
    fn pointwise_conv_is_dense_per_pixel(p in conv_problem(false)) {
        let p = Conv { kh: 1, kw: 1, stride: (1, 1), weights: p.weights[..p.o * p.c].to_vec(), ..p };
        let conv = run_conv(&p, false);
        let dense = dense_acc(&p.x, p.n * p.h * p.w, &p.weights, p.o, &p.bias, p.z);
        prop_assert_eq!(conv, dense.into_iter().map(i64::from).collect::<Vec<_>>());
    }

    #[test]
    fn accumulators_stay_in_the_envelope(
        f in 1usize..2000,
        z in -128i32..128,
        extreme in any::<bool>(),
        seed in any::<u64>(),
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        // Worst case: every input at the far end of the range from Z_x.
        let far = if z >= 0 { -128i8 } else { 127 };
        let x: Vec<i8> = (0..f).map(|_| if extreme { far } else { rng.gen() }).collect();
        let w: Vec<i8> = (0..f).map(|_| if extreme { 127 } else { rng.gen_range(-127..=127) }).collect();
        let acc = dense_acc(&x, 1, &w, 1, &[0], z)[0] as i64;
        prop_assert!(acc.abs() <= f as i64 * 127 * 255);
    }

    #[test]
    fn avgpool_matches_exact_mean(
        (n, h, w, c, ph, pw, x) in (1usize..3, 1usize..4, 1usize..4, 1usize..4, 1usize..4, 1usize..4)
            .prop_flat_map(|(n, a, b, c, ph, pw)| {
                let (h, w) = (a * ph, b * pw);
                (Just(n), Just(h), Just(w), Just(c), Just(ph), Just(pw), prop::collection::vec(any::<i8>(), n * h * w * c))
            }),
        k in 2u32..=32,
    ) {
        let t = QTensor::activation(x.clone(), vec![n, h, w, c], params(0)).unwrap();
        let r = pool_rescaler((ph, pw), k).unwrap();
        let sums = avgpool_sums(&t, (ph, pw)).unwrap();
        let out = avgpool_with(&t, (ph, pw), &r).unwrap();
        for (i, (&s, &y)) in sums.data.iter().zip(&out.data).enumerate() {
            let (item, rest) = (i / (sums.data.len() / n), i % (sums.data.len() / n));
            let (oy, ox, ch) = (rest / (c * w / pw), (rest / c) % (w / pw), rest % c);
            let mut expected = 0i64;
            for ty in 0..ph {
                for tx in 0..pw {
                    expected += x[((item * h + oy * ph + ty) * w + ox * pw + tx) * c + ch] as i64;
                }
            }
            prop_assert_eq!(s as i64, expected);
            // floor(s·m / 2^s + 1/2), exactly, in i128.
            let mean = ((s as i128 * r.m as i128 * 2 + (1i128 << r.s)) >> (r.s + 1)).clamp(-128, 127);
            prop_assert_eq!(y as i128, mean);
        }
    }
}
