//! Operation examples and randomized finite-difference checks for every
//! differentiable primitive.

use merit_core::gradcheck::suite::primitive_checks;
use merit_core::gradcheck::{check_fn, randn, run_trials, GradCheckConfig};
use merit_core::tensor::{scaled_dot_product_attention, Interpolation, Tape, Tensor};
use merit_core::{Result, RngStream};
use proptest::prelude::*;

const TRIALS: usize = 50;

fn primitive(name: &str, f: impl FnMut(&mut RngStream, &GradCheckConfig) -> Result<f64>) {
    let report = run_trials(name, TRIALS, &GradCheckConfig::default(), 11, f).unwrap();
    assert!(report.passed(), "{report}");
}

/// Small random extent in `[lo, hi]`.
fn ext(rng: &mut RngStream, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

#[test]
fn conv2d_frozen_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.var(Tensor::full(&[1, 1, 5, 5], 1.0));
    let k = tape.var(Tensor::full(&[1, 1, 3, 3], 1.0));
    let y = x.conv2d(&k, None, 1, 1, 1).unwrap();
    assert_eq!(y.value().at(&[0, 0, 2, 2]), 9.0);
    assert_eq!(y.value().at(&[0, 0, 0, 0]), 4.0);
}

#[test]
fn conv2d_kernel_gradient_on_1x2x4x4() {
    let mut rng = RngStream::new(5, 1);
    for _ in 0..5 {
        let x = randn(&[1, 2, 4, 4], &mut rng);
        let k = randn(&[3, 2, 3, 3], &mut rng);
        let err = check_fn(
            &[x, k],
            |_, v| v[0].conv2d(&v[1], None, 1, 1, 1)?.sum(),
            &GradCheckConfig { input_coords: 54, ..Default::default() },
            &mut rng,
        )
        .unwrap();
        assert!(err <= 1e-4, "{err}");
    }
}

#[test]
fn attention_single_token_returns_value_row() {
    let tape = Tape::<f64>::new();
    let q = tape.var(Tensor::from_f64(&[1, 3], &[0.3, -1.0, 2.0]).unwrap());
    let k = tape.var(Tensor::from_f64(&[1, 3], &[1.0, 1.0, 1.0]).unwrap());
    let v = tape.var(Tensor::from_f64(&[1, 3], &[4.0, 5.0, 6.0]).unwrap());
    let y = scaled_dot_product_attention(&q, &k, &v).unwrap();
    assert_eq!(y.value().data(), &[4.0, 5.0, 6.0]);
}

#[test]
fn attention_identical_keys_average_values() {
    let tape = Tape::<f64>::new();
    let mut rng = RngStream::new(2, 2);
    let q = tape.var(randn(&[4, 3], &mut rng));
    let k = tape.var(Tensor::from_fn(&[4, 3], |i| [0.5, -0.2, 1.0][i % 3]));
    let v = tape.var(randn(&[4, 3], &mut rng));
    let y = scaled_dot_product_attention(&q, &k, &v).unwrap();
    let mean = v.mean_axis(0).unwrap().to_tensor();
    for t in 0..4 {
        for d in 0..3 {
            assert!((y.value().at(&[t, d]) - mean.at(&[0, d])).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_zero_head_dim_rejected() {
    // A zero extent cannot be represented, so feed mismatched operands to hit
    // the validation path and check the zero-dim guard on the shape itself.
    let tape = Tape::<f64>::new();
    let q = tape.var(Tensor::zeros(&[2, 3]));
    let k = tape.var(Tensor::zeros(&[2, 4]));
    assert!(scaled_dot_product_attention(&q, &k, &q).unwrap_err().is_invalid_argument());
    assert!(Tensor::<f64>::new(&[2, 0], vec![]).unwrap_err().is_invalid_argument());
}

#[test]
fn attention_query_gradient() {
    primitive("sdpa", |rng, cfg| {
        let t = ext(rng, 1, 5);
        let d = ext(rng, 1, 4);
        let ins = [randn(&[t, d], rng), randn(&[t, d], rng), randn(&[t, d], rng)];
        check_fn(&ins, |_, v| scaled_dot_product_attention(&v[0], &v[1], &v[2]), cfg, rng)
    });
}

/// Half-pixel bilinear sample of a 2-D grid, written directly from the
/// interpolation formula.
fn bilinear_oracle(src: &[Vec<f64>], out_h: usize, out_w: usize) -> Vec<Vec<f64>> {
    let (h, w) = (src.len(), src[0].len());
    let coord = |i: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, s - i0 as f64)
    };
    (0..out_h)
        .map(|y| {
            let (y0, y1, fy) = coord(y, h, out_h);
            (0..out_w)
                .map(|x| {
                    let (x0, x1, fx) = coord(x, w, out_w);
                    let top = src[y0][x0] * (1.0 - fx) + src[y0][x1] * fx;
                    let bot = src[y1][x0] * (1.0 - fx) + src[y1][x1] * fx;
                    top * (1.0 - fy) + bot * fy
                })
                .collect()
        })
        .collect()
}

#[test]
fn bilinear_2x2_to_4x4_matches_oracle() {
    let src = vec![vec![0.0, 1.0], vec![2.0, 3.0]];
    let oracle = bilinear_oracle(&src, 4, 4);
    // Frozen from the oracle above.
    let frozen = [
        [0.0, 0.25, 0.75, 1.0],
        [0.5, 0.75, 1.25, 1.5],
        [1.5, 1.75, 2.25, 2.5],
        [2.0, 2.25, 2.75, 3.0],
    ];
    for (r, f) in oracle.iter().zip(&frozen) {
        assert_eq!(r.as_slice(), f.as_slice());
    }
    let tape = Tape::<f64>::new();
    let x = tape.var(Tensor::from_f64(&[1, 1, 2, 2], &[0.0, 1.0, 2.0, 3.0]).unwrap());
    let y = x.resize2d(4, 4, Interpolation::Bilinear).unwrap();
    for i in 0..4 {
        for j in 0..4 {
            assert!((y.value().at(&[0, 0, i, j]) - frozen[i][j]).abs() < 1e-12);
        }
    }
}

#[test]
fn bilinear_random_resizes_match_oracle() {
    let mut rng = RngStream::new(8, 8);
    for _ in 0..20 {
        let (h, w, oh, ow) = (ext(&mut rng, 1, 7), ext(&mut rng, 1, 7), ext(&mut rng, 1, 9), ext(&mut rng, 1, 9));
        let t = randn(&[1, 1, h, w], &mut rng);
        let src: Vec<Vec<f64>> = (0..h).map(|i| t.data()[i * w..(i + 1) * w].to_vec()).collect();
        let oracle = bilinear_oracle(&src, oh, ow);
        let tape = Tape::<f64>::new();
        let y = tape.var(t).resize2d(oh, ow, Interpolation::Bilinear).unwrap();
        for i in 0..oh {
            for j in 0..ow {
                assert!((y.value().at(&[0, 0, i, j]) - oracle[i][j]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn resize_identity_and_constant() {
    let tape = Tape::<f64>::new();
    let mut rng = RngStream::new(1, 1);
    let x = tape.var(randn(&[2, 3, 5, 6], &mut rng));
    let same = x.resize2d(5, 6, Interpolation::Bilinear).unwrap();
    assert_eq!(same.value().data(), x.value().data());
    let c = tape.var(Tensor::full(&[1, 2, 5, 3], 0.7));
    for mode in Interpolation::ALL {
        for (oh, ow) in [(1, 1), (4, 9), (10, 6), (5, 3)] {
            let y = c.resize2d(oh, ow, mode).unwrap();
            assert!(y.value().data().iter().all(|v| (v - 0.7).abs() < 1e-12), "{mode}");
        }
    }
}

#[test]
fn grad_of_examples() {
    let tape = Tape::<f64>::new();
    let x = tape.var(Tensor::from_f64(&[4], &[1.0, -2.0, 0.5, 3.0]).unwrap());
    let f = x.mul(&x).unwrap().sum().unwrap();
    let g = tape.grad_of(f, &[x]).unwrap();
    assert_eq!(g[0].data(), &[2.0, -4.0, 1.0, 6.0]);

    let c = tape.var(Tensor::scalar(3.0));
    let g = tape.grad_of(c, &[x]).unwrap();
    assert_eq!(g[0].data(), &[0.0; 4]);
}

#[test]
fn grad_of_sigmoid_matmul_chain() {
    primitive("sigmoid(matmul).sum", |rng, cfg| {
        let (m, k, n) = (ext(rng, 1, 4), ext(rng, 1, 4), ext(rng, 1, 4));
        let ins = [randn(&[m, k], rng), randn(&[k, n], rng)];
        check_fn(&ins, |_, v| v[0].matmul(&v[1])?.sigmoid()?.sum(), cfg, rng)
    });
}

#[test]
fn every_primitive_passes_finite_differences() {
    let mut failed = Vec::new();
    for check in primitive_checks() {
        let report = check.run(TRIALS, 11).unwrap();
        if !report.passed() {
            failed.push(report.to_string());
        }
    }
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn primitive_catalogue_covers_every_op() {
    let names: Vec<&str> = primitive_checks().iter().map(|c| c.name).collect();
    for op in ["matmul", "conv2d", "softmax", "layer_norm", "resize bilinear", "concat", "gelu"] {
        assert!(names.contains(&op), "{op} missing");
    }
}

#[test]
fn nearest_draws_from_input_values() {
    let mut rng = RngStream::new(4, 4);
    let tape = Tape::<f64>::new();
    for _ in 0..20 {
        let (h, w) = (ext(&mut rng, 1, 6), ext(&mut rng, 1, 6));
        let x = randn(&[1, 1, h, w], &mut rng);
        let vals = x.data().to_vec();
        let y = tape
            .var(x)
            .resize2d(ext(&mut rng, 1, 12), ext(&mut rng, 1, 12), Interpolation::Nearest)
            .unwrap();
        assert!(y.value().data().iter().all(|v| vals.contains(v)));
    }
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let tape = Tape::<f32>::new();
        let mut rng = RngStream::new(1, 2);
        let x = tape.var(randn(&[2, 3, 8, 8], &mut rng).cast());
        let k = tape.var(randn(&[4, 3, 3, 3], &mut rng).cast());
        let y = x.conv2d(&k, None, 1, 1, 1).unwrap().gelu().unwrap().softmax(1).unwrap();
        let s = y.resize2d(5, 5, Interpolation::Bicubic).unwrap().sum().unwrap();
        let g = tape.grad_of(s, &[x, k]).unwrap();
        (y.to_tensor(), g)
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(vals in proptest::collection::vec(-30.0f64..30.0, 1..40), split in 1usize..5) {
        let n = vals.len();
        let lanes = if n % split == 0 { split } else { 1 };
        let tape = Tape::<f64>::new();
        let x = tape.var(Tensor::new(&[lanes, n / lanes], vals).unwrap());
        let y = x.softmax(1).unwrap();
        let v = y.value();
        prop_assert!(v.data().iter().all(|&p| p >= 0.0));
        for row in v.data().chunks(n / lanes) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
