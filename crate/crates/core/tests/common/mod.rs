//! Reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unsq::layers::{conv2d, conv_transpose2d, max_pool2d, Padding};
use unsq::metrics::iou;
use unsq::{Shape, Tape, Tensor};

pub fn random(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Direct nested-loop cross-correlation with TF-style "same" padding.
pub fn conv_reference(x: &Tensor, w: &Tensor, b: &Tensor, padding: Padding, stride: usize) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (oh, ow, pt, pl) = match padding {
        Padding::Valid => ((xs.h - ws.h) / stride + 1, (xs.w - ws.w) / stride + 1, 0, 0),
        Padding::Same => {
            let oh = xs.h.div_ceil(stride);
            let ow = xs.w.div_ceil(stride);
            let ph = ((oh - 1) * stride + ws.h).saturating_sub(xs.h);
            let pw = ((ow - 1) * stride + ws.w).saturating_sub(xs.w);
            (oh, ow, ph / 2, pw / 2)
        }
    };
    let mut out = Tensor::zeros(Shape::new(xs.n, ws.n, oh, ow));
    for n in 0..xs.n {
        for o in 0..ws.n {
            for i in 0..oh {
                for j in 0..ow {
                    let mut acc = b.at(o, 0, 0, 0);
                    for c in 0..xs.c {
                        for a in 0..ws.h {
                            for d in 0..ws.w {
                                let r = (i * stride + a) as isize - pt as isize;
                                let q = (j * stride + d) as isize - pl as isize;
                                if r >= 0 && q >= 0 && (r as usize) < xs.h && (q as usize) < xs.w {
                                    acc += x.at(n, c, r as usize, q as usize) * w.at(o, c, a, d);
                                }
                            }
                        }
                    }
                    let idx = out.shape().index(n, o, i, j);
                    out.data_mut()[idx] = acc;
                }
            }
        }
    }
    out
}

pub fn set_iou(pred: &BTreeSet<usize>, truth: &BTreeSet<usize>) -> f64 {
    let union = pred.union(truth).count();
    if union == 0 {
        return 1.0;
    }
    pred.intersection(truth).count() as f64 / union as f64
}

pub fn to_set(mask: &[f64]) -> BTreeSet<usize> {
    mask.iter()
        .enumerate()
        .filter(|(_, &v)| v == 1.0)
        .map(|(i, _)| i)
        .collect()
}

/// Layer-by-layer tally of the five-level U-net, written out independently.
pub fn enumerated_count(c: usize, batch_norm: bool, paper_compat: bool) -> usize {
    let w = |l: usize| c << l;
    let conv = |k: usize, cin: usize, cout: usize| k * k * cin * cout + cout;
    let mut total = 0;
    let mut extra_3x3 = 0;
    let mut cin = 1;
    for l in 0..5 {
        total += conv(3, cin, w(l)) + conv(3, w(l), w(l));
        extra_3x3 += 2 * w(l);
        cin = w(l);
    }
    let bn = if batch_norm { 2 * extra_3x3 } else { 0 };
    for l in (0..4).rev() {
        total += conv(2, w(l + 1), w(l)) + conv(3, 2 * w(l), w(l)) + conv(3, w(l), w(l));
        extra_3x3 += 2 * w(l);
    }
    total += conv(1, w(0), 2);
    if paper_compat {
        total + 2 * extra_3x3
    } else {
        total + bn
    }
}

/// Random conv2d cases (inputs up to 6x6) against [`conv_reference`];
/// returns the largest absolute deviation.
pub fn conv2d_sweep(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..cases {
        let k = rng.random_range(1..=3usize);
        let padding = if case % 2 == 0 {
            Padding::Same
        } else {
            Padding::Valid
        };
        let stride = rng.random_range(1..=2usize);
        let h = rng.random_range(k..=6usize);
        let w = rng.random_range(k..=6usize);
        let (n, ci, co) = (
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        );
        let x = random(Shape::new(n, ci, h, w), &mut rng);
        let wt = random(Shape::new(co, ci, k, k), &mut rng);
        let b = random(Shape::new(co, 1, 1, 1), &mut rng);
        let expect = conv_reference(&x, &wt, &b, padding, stride);

        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(wt), tape.constant(b));
        let y = conv2d(&mut tape, xv, wv, bv, padding, stride).unwrap();
        let got = tape.value(y);
        if got.shape() != expect.shape() {
            return f64::INFINITY;
        }
        worst = worst.max(got.max_abs_diff(&expect));
    }
    worst
}

/// Random transposed convolutions against a per-pixel scatter.
pub fn conv_transpose2d_sweep(cases: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (h, w) = (rng.random_range(1..=3usize), rng.random_range(1..=3usize));
        let (n, ci, co) = (
            rng.random_range(1..=2),
            rng.random_range(1..=3),
            rng.random_range(1..=3),
        );
        let x = random(Shape::new(n, ci, h, w), &mut rng);
        let wt = random(Shape::new(co, ci, 2, 2), &mut rng);
        let b = random(Shape::new(co, 1, 1, 1), &mut rng);

        // Each input pixel scatters a weighted 2x2 patch onto the output.
        let mut expect = Tensor::zeros(Shape::new(n, co, 2 * h, 2 * w));
        let es = expect.shape();
        for s in 0..n {
            for o in 0..co {
                for r in 0..2 * h {
                    for q in 0..2 * w {
                        expect.data_mut()[es.index(s, o, r, q)] = b.at(o, 0, 0, 0);
                    }
                }
                for c in 0..ci {
                    for i in 0..h {
                        for j in 0..w {
                            for a in 0..2 {
                                for d in 0..2 {
                                    expect.data_mut()[es.index(s, o, 2 * i + a, 2 * j + d)] +=
                                        x.at(s, c, i, j) * wt.at(o, c, a, d);
                                }
                            }
                        }
                    }
                }
            }
        }

        let mut tape = Tape::new();
        let (xv, wv, bv) = (tape.constant(x), tape.constant(wt), tape.constant(b));
        let y = conv_transpose2d(&mut tape, xv, wv, bv, 2).unwrap();
        worst = worst.max(tape.value(y).max_abs_diff(&expect));
    }
    worst
}

/// Random 2x2 max pools with many ties; returns the number of output
/// cells whose value or winning index disagrees with a window scan.
pub fn max_pool_sweep(cases: usize, seed: u64) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = 0;
    for _ in 0..cases {
        let (h, w) = (2 * rng.random_range(1..=3usize), 2 * rng.random_range(1..=3usize));
        let (n, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
        let x = Tensor::from_fn(Shape::new(n, c, h, w), |_| rng.random_range(0..4) as f64);
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let (y, argmax) = max_pool2d(&mut tape, xv).unwrap();
        let got = tape.value(y);
        let mut k = 0;
        for s in 0..n {
            for ch in 0..c {
                for i in 0..h / 2 {
                    for j in 0..w / 2 {
                        let cells = [(0, 0), (0, 1), (1, 0), (1, 1)]
                            .map(|(a, d)| x.shape().index(s, ch, 2 * i + a, 2 * j + d));
                        let max = cells.iter().map(|&f| x.data()[f]).fold(f64::MIN, f64::max);
                        let first = *cells.iter().find(|&&f| x.data()[f] == max).unwrap();
                        if got.at(s, ch, i, j) != max || argmax[k] != first {
                            bad += 1;
                        }
                        k += 1;
                    }
                }
            }
        }
    }
    bad
}

/// All 2^16 fillings of the top-left 4x4 quadrant of an 8x8 prediction,
/// against fixed truths (empty, full and random). Returns the number of
/// pairs and the number of disagreements with the set oracle.
pub fn iou_quadrant_sweep(seed: u64) -> (usize, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = Shape::new(1, 1, 8, 8);
    let mut truths = vec![vec![0.0; 64], vec![1.0; 64]];
    for _ in 0..3 {
        truths.push((0..64).map(|_| rng.random_range(0..2) as f64).collect());
    }
    let quadrant: Vec<usize> = (0..4).flat_map(|r| (0..4).map(move |c| r * 8 + c)).collect();
    let (mut pairs, mut bad) = (0, 0);
    for (t_idx, truth) in truths.iter().enumerate() {
        let truth_set = to_set(truth);
        let truth_t = Tensor::new(shape, truth.clone()).unwrap();
        // Rest of the prediction is either empty or random.
        let base: Vec<f64> = if t_idx % 2 == 0 {
            vec![0.0; 64]
        } else {
            (0..64).map(|_| rng.random_range(0..2) as f64).collect()
        };
        for bits in 0..1u32 << 16 {
            let mut pred = base.clone();
            for (b, &idx) in quadrant.iter().enumerate() {
                pred[idx] = ((bits >> b) & 1) as f64;
            }
            let expect = set_iou(&to_set(&pred), &truth_set);
            let pred_t = Tensor::new(shape, pred).unwrap();
            pairs += 1;
            if iou(&pred_t, &truth_t).unwrap() != expect {
                bad += 1;
            }
        }
    }
    (pairs, bad)
}
