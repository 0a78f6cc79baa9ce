//! Brute-force reference implementations checked against the library.

mod common;

use common::{enumerated_count, set_iou, to_set};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unsq::metrics::class_averaged_iou;
use unsq::unet::{count_params_with, ParamCountMode, UnetConfig, UnetModel};
use unsq::{Shape, Tensor};

#[test]
fn conv2d_matches_nested_loops() {
    assert!(common::conv2d_sweep(300, 11) < 1e-12);
}

#[test]
fn conv_transpose2d_matches_scatter() {
    assert!(common::conv_transpose2d_sweep(200, 12) < 1e-12);
}

#[test]
fn max_pool_matches_window_maximum() {
    assert_eq!(common::max_pool_sweep(300, 13), 0);
}

#[test]
fn iou_matches_set_oracle_on_quadrant_enumeration() {
    let (pairs, bad) = common::iou_quadrant_sweep(14);
    assert_eq!(pairs, 5 << 16);
    assert_eq!(bad, 0);
}

#[test]
fn class_averaged_iou_is_mean_of_both_classes() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let shape = Shape::new(2, 1, 4, 4);
    for _ in 0..500 {
        let p: Vec<f64> = (0..32).map(|_| rng.random_range(0..2) as f64).collect();
        let t: Vec<f64> = (0..32).map(|_| rng.random_range(0..2) as f64).collect();
        let inv = |v: &[f64]| v.iter().map(|x| 1.0 - x).collect::<Vec<_>>();
        let expect =
            0.5 * (set_iou(&to_set(&p), &to_set(&t)) + set_iou(&to_set(&inv(&p)), &to_set(&inv(&t))));
        let got =
            class_averaged_iou(&Tensor::new(shape, p).unwrap(), &Tensor::new(shape, t).unwrap()).unwrap();
        assert!((got - expect).abs() < 1e-15);
    }
}

#[test]
fn parameter_counts_match_closed_form_and_enumeration() {
    for c in [1usize, 2, 3, 4, 8, 16, 32, 64] {
        let closed = 7574 * c * c + 118 * c + 2;
        assert_eq!(enumerated_count(c, false, false), closed);
        for bn in [false, true] {
            let cfg = UnetConfig::new(c).with_batch_norm(bn);
            assert_eq!(
                count_params_with(&cfg, ParamCountMode::Plain),
                enumerated_count(c, bn, false)
            );
            assert_eq!(
                count_params_with(&cfg, ParamCountMode::PaperCompat),
                closed + 184 * c
            );
        }
    }
    assert_eq!(enumerated_count(64, false, true), 31_042_434);
    assert_eq!(enumerated_count(4, false, true), 122_394);
    assert_eq!(enumerated_count(2, false, true), 30_902);
}

#[test]
fn built_models_hold_the_counted_parameters() {
    for c in [1usize, 2, 4] {
        for bn in [false, true] {
            let cfg = UnetConfig::new(c).with_batch_norm(bn);
            let model = UnetModel::<f64>::build(&cfg, 0).unwrap();
            let held: usize = model.named_parameters().iter().map(|(_, t)| t.len()).sum();
            assert_eq!(held, enumerated_count(c, bn, false));
        }
    }
}
