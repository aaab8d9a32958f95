use std::f64::consts::PI;

use gpmatch::geometry::{mat3_mul, rotation_from_axis_angle, NormalizedGrid, WarpField};
use gpmatch::metrics::{
    aepe, auc, conf_loss, endpoint_errors, map_at, pck, pose_error, precision_curve, rotation_error, total_loss, translation_error, warp_loss, ErrorSample,
    ScaleTerms, CONF_LOSS_WEIGHT,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const DIMS: (usize, usize) = (100, 200);

/// Reference = identity grid, prediction offset by the given pixel vectors.
fn offset_pair(offsets_px: &[[f64; 2]]) -> (WarpField<f64>, WarpField<f64>) {
    let n = offsets_px.len();
    let g = NormalizedGrid::<f64>::new(1, n).unwrap();
    let reference = WarpField::identity(&g);
    let flow = g
        .coords()
        .iter()
        .zip(offsets_px)
        .map(|(p, o)| [p[0] + o[0] * 2.0 / DIMS.1 as f64, p[1] + o[1] * 2.0 / DIMS.0 as f64])
        .collect();
    (WarpField::new(1, n, flow, vec![1.0; n]).unwrap(), reference)
}

#[test]
fn pck_hand_counts() {
    let (pred, reference) = offset_pair(&[[0.5, 0.0], [0.0, 2.0], [4.0, 0.0]]);
    let all = [true; 3];
    assert!((pck(&pred, &reference, &all, 3.0, DIMS).unwrap() - 2.0 / 3.0).abs() < 1e-12);
    assert_eq!(pck(&reference, &reference, &all, 0.1, DIMS).unwrap(), 1.0);
    let (two, reference) = offset_pair(&[[2.0, 0.0]; 5]);
    assert_eq!(pck(&two, &reference, &[true; 5], 1.0, DIMS).unwrap(), 0.0);
    assert!(pck(&two, &reference, &[false; 5], 1.0, DIMS).is_err());
}

#[test]
fn aepe_hand_values() {
    let (pred, reference) = offset_pair(&[[3.0, 4.0]; 6]);
    assert!((aepe(&pred, &reference, &[true; 6], DIMS).unwrap() - 5.0).abs() < 1e-9);
    assert_eq!(aepe(&reference, &reference, &[true; 6], DIMS).unwrap(), 0.0);
    let (mixed, reference) = offset_pair(&[[1.0, 0.0], [9.0, 0.0], [3.0, 0.0], [9.0, 0.0]]);
    let half = [true, false, true, false];
    assert!((aepe(&mixed, &reference, &half, DIMS).unwrap() - 2.0).abs() < 1e-9);
    let e = endpoint_errors(&mixed, &reference, &half, DIMS).unwrap();
    assert_eq!(e.valid_errors().len(), 2);
}

/// Precision(t) = fraction strictly below t, integrated by a midpoint sum.
fn riemann_auc(errors: &[f64], alpha: f64, steps: usize) -> f64 {
    let dt = alpha / steps as f64;
    (0..steps)
        .map(|k| {
            let t = (k as f64 + 0.5) * dt;
            errors.iter().filter(|&&e| e < t).count() as f64 / errors.len() as f64
        })
        .sum::<f64>()
        * dt
        / alpha
}

#[test]
fn auc_against_fine_riemann_sum() {
    let e = [1.0, 2.0, 3.0, 4.0];
    let got = auc(&ErrorSample::new(e.to_vec()).unwrap(), 4.0).unwrap();
    assert!((got - riemann_auc(&e, 4.0, 10_000)).abs() < 1e-6, "{got}");
    assert!((got - 0.375).abs() < 1e-12);
    assert_eq!(auc(&ErrorSample::new(vec![0.0; 5]).unwrap(), 3.0).unwrap(), 1.0);
    assert_eq!(auc(&ErrorSample::new(vec![7.0, 9.0]).unwrap(), 3.0).unwrap(), 0.0);
    assert!(auc(&ErrorSample::<f64>::new(vec![]).unwrap(), 3.0).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..10 {
        let e: Vec<f64> = (0..30).map(|_| (rng.random_range(0.0..12.0f64) * 4.0).round() / 4.0).collect();
        let got = auc(&ErrorSample::new(e.clone()).unwrap(), 10.0).unwrap();
        assert!((got - riemann_auc(&e, 10.0, 40_000)).abs() < 1e-6);
    }
}

#[test]
fn map_hand_counts() {
    let e = ErrorSample::<f64>::new(vec![3.0, 8.0, 15.0, 25.0]).unwrap();
    assert!((map_at(&e, 20.0).unwrap() - 0.5).abs() < 1e-12);
    assert!((map_at(&e, 10.0).unwrap() - 0.375).abs() < 1e-12);
    assert_eq!(map_at(&e, 5.0).unwrap(), 0.25);
    let c = precision_curve(&e, &[5.0]).unwrap();
    assert_eq!(map_at(&e, 5.0).unwrap(), c.precision[0]);
    let zeros = ErrorSample::new(vec![0.0; 3]).unwrap();
    for a in [5.0, 10.0, 20.0] {
        assert_eq!(map_at(&zeros, a).unwrap(), 1.0);
    }
    assert!(map_at(&e, 15.0).is_err());
}

/// Rotation angle from the skew part and trace: atan2(‖axis‖, cos).
fn axis_angle_oracle(r: &[[f64; 3]; 3], r_hat: &[[f64; 3]; 3]) -> f64 {
    let mut rel = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            rel[i][j] = (0..3).map(|k| r[k][i] * r_hat[k][j]).sum();
        }
    }
    let s = [rel[2][1] - rel[1][2], rel[0][2] - rel[2][0], rel[1][0] - rel[0][1]];
    let sin = 0.5 * (s[0] * s[0] + s[1] * s[1] + s[2] * s[2]).sqrt();
    let cos = 0.5 * (rel[0][0] + rel[1][1] + rel[2][2] - 1.0);
    sin.atan2(cos)
}

#[test]
fn rotation_error_examples() {
    let r = rotation_from_axis_angle([0.3, -1.0, 0.5], 0.7).unwrap();
    assert!(rotation_error(&r, &r).unwrap() < 1e-7);
    let flip = rotation_from_axis_angle([1.0, 2.0, -0.5], PI).unwrap();
    let r_hat = mat3_mul(&r, &flip);
    assert!((rotation_error(&r, &r_hat).unwrap() - PI).abs() < 1e-9);
    let z10 = rotation_from_axis_angle([0.0, 0.0, 1.0], 10f64.to_radians()).unwrap();
    let e = rotation_error(&r, &mat3_mul(&r, &z10)).unwrap();
    assert!((e - 10.0 * PI / 180.0).abs() < 1e-9);
    let mut bad = r;
    bad[0][0] += 0.01;
    assert!(rotation_error(&bad, &r).is_err());
}

#[test]
fn translation_and_pose_examples() {
    let t = [0.2, -0.4, 1.0];
    assert_eq!(translation_error(&t, &t).unwrap(), 0.0);
    assert!(translation_error(&t, &[-0.2, 0.4, -1.0]).unwrap() < 1e-7);
    assert!((translation_error(&[1.0, 0.0, 0.0], &[0.0, 3.0, 0.0]).unwrap() - PI / 2.0).abs() < 1e-12);
    assert!(translation_error(&t, &[0.0; 3]).is_err());

    let id = rotation_from_axis_angle([0.0, 0.0, 1.0], 0.0).unwrap();
    let r01 = rotation_from_axis_angle([0.0, 1.0, 0.0], 0.1).unwrap();
    let t03 = [0.3f64.cos(), 0.3f64.sin(), 0.0];
    let e = pose_error(&id, &[1.0, 0.0, 0.0], &r01, &t03).unwrap();
    assert!((e - 0.3).abs() < 1e-9);
    assert!(pose_error(&id, &t, &id, &t).unwrap() < 1e-7);
}

#[test]
fn pose_error_recomputed_from_parts() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut v3 = || -> [f64; 3] { [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)] };
    for _ in 0..50 {
        let (a1, a2, t, t_hat) = (v3(), v3(), v3(), v3());
        let r = rotation_from_axis_angle(a1, 1.3 * a2[0].abs() + 0.1).unwrap();
        let r_hat = rotation_from_axis_angle(a2, 2.0 * a1[1].abs() + 0.2).unwrap();
        let e = pose_error(&r, &t, &r_hat, &t_hat).unwrap();
        let er = rotation_error(&r, &r_hat).unwrap();
        let cos = (t[0] * t_hat[0] + t[1] * t_hat[1] + t[2] * t_hat[2]) / ((t.iter().map(|v| v * v).sum::<f64>() * t_hat.iter().map(|v| v * v).sum::<f64>()).sqrt());
        assert!((e - er.max(cos.abs().acos())).abs() < 1e-12);
        assert!((er - axis_angle_oracle(&r, &r_hat)).abs() < 1e-7);
        assert!((er - rotation_error(&r_hat, &r).unwrap()).abs() < 1e-12);
    }
}

#[test]
fn warp_loss_examples() {
    let g = NormalizedGrid::<f64>::new(3, 4).unwrap();
    let reference = WarpField::identity(&g);
    let mut pred = reference.clone();
    pred.flow[5] = [pred.flow[5][0] + 0.3, pred.flow[5][1] + 0.4];
    let mut p = vec![0.0; 12];
    assert_eq!(warp_loss(&pred, &reference, &p).unwrap(), 0.0);
    p[5] = 1.0;
    assert!((warp_loss(&pred, &reference, &p).unwrap() - 0.5 / 12.0).abs() < 1e-12);
    assert_eq!(warp_loss(&reference, &reference, &[1.0; 12]).unwrap(), 0.0);
}

#[test]
fn conf_loss_examples() {
    let p = [0.0, 1.0, 1.0, 0.0];
    assert!(conf_loss(&p, &p).unwrap() <= 1e-6);
    assert!((conf_loss(&[0.5; 4], &p).unwrap() - 2f64.ln()).abs() < 1e-12);
    let wrong: Vec<f64> = p.iter().map(|v| 1.0 - v).collect();
    assert!(conf_loss(&wrong, &p).unwrap() >= 16.0);
}

#[test]
fn total_loss_weighting_and_gate() {
    let g = NormalizedGrid::<f64>::new(4, 4).unwrap();
    let reference = WarpField::identity(&g);
    let p = vec![1.0; 16];
    let perfect = [ScaleTerms { pred: &reference, reference: &reference, confidence: &p, mask: &p }];
    assert!(total_loss(&perfect, 1.0).unwrap() <= 1e-6);

    let half = vec![0.5; 16];
    let conf_only = [ScaleTerms { pred: &reference, reference: &reference, confidence: &half, mask: &p }];
    let expected = CONF_LOSS_WEIGHT * conf_loss(&half, &p).unwrap();
    assert!((total_loss(&conf_only, 1.0).unwrap() - expected).abs() < 1e-15);

    // coarse warp off by 2 cells everywhere, gate 1 cell: the fine term sees an all-zero mask
    let coarse_g = NormalizedGrid::<f64>::new(2, 2).unwrap();
    let coarse_ref = WarpField::identity(&coarse_g);
    let coarse_pred = WarpField::new(2, 2, coarse_g.coords().iter().map(|c| [c[0] + 2.0, c[1]]).collect(), vec![1.0; 4]).unwrap();
    let fine_pred = WarpField::new(4, 4, g.coords().iter().map(|c| [c[0] + 0.3, c[1]]).collect(), vec![1.0; 16]).unwrap();
    let ones = vec![1.0; 4];
    let scales = [
        ScaleTerms { pred: &coarse_pred, reference: &coarse_ref, confidence: &ones, mask: &ones },
        ScaleTerms { pred: &fine_pred, reference: &reference, confidence: &p, mask: &p },
    ];
    let coarse_only = warp_loss(&coarse_pred, &coarse_ref, &ones).unwrap() + CONF_LOSS_WEIGHT * conf_loss(&ones, &ones).unwrap();
    let fine_gated = CONF_LOSS_WEIGHT * conf_loss(&p, &[0.0; 16]).unwrap();
    assert!((total_loss(&scales, 1.0).unwrap() - coarse_only - fine_gated).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn auc_bounded_and_monotone(e in prop::collection::vec(0.0f64..15.0, 1..40), bump in 0.0f64..3.0, alpha in 0.5f64..12.0) {
        let a = auc(&ErrorSample::new(e.clone()).unwrap(), alpha).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        let grown: Vec<f64> = e.iter().map(|v| v + bump).collect();
        let b = auc(&ErrorSample::new(grown).unwrap(), alpha).unwrap();
        prop_assert!(b <= a + 1e-12);
    }

    #[test]
    fn equal_errors_give_linear_precision(v in 0.0f64..10.0, alpha in 0.5f64..12.0) {
        // a single jump at v: area is (alpha - v) / alpha when v < alpha
        let a = auc(&ErrorSample::new(vec![v; 7]).unwrap(), alpha).unwrap();
        let want = if v < alpha { (alpha - v) / alpha } else { 0.0 };
        prop_assert!((a - want).abs() < 1e-12);
    }

    #[test]
    fn aggregates_ignore_order(e in prop::collection::vec(0.0f64..25.0, 2..30), seed in any::<u64>()) {
        let mut shuffled = e.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let (a, b) = (ErrorSample::new(e).unwrap(), ErrorSample::new(shuffled).unwrap());
        prop_assert!((auc(&a, 10.0).unwrap() - auc(&b, 10.0).unwrap()).abs() < 1e-12);
        prop_assert_eq!(map_at(&a, 20.0).unwrap(), map_at(&b, 20.0).unwrap());
    }
}
