//! Property tests over the loss distributions, the action encoding, and the
//! projection geometry.

use proptest::prelude::*;

use vlmad_core::annotation::{ActionFamily, ActionVocabulary};
use vlmad_core::encoding::{decode_action, encode_actions};
use vlmad_core::annotation::StructuredActionAnnotation;
use vlmad_core::losses::temperature_distribution;
use vlmad_core::projection::{
    identity_extrinsics, project_optical, unproject_pixel, CameraCalibration, FrameConvention,
};

fn argmax(v: &[f64]) -> usize {
    v.iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .unwrap()
        .0
}

fn feature_vec() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-5.0f64..5.0, 2..16)
}

proptest! {
    #[test]
    fn distribution_sums_to_one(v in feature_vec(), tau in prop::sample::select(vec![0.04, 0.1, 1.0])) {
        let p = temperature_distribution(&v, tau).unwrap();
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn distribution_is_shift_invariant(v in feature_vec(), shift in -10.0f64..10.0, tau in prop::sample::select(vec![0.04, 0.1, 1.0])) {
        let p = temperature_distribution(&v, tau).unwrap();
        let shifted: Vec<f64> = v.iter().map(|x| x + shift).collect();
        let q = temperature_distribution(&shifted, tau).unwrap();
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn distribution_preserves_argmax(v in feature_vec(), tau in prop::sample::select(vec![0.04, 0.1, 1.0])) {
        // ties in v would make argmax ambiguous; skip those draws
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        prop_assume!(v.iter().filter(|&&x| x == m).count() == 1);
        let p = temperature_distribution(&v, tau).unwrap();
        prop_assert_eq!(argmax(&v), argmax(&p));
    }

    #[test]
    fn sharpening_is_monotone_in_temperature(v in feature_vec()) {
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
        prop_assume!(m - lo > 1e-6);
        prop_assume!(v.iter().filter(|&&x| x == m).count() == 1);
        let sharp = temperature_distribution(&v, 0.04).unwrap();
        let soft = temperature_distribution(&v, 0.1).unwrap();
        let am = argmax(&v);
        prop_assert!(sharp[am] >= soft[am]);
        // strict comparison on the non-argmax tail mass, which stays
        // nonzero where the argmax mass itself saturates to 1.0
        let tail = |tau: f64| -> f64 {
            v.iter().enumerate().filter(|(i, _)| *i != am).map(|(_, x)| ((x - m) / tau).exp()).sum()
        };
        prop_assert!(tail(0.04) < tail(0.1));
    }

    #[test]
    fn gibbs_inequality_for_temperature_distributions(
        (y, f) in (2usize..16).prop_flat_map(|n| (
            prop::collection::vec(-5.0f64..5.0, n),
            prop::collection::vec(-5.0f64..5.0, n),
        )),
    ) {
        // cross-entropy H(p, q) >= H(p), equality iff p == q
        let p = temperature_distribution(&y, 0.04).unwrap();
        let q = temperature_distribution(&f, 0.1).unwrap();
        let ce: f64 = -p.iter().zip(&q).map(|(a, b)| a * (b + 1e-300).ln()).sum::<f64>();
        let h: f64 = -p.iter().map(|a| if *a > 0.0 { a * a.ln() } else { 0.0 }).sum::<f64>();
        prop_assert!(ce >= h - 1e-9);
    }

    #[test]
    fn action_encode_decode_is_identity(
        ci in 0usize..4,
        ti in 0usize..4,
        li in 0usize..5,
    ) {
        let vocab = ActionVocabulary::default();
        let ann = StructuredActionAnnotation {
            control_action: vocab.control[ci].to_string(),
            turn_action: vocab.turn[ti].to_string(),
            lane_action: vocab.lane[li].to_string(),
        };
        let labels = encode_actions(&ann, &vocab).unwrap();
        prop_assert_eq!(decode_action(&labels.y_control, ActionFamily::Control, &vocab).unwrap(), ann.control_action);
        prop_assert_eq!(decode_action(&labels.y_turn, ActionFamily::Turn, &vocab).unwrap(), ann.turn_action);
        prop_assert_eq!(decode_action(&labels.y_lane, ActionFamily::Lane, &vocab).unwrap(), ann.lane_action);
    }
}

fn fixture_calibration() -> CameraCalibration {
    CameraCalibration {
        intrinsics: [
            [1000.0, 0.0, 800.0],
            [0.0, 1000.0, 450.0],
            [0.0, 0.0, 1.0],
        ],
        extrinsics: identity_extrinsics(),
        image_width: 1600,
        image_height: 900,
        frame_convention: FrameConvention::EgoAligned,
    }
}

proptest! {
    #[test]
    fn pixel_round_trip_is_exact(
        x in -50.0f64..50.0,
        y in -30.0f64..30.0,
        depth in 0.5f64..80.0,
    ) {
        let calib = fixture_calibration();
        let (u, v) = project_optical([x, y, depth], &calib);
        let lifted = unproject_pixel(u, v, depth, &calib);
        prop_assert!((lifted[0] - x).abs() < 1e-6);
        prop_assert!((lifted[1] - y).abs() < 1e-6);
        let (u2, v2) = project_optical(lifted, &calib);
        prop_assert!((u2 - u).abs() < 1e-6 && (v2 - v).abs() < 1e-6);
    }

    #[test]
    fn projection_scales_with_depth(
        x in -10.0f64..10.0,
        y in -6.0f64..6.0,
        depth in 1.0f64..40.0,
        factor in 1.1f64..4.0,
    ) {
        // scaling the optical point uniformly leaves the pixel fixed
        let calib = fixture_calibration();
        let (u1, v1) = project_optical([x, y, depth], &calib);
        let (u2, v2) = project_optical([x * factor, y * factor, depth * factor], &calib);
        prop_assert!((u1 - u2).abs() < 1e-6);
        prop_assert!((v1 - v2).abs() < 1e-6);
    }
}
