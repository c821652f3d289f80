mod common;

use common::checks::{linear_scene, noisy_detections, tracker_consistency};

use orvit::geometry::BBox;
use orvit::tracker::{
    id_consistency, kalman_predict, kalman_update, observation, track_clip, transition, Detection, KalmanParams, SortParams,
    TrackState,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn noiseless_linear_scenes_keep_every_id() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for k in 0..300 {
        let gt = linear_scene(1 + k % 3, 16, &mut rng);
        let tracks = track_clip(&noisy_detections(&gt, 0.0, &mut rng), 16, SortParams::default()).unwrap();
        assert_eq!(id_consistency(&gt, &tracks), 1.0, "scene {k}");
        assert_eq!(tracks.len(), gt.objects(), "scene {k}");
    }
}

#[test]
fn jittered_linear_scenes_keep_ids() {
    let (c, _) = tracker_consistency(0.01, 300, 2);
    assert!(c >= 0.99, "{c}");
}

#[test]
fn two_predicts_equal_squared_transition() {
    let kp = KalmanParams { proc_pos: 0.0, proc_vel: 0.0, ..KalmanParams::default() };
    let det = Detection { frame: 0, bbox: BBox::new(0.2, 0.3, 0.4, 0.6), score: 1.0 };
    let mut t = TrackState::new(0, &det, &kp);
    t.x[4] = 0.01;
    t.x[5] = -0.02;
    t.x[6] = 0.001;
    let f = transition();
    let twice = kalman_predict(&kalman_predict(&t, &kp), &kp);
    let f2 = f * f;
    assert!((twice.x - f2 * t.x).abs().max() < 1e-15);
    assert!((twice.p - f2 * t.p * f2.transpose()).abs().max() < 1e-15);
}

#[test]
fn update_matches_information_form() {
    let kp = KalmanParams::default();
    let r = kp.measurement_noise();
    let h = observation();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let det = Detection { frame: 0, bbox: common::random_box(&mut rng, 0.1), score: 1.0 };
        let mut t = TrackState::new(0, &det, &kp);
        for _ in 0..rng.gen_range(1..4) {
            t = kalman_predict(&t, &kp);
        }
        let z = common::random_box(&mut rng, 0.1);
        let post = kalman_update(&t, &z, &kp).unwrap();
        let p_inv = t.p.try_inverse().unwrap() + h.transpose() * r.try_inverse().unwrap() * h;
        let p_info = p_inv.try_inverse().unwrap();
        let scale = p_info.abs().max();
        assert!((post.p - p_info).abs().max() < 1e-9 * scale);
        let eig = post.p.symmetric_eigen().eigenvalues;
        assert!(eig.min() > 0.0);
    }
}

#[test]
fn covariance_stays_positive_over_long_tracks() {
    let kp = KalmanParams::default();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let det = Detection { frame: 0, bbox: BBox::new(0.1, 0.1, 0.3, 0.3), score: 1.0 };
    let mut t = TrackState::new(0, &det, &kp);
    for k in 0..500 {
        t = kalman_predict(&t, &kp);
        if k % 3 != 0 {
            let c = 0.2 + 0.0005 * k as f64 + rng.gen_range(-0.005..0.005);
            t = kalman_update(&t, &BBox::from_center(c, 0.2, 0.2, 0.2), &kp).unwrap();
        }
        assert!(t.p.symmetric_eigen().eigenvalues.min() > 0.0, "step {k}");
    }
}
