use gazefit::model::rodrigues;
use gazefit::scalar::{det3, mat_mul, mat_vec, transpose};
use gazefit::vergence::GazeRay;
use gazefit::{project, solve_vergence, CameraIntrinsics};
use proptest::prelude::*;

fn vec3(range: std::ops::Range<f64>) -> impl Strategy<Value = [f64; 3]> {
    [range.clone(), range.clone(), range]
}

proptest! {
    #[test]
    fn rodrigues_is_a_rotation_fixing_its_axis(r in vec3(-10.0..10.0)) {
        let rot = rodrigues(r);
        let rtr = mat_mul(&transpose(&rot), &rot);
        for (i, row) in rtr.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let id = if i == j { 1.0 } else { 0.0 };
                prop_assert!((v - id).abs() < 1e-12);
            }
        }
        prop_assert!((det3(&rot) - 1.0).abs() < 1e-12);
        let fixed = mat_vec(&rot, r);
        for k in 0..3 {
            prop_assert!((fixed[k] - r[k]).abs() < 1e-12 * (1.0 + r[k].abs()));
        }
    }

    #[test]
    fn rodrigues_negated_is_transpose(r in vec3(-3.0..3.0)) {
        let a = rodrigues(r.map(|v| -v));
        let b = transpose(&rodrigues(r));
        for i in 0..3 {
            for j in 0..3 {
                prop_assert!((a[i][j] - b[i][j]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn projection_ignores_depth_scaling(
        xy in [-1.0f64..1.0, -1.0f64..1.0],
        z in 0.1f64..5.0,
        lambda in 0.1f64..10.0,
    ) {
        let cam = CameraIntrinsics::default();
        let p = [xy[0], xy[1], z];
        let a = project(&cam, p).unwrap();
        let b = project(&cam, p.map(|v| v * lambda)).unwrap();
        for k in 0..2 {
            prop_assert!((a[k] - b[k]).abs() <= 1e-9 * (1.0 + a[k].abs()));
        }
    }

    #[test]
    fn vergence_is_symmetric_in_the_eyes(
        ol in vec3(-1.0..1.0),
        or in vec3(-1.0..1.0),
        gl in vec3(-1.0..1.0),
        gr in vec3(-1.0..1.0),
    ) {
        let (Ok(l), Ok(r)) = (GazeRay::new(ol, gl), GazeRay::new(or, gr)) else {
            return Ok(());
        };
        let (Ok(a), Ok(b)) = (solve_vergence(&l, &r), solve_vergence(&r, &l)) else {
            return Ok(());
        };
        let scale = 1.0 + a.k_left.abs() + a.k_right.abs();
        prop_assert!((a.distance - b.distance).abs() < 1e-9 * scale);
        prop_assert!((a.k_left - b.k_right).abs() < 1e-9 * scale);
        prop_assert!((a.k_right - b.k_left).abs() < 1e-9 * scale);
        for k in 0..3 {
            prop_assert!((a.target[k] - b.target[k]).abs() < 1e-9 * scale);
        }
    }
}
