use latent_mpm::tensor3::{svd3, Mat3, Vec3};
use proptest::prelude::*;

fn matrix() -> impl Strategy<Value = Mat3> {
    prop::array::uniform9(-3.0..3.0f64).prop_map(Mat3)
}

fn orthonormal(m: &Mat3) -> f64 {
    (m.transpose() * *m - Mat3::IDENTITY).max_abs()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn reconstructs_with_proper_rotations(m in matrix()) {
        prop_assume!(m.frobenius() > 1e-6);
        let d = svd3(&m).unwrap();
        prop_assert!((d.reconstruct() - m).frobenius() / m.frobenius() < 1e-9);
        prop_assert!((d.u.det() - 1.0).abs() < 1e-9);
        prop_assert!((d.v.det() - 1.0).abs() < 1e-9);
        prop_assert!(orthonormal(&d.u) < 1e-9 && orthonormal(&d.v) < 1e-9);
        prop_assert!(d.sigma.x >= d.sigma.y && d.sigma.y >= d.sigma.z.abs());
        prop_assert!(d.sigma.z >= 0.0 || m.det() < 0.0);
    }

    #[test]
    fn repeated_calls_agree_bitwise(m in matrix()) {
        let a = svd3(&m).unwrap();
        let b = svd3(&m).unwrap();
        prop_assert_eq!(a.u.0, b.u.0);
        prop_assert_eq!(a.v.0, b.v.0);
        prop_assert_eq!(a.sigma.to_array(), b.sigma.to_array());
    }

    #[test]
    fn small_perturbations_move_factors_slightly(m in matrix(), dir in prop::array::uniform9(-1.0..1.0f64)) {
        let d = svd3(&m).unwrap();
        let s = d.sigma;
        prop_assume!((s.x - s.y).min(s.y - s.z.abs()).min(s.z.abs()) > 1e-2);
        let dir = Mat3(dir);
        prop_assume!(dir.frobenius() > 1e-3);
        let delta = dir * (1e-6 / dir.frobenius());
        let e = svd3(&(m + delta)).unwrap();
        let change = (e.u - d.u)
            .max_abs()
            .max((e.v - d.v).max_abs())
            .max((e.sigma - d.sigma).max_abs());
        prop_assert!(change < 1e-4, "factor change {change:e}");
    }
}

#[test]
fn diagonal_input_keeps_its_values() {
    let d = svd3(&Mat3::diag(Vec3::new(0.5, 3.0, 2.0))).unwrap();
    assert!((d.sigma - Vec3::new(3.0, 2.0, 0.5)).max_abs() < 1e-12);
}
