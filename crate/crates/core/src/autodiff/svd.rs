use crate::tensor3::{Mat3, Svd3, Vec3};

/// Singular-value gaps `σ_j² − σ_i²` smaller than this are regularised.
pub const SVD_GAP_EPS: f64 = 1e-8;

/// `1/(σ_j² − σ_i²)`, kept finite when the gap collapses.
#[inline]
fn inverse_gap(si: f64, sj: f64) -> f64 {
    let d = sj * sj - si * si;
    if d == 0.0 {
        0.0
    } else if d.abs() < SVD_GAP_EPS {
        1.0 / (d + SVD_GAP_EPS.copysign(d))
    } else {
        1.0 / d
    }
}

/// Adjoint of the input of [`crate::tensor3::svd3`] given adjoints of `U`,
/// `σ` and `V`:
///
/// `Ā = U [diag(σ̄) + (F∘(UᵀŪ − ŪᵀU)) Σ + Σ (F∘(VᵀV̄ − V̄ᵀV))] Vᵀ`
/// with `F_ij = 1/(σ_j² − σ_i²)` off the diagonal.
pub fn svd3_vjp(svd: &Svd3, u_bar: &Mat3, sigma_bar: Vec3, v_bar: &Mat3) -> Mat3 {
    let (u, v) = (&svd.u, &svd.v);
    let s = svd.sigma.to_array();
    let sb = sigma_bar.to_array();
    let ut_ub = u.transpose() * *u_bar;
    let vt_vb = v.transpose() * *v_bar;
    let mut inner = Mat3::ZERO;
    for i in 0..3 {
        for j in 0..3 {
            let val = if i == j {
                sb[i]
            } else {
                let f = inverse_gap(s[i], s[j]);
                let ju = ut_ub.get(i, j) - ut_ub.get(j, i);
                let jv = vt_vb.get(i, j) - vt_vb.get(j, i);
                f * ju * s[j] + s[i] * f * jv
            };
            inner.set(i, j, val);
        }
    }
    *u * inner * v.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor3::svd3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut impl Rng) -> Mat3 {
        Mat3(std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
    }

    fn objective(m: &Mat3, wu: &Mat3, ws: Vec3, wv: &Mat3) -> f64 {
        let s = svd3(m).unwrap();
        s.u.ddot(wu) + s.sigma.dot(ws) + s.v.ddot(wv)
    }

    #[test]
    fn matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mut checked = 0;
        while checked < 100 {
            let m = rand_mat(&mut rng);
            let s = svd3(&m).unwrap();
            let sig = s.sigma;
            // keep away from degenerate and sign-flipping configurations
            let gap = (sig.x - sig.y).min(sig.y - sig.z.abs()).min(sig.z.abs());
            if gap < 0.05 {
                continue;
            }
            let (wu, wv) = (rand_mat(&mut rng), rand_mat(&mut rng));
            let ws = Vec3::new(
                rng.random_range(-1.0..1.0),
                rng.random_range(-1.0..1.0),
                0.3,
            );
            let a = svd3_vjp(&s, &wu, ws, &wv);
            let eps = 1e-5;
            for k in 0..9 {
                let (mut mp, mut mm) = (m, m);
                mp.0[k] += eps;
                mm.0[k] -= eps;
                let fd =
                    (objective(&mp, &wu, ws, &wv) - objective(&mm, &wu, ws, &wv)) / (2.0 * eps);
                let err = (fd - a.0[k]).abs() / fd.abs().max(1.0);
                assert!(err < 1e-4, "entry {k}: fd {fd} vs {}", a.0[k]);
            }
            checked += 1;
        }
    }

    #[test]
    fn sigma_only_adjoint_at_diagonal_is_diagonal() {
        let s = svd3(&Mat3::diag(Vec3::new(2.0, 1.5, 0.7))).unwrap();
        let a = svd3_vjp(&s, &Mat3::ZERO, Vec3::new(0.3, -1.0, 2.0), &Mat3::ZERO);
        assert!((a - Mat3::diag(Vec3::new(0.3, -1.0, 2.0))).max_abs() < 1e-14);
    }

    #[test]
    fn zero_adjoint_gives_zero() {
        let s = svd3(&Mat3::from_rows(
            [1.0, 0.2, 0.0],
            [0.1, 0.9, 0.3],
            [0.0, 0.0, 1.2],
        ))
        .unwrap();
        assert_eq!(
            svd3_vjp(&s, &Mat3::ZERO, Vec3::ZERO, &Mat3::ZERO),
            Mat3::ZERO
        );
    }

    #[test]
    fn degenerate_gaps_stay_finite() {
        let m = Mat3::diag(Vec3::new(1.0 + 1e-9, 1.0, 0.5));
        let s = svd3(&m).unwrap();
        let a = svd3_vjp(
            &s,
            &Mat3::IDENTITY,
            Vec3::splat(1.0),
            &Mat3::from_rows([0.0, 1.0, 0.0], [0.0; 3], [0.0; 3]),
        );
        assert!(a.is_finite());
        let s = svd3(&Mat3::IDENTITY).unwrap();
        let a = svd3_vjp(
            &s,
            &Mat3::skew(Vec3::new(1.0, 2.0, 3.0)),
            Vec3::ZERO,
            &Mat3::IDENTITY,
        );
        assert!(a.is_finite());
    }
}
