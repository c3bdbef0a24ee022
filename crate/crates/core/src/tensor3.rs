//! Small fixed-size linear algebra: 3-vectors, row-major 3×3 matrices and a
//! sign-stabilised 3×3 SVD.
//!
//! The SVD follows the convention common in MPM codes: `U` and `V` are proper
//! rotations and any reflection in the input is carried by the smallest
//! singular value, which may therefore be negative.

use std::ops::{Add, AddAssign, Index, IndexMut, Mul, Neg, Sub, SubAssign};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floor applied to singular values before taking the Hencky logarithm.
pub const HENCKY_FLOOR: f64 = 1e-12;

const JACOBI_SWEEPS: usize = 30;
const JACOBI_TOL: f64 = 1e-15;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    pub fn splat(v: f64) -> Self {
        Vec3::new(v, v, v)
    }

    pub fn from_array(a: [f64; 3]) -> Self {
        Vec3::new(a[0], a[1], a[2])
    }

    pub fn to_array(self) -> [f64; 3] {
        [self.x, self.y, self.z]
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn cross(self, o: Vec3) -> Vec3 {
        Vec3::new(
            self.y * o.z - self.z * o.y,
            self.z * o.x - self.x * o.z,
            self.x * o.y - self.y * o.x,
        )
    }

    pub fn norm_squared(self) -> f64 {
        self.dot(self)
    }

    pub fn norm(self) -> f64 {
        self.norm_squared().sqrt()
    }

    pub fn sum(self) -> f64 {
        self.x + self.y + self.z
    }

    pub fn map(self, f: impl Fn(f64) -> f64) -> Vec3 {
        Vec3::new(f(self.x), f(self.y), f(self.z))
    }

    pub fn max_abs(self) -> f64 {
        self.x.abs().max(self.y.abs()).max(self.z.abs())
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Index<usize> for Vec3 {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        match i {
            0 => &self.x,
            1 => &self.y,
            2 => &self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl IndexMut<usize> for Vec3 {
    fn index_mut(&mut self, i: usize) -> &mut f64 {
        match i {
            0 => &mut self.x,
            1 => &mut self.y,
            2 => &mut self.z,
            _ => panic!("Vec3 index {i} out of range"),
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl AddAssign for Vec3 {
    fn add_assign(&mut self, o: Vec3) {
        *self = *self + o;
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl SubAssign for Vec3 {
    fn sub_assign(&mut self, o: Vec3) {
        *self = *self - o;
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Mul<Vec3> for f64 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        v * self
    }
}

/// Row-major 3×3 matrix.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat3(pub [f64; 9]);

impl Default for Mat3 {
    fn default() -> Self {
        Mat3::ZERO
    }
}

impl Mat3 {
    pub const ZERO: Mat3 = Mat3([0.0; 9]);
    pub const IDENTITY: Mat3 = Mat3([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn identity() -> Self {
        Mat3::IDENTITY
    }

    pub fn diag(d: Vec3) -> Self {
        Mat3([d.x, 0.0, 0.0, 0.0, d.y, 0.0, 0.0, 0.0, d.z])
    }

    pub fn scalar(s: f64) -> Self {
        Mat3::diag(Vec3::splat(s))
    }

    pub fn from_rows(r0: [f64; 3], r1: [f64; 3], r2: [f64; 3]) -> Self {
        Mat3([
            r0[0], r0[1], r0[2], r1[0], r1[1], r1[2], r2[0], r2[1], r2[2],
        ])
    }

    pub fn from_slice(s: &[f64]) -> Self {
        let mut m = [0.0; 9];
        m.copy_from_slice(&s[..9]);
        Mat3(m)
    }

    /// `a bᵀ`
    pub fn outer(a: Vec3, b: Vec3) -> Self {
        Mat3([
            a.x * b.x,
            a.x * b.y,
            a.x * b.z,
            a.y * b.x,
            a.y * b.y,
            a.y * b.z,
            a.z * b.x,
            a.z * b.y,
            a.z * b.z,
        ])
    }

    /// Cross-product matrix `[w]×`, so that `[w]× r = w × r`.
    pub fn skew(w: Vec3) -> Self {
        Mat3::from_rows([0.0, -w.z, w.y], [w.z, 0.0, -w.x], [-w.y, w.x, 0.0])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.0[3 * r + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.0[3 * r + c] = v;
    }

    pub fn col(&self, c: usize) -> Vec3 {
        Vec3::new(self.0[c], self.0[3 + c], self.0[6 + c])
    }

    pub fn set_col(&mut self, c: usize, v: Vec3) {
        self.0[c] = v.x;
        self.0[3 + c] = v.y;
        self.0[6 + c] = v.z;
    }

    pub fn row(&self, r: usize) -> Vec3 {
        Vec3::new(self.0[3 * r], self.0[3 * r + 1], self.0[3 * r + 2])
    }

    pub fn transpose(&self) -> Mat3 {
        let m = &self.0;
        Mat3([m[0], m[3], m[6], m[1], m[4], m[7], m[2], m[5], m[8]])
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6])
    }

    /// Cofactor matrix; equals `∂det/∂M`.
    pub fn cofactor(&self) -> Mat3 {
        let m = &self.0;
        Mat3([
            m[4] * m[8] - m[5] * m[7],
            m[5] * m[6] - m[3] * m[8],
            m[3] * m[7] - m[4] * m[6],
            m[2] * m[7] - m[1] * m[8],
            m[0] * m[8] - m[2] * m[6],
            m[1] * m[6] - m[0] * m[7],
            m[1] * m[5] - m[2] * m[4],
            m[2] * m[3] - m[0] * m[5],
            m[0] * m[4] - m[1] * m[3],
        ])
    }

    pub fn trace(&self) -> f64 {
        self.0[0] + self.0[4] + self.0[8]
    }

    pub fn frobenius(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Sum of elementwise products, `tr(Aᵀ B)`.
    pub fn ddot(&self, o: &Mat3) -> f64 {
        self.0.iter().zip(o.0.iter()).map(|(a, b)| a * b).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn symmetric_part(&self) -> Mat3 {
        (*self + self.transpose()) * 0.5
    }

    pub fn mul_vec(&self, v: Vec3) -> Vec3 {
        let m = &self.0;
        Vec3::new(
            m[0] * v.x + m[1] * v.y + m[2] * v.z,
            m[3] * v.x + m[4] * v.y + m[5] * v.z,
            m[6] * v.x + m[7] * v.y + m[8] * v.z,
        )
    }

    pub fn diagonal(&self) -> Vec3 {
        Vec3::new(self.0[0], self.0[4], self.0[8])
    }
}

impl Add for Mat3 {
    type Output = Mat3;
    fn add(self, o: Mat3) -> Mat3 {
        let mut r = self.0;
        for (a, b) in r.iter_mut().zip(o.0.iter()) {
            *a += b;
        }
        Mat3(r)
    }
}

impl AddAssign for Mat3 {
    fn add_assign(&mut self, o: Mat3) {
        for (a, b) in self.0.iter_mut().zip(o.0.iter()) {
            *a += b;
        }
    }
}

impl Sub for Mat3 {
    type Output = Mat3;
    fn sub(self, o: Mat3) -> Mat3 {
        let mut r = self.0;
        for (a, b) in r.iter_mut().zip(o.0.iter()) {
            *a -= b;
        }
        Mat3(r)
    }
}

impl Neg for Mat3 {
    type Output = Mat3;
    fn neg(self) -> Mat3 {
        self * -1.0
    }
}

impl Mul<f64> for Mat3 {
    type Output = Mat3;
    fn mul(self, s: f64) -> Mat3 {
        Mat3(self.0.map(|v| v * s))
    }
}

impl Mul<Mat3> for f64 {
    type Output = Mat3;
    fn mul(self, m: Mat3) -> Mat3 {
        m * self
    }
}

impl Mul<Vec3> for Mat3 {
    type Output = Vec3;
    fn mul(self, v: Vec3) -> Vec3 {
        self.mul_vec(v)
    }
}

impl Mul for Mat3 {
    type Output = Mat3;
    fn mul(self, o: Mat3) -> Mat3 {
        let a = &self.0;
        let b = &o.0;
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[3 * i + j] = a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j];
            }
        }
        Mat3(r)
    }
}

pub fn det3(m: &Mat3) -> f64 {
    m.det()
}

pub fn trace3(m: &Mat3) -> f64 {
    m.trace()
}

pub fn matmul3(a: &Mat3, b: &Mat3) -> Mat3 {
    *a * *b
}

pub fn transpose3(m: &Mat3) -> Mat3 {
    m.transpose()
}

pub fn frobenius(m: &Mat3) -> f64 {
    m.frobenius()
}

/// Componentwise natural log of singular values, floored at [`HENCKY_FLOOR`].
pub fn hencky(sigma: Vec3) -> Vec3 {
    sigma.map(|s| s.max(HENCKY_FLOOR).ln())
}

/// `U diag(s) Vᵀ`
pub fn compose_usv(u: &Mat3, s: Vec3, v: &Mat3) -> Mat3 {
    let mut us = *u;
    for r in 0..3 {
        us.0[3 * r] *= s.x;
        us.0[3 * r + 1] *= s.y;
        us.0[3 * r + 2] *= s.z;
    }
    us * v.transpose()
}

/// Singular value decomposition `M = U diag(sigma) Vᵀ`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Svd3 {
    pub u: Mat3,
    pub sigma: Vec3,
    pub v: Mat3,
}

impl Svd3 {
    pub fn reconstruct(&self) -> Mat3 {
        compose_usv(&self.u, self.sigma, &self.v)
    }

    /// Rotational part `U Vᵀ` of the polar decomposition.
    pub fn rotation(&self) -> Mat3 {
        self.u * self.v.transpose()
    }
}

/// 3×3 SVD by one-sided (Hestenes) Jacobi followed by a Givens QR of `M V`.
///
/// `U` and `V` are rotations; `sigma` is sorted descending and only
/// `sigma.z` can be negative. Column signs are canonicalised (largest
/// component of the first two columns of `V` positive) so the factors vary
/// continuously with `M` away from repeated singular values.
pub fn svd3(m: &Mat3) -> Result<Svd3> {
    if !m.is_finite() {
        return Err(Error::Domain("svd3 of non-finite matrix".into()));
    }
    let mut b = *m;
    let mut v = Mat3::IDENTITY;

    for _ in 0..JACOBI_SWEEPS {
        let mut rotated = false;
        for &(p, q) in &[(0usize, 1usize), (0, 2), (1, 2)] {
            let bp = b.col(p);
            let bq = b.col(q);
            let alpha = bp.norm_squared();
            let beta = bq.norm_squared();
            let gamma = bp.dot(bq);
            if gamma == 0.0 || gamma.abs() <= JACOBI_TOL * (alpha * beta).sqrt() {
                continue;
            }
            rotated = true;
            let zeta = (beta - alpha) / (2.0 * gamma);
            let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
            let c = 1.0 / (1.0 + t * t).sqrt();
            let s = c * t;
            b.set_col(p, bp * c - bq * s);
            b.set_col(q, bp * s + bq * c);
            let vp = v.col(p);
            let vq = v.col(q);
            v.set_col(p, vp * c - vq * s);
            v.set_col(q, vp * s + vq * c);
        }
        if !rotated {
            break;
        }
    }

    // Sort columns by norm, descending.
    let mut order = [0usize, 1, 2];
    let norms = [
        b.col(0).norm_squared(),
        b.col(1).norm_squared(),
        b.col(2).norm_squared(),
    ];
    order.sort_by(|&i, &j| {
        norms[j]
            .partial_cmp(&norms[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    if order != [0, 1, 2] {
        let (b0, v0) = (b, v);
        for (dst, &src) in order.iter().enumerate() {
            b.set_col(dst, b0.col(src));
            v.set_col(dst, v0.col(src));
        }
    }
    if v.det() < 0.0 {
        b.set_col(2, -b.col(2));
        v.set_col(2, -v.col(2));
    }

    // Givens QR: G3 G2 G1 B = R, U = (G3 G2 G1)ᵀ.
    let mut qt = Mat3::IDENTITY;
    for &(p, q, col) in &[(0usize, 1usize, 0usize), (0, 2, 0), (1, 2, 1)] {
        let a = b.get(p, col);
        let bb = b.get(q, col);
        let r = a.hypot(bb);
        if r == 0.0 {
            continue;
        }
        let (c, s) = (a / r, bb / r);
        for k in 0..3 {
            let (bp, bq) = (b.get(p, k), b.get(q, k));
            b.set(p, k, c * bp + s * bq);
            b.set(q, k, -s * bp + c * bq);
            let (qp, qq) = (qt.get(p, k), qt.get(q, k));
            qt.set(p, k, c * qp + s * qq);
            qt.set(q, k, -s * qp + c * qq);
        }
    }
    let mut u = qt.transpose();
    let mut sigma = Vec3::new(b.get(0, 0), b.get(1, 1), b.get(2, 2));
    if sigma.y > sigma.x {
        sigma.y = sigma.x;
    }
    if sigma.z > sigma.y {
        sigma.z = sigma.y;
    }

    for c in 0..2 {
        let vc = v.col(c);
        let mut k = 0;
        for i in 1..3 {
            if vc[i].abs() > vc[k].abs() {
                k = i;
            }
        }
        if vc[k] < 0.0 {
            v.set_col(c, -vc);
            u.set_col(c, -u.col(c));
            // Flipping a pair of columns keeps the product intact but flips
            // both determinants; restore them with the third column.
            v.set_col(2, -v.col(2));
            u.set_col(2, -u.col(2));
        }
    }

    Ok(Svd3 { u, sigma, v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_mat(rng: &mut impl Rng) -> Mat3 {
        Mat3(std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
    }

    fn assert_rotation(m: &Mat3) {
        assert!((m.det() - 1.0).abs() < 1e-9, "det = {}", m.det());
        let mtm = m.transpose() * *m;
        assert!((mtm - Mat3::IDENTITY).max_abs() < 1e-9);
    }

    #[test]
    fn identity_svd() {
        let s = svd3(&Mat3::IDENTITY).unwrap();
        assert_eq!(s.u, Mat3::IDENTITY);
        assert_eq!(s.v, Mat3::IDENTITY);
        assert_eq!(s.sigma, Vec3::splat(1.0));
    }

    #[test]
    fn positive_diagonal_svd() {
        let s = svd3(&Mat3::diag(Vec3::new(2.0, 1.0, 0.5))).unwrap();
        assert_eq!(s.u, Mat3::IDENTITY);
        assert_eq!(s.v, Mat3::IDENTITY);
        assert_eq!(s.sigma, Vec3::new(2.0, 1.0, 0.5));
    }

    #[test]
    fn unsorted_diagonal_is_sorted() {
        let s = svd3(&Mat3::diag(Vec3::new(0.5, 3.0, 1.0))).unwrap();
        assert_eq!(s.sigma, Vec3::new(3.0, 1.0, 0.5));
        assert_rotation(&s.u);
        assert_rotation(&s.v);
        assert!((s.reconstruct() - Mat3::diag(Vec3::new(0.5, 3.0, 1.0))).max_abs() < 1e-14);
    }

    #[test]
    fn reflection_goes_to_smallest_value() {
        let m = Mat3::diag(Vec3::new(2.0, -1.0, 0.5));
        let s = svd3(&m).unwrap();
        assert!(s.sigma.z < 0.0);
        assert!((s.sigma.x - 2.0).abs() < 1e-15);
        assert!((s.sigma.y - 1.0).abs() < 1e-15);
        assert!((s.sigma.z + 0.5).abs() < 1e-15);
        assert_rotation(&s.u);
        assert_rotation(&s.v);
        assert!((s.reconstruct() - m).max_abs() < 1e-14);
    }

    #[test]
    fn rank_deficient_inputs() {
        for m in [
            Mat3::ZERO,
            Mat3::diag(Vec3::new(1.0, 0.0, 0.0)),
            Mat3::outer(Vec3::new(1.0, 2.0, 3.0), Vec3::new(-1.0, 0.5, 2.0)),
        ] {
            let s = svd3(&m).unwrap();
            assert_rotation(&s.u);
            assert_rotation(&s.v);
            assert!((s.reconstruct() - m).max_abs() < 1e-13);
        }
    }

    #[test]
    fn rejects_non_finite() {
        let mut m = Mat3::IDENTITY;
        m.0[4] = f64::NAN;
        assert!(matches!(svd3(&m), Err(Error::Domain(_))));
    }

    #[test]
    fn random_reconstruction_and_rotations() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let m = random_mat(&mut rng);
            let s = svd3(&m).unwrap();
            let rel = (s.reconstruct() - m).frobenius() / m.frobenius();
            assert!(rel < 1e-9, "relative reconstruction error {rel}");
            assert!((s.u.det() - 1.0).abs() < 1e-9);
            assert!((s.v.det() - 1.0).abs() < 1e-9);
            assert_rotation(&s.u);
            assert_rotation(&s.v);
            assert!(s.sigma.x >= s.sigma.y && s.sigma.y >= s.sigma.z);
            assert!(s.sigma.y >= 0.0);
            assert_eq!(s.sigma.z < 0.0, m.det() < 0.0);
        }
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_mat(&mut rng);
        assert_eq!(svd3(&m).unwrap(), svd3(&m).unwrap());
    }

    #[test]
    fn continuous_away_from_degeneracy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut checked = 0;
        while checked < 200 {
            let m = random_mat(&mut rng);
            let s = svd3(&m).unwrap();
            let gap = (s.sigma.x - s.sigma.y)
                .min(s.sigma.y - s.sigma.z.abs())
                .min(s.sigma.y + s.sigma.z);
            if gap <= 1e-2 {
                continue;
            }
            checked += 1;
            let mut d = random_mat(&mut rng);
            d = d * (1e-6 / d.frobenius());
            let sp = svd3(&(m + d)).unwrap();
            let du = (sp.u - s.u).max_abs();
            let dv = (sp.v - s.v).max_abs();
            let ds = (sp.sigma - s.sigma).max_abs();
            assert!(
                du < 1e-4 && dv < 1e-4 && ds < 1e-4,
                "jump du={du} dv={dv} ds={ds}"
            );
        }
    }

    #[test]
    fn hencky_examples() {
        assert_eq!(hencky(Vec3::splat(1.0)), Vec3::ZERO);
        let e = std::f64::consts::E;
        let h = hencky(Vec3::new(e, 1.0, 1.0 / e));
        assert!((h - Vec3::new(1.0, 0.0, -1.0)).max_abs() < 1e-15);
        let h = hencky(Vec3::new(2.0, 1.0, 1.0));
        assert!((h.x - 0.693147).abs() < 1e-6);
        assert!(hencky(Vec3::new(0.0, -1.0, 1.0)).is_finite());
        assert_eq!(hencky(Vec3::new(0.0, 1.0, 1.0)).x, HENCKY_FLOOR.ln());
    }

    #[test]
    fn basic_algebra() {
        assert_eq!(det3(&Mat3::IDENTITY), 1.0);
        assert_eq!(det3(&Mat3::diag(Vec3::new(2.0, 3.0, 4.0))), 24.0);
        assert_eq!(trace3(&Mat3::diag(Vec3::new(1.0, 2.0, 3.0))), 6.0);
        let a = Mat3::from_rows([1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 10.0]);
        assert_eq!(transpose3(&transpose3(&a)), a);
        assert_eq!(matmul3(&a, &Mat3::IDENTITY), a);
        assert!((frobenius(&Mat3::IDENTITY) - 3f64.sqrt()).abs() < 1e-15);
        // cofactor is the gradient of det
        let cof = a.cofactor();
        for k in 0..9 {
            let mut ap = a;
            ap.0[k] += 1e-6;
            let mut am = a;
            am.0[k] -= 1e-6;
            let fd = (ap.det() - am.det()) / 2e-6;
            assert!((fd - cof.0[k]).abs() < 1e-6);
        }
        let w = Vec3::new(0.3, -1.0, 2.0);
        let r = Vec3::new(1.0, 2.0, 3.0);
        assert!((Mat3::skew(w) * r - w.cross(r)).max_abs() < 1e-15);
    }
}
