//! Quadratic B-spline interpolation stencil over the 3×3×3 node neighbourhood.

use crate::tensor3::Vec3;

/// Weights of one particle against its 27 neighbouring nodes.
#[derive(Clone, Copy, Debug)]
pub struct Stencil {
    /// Lowest node index touched, per axis.
    pub base: [usize; 3],
    /// Particle position in units of `h`, relative to `base`; in `[0.5, 1.5)`.
    pub fx: Vec3,
    /// `w[axis][offset]`
    pub w: [[f64; 3]; 3],
    /// Derivative of `w[axis][offset]` with respect to the particle coordinate.
    pub dw: [[f64; 3]; 3],
    h: f64,
}

/// One node of a stencil.
#[derive(Clone, Copy, Debug)]
pub struct NodeWeight {
    pub node: [usize; 3],
    pub weight: f64,
    /// `∂weight/∂x_p`
    pub grad: Vec3,
    /// `x_node - x_p`
    pub dpos: Vec3,
}

impl Stencil {
    /// `None` when any touched node falls outside `[0, n-1]³`.
    pub fn new(x: Vec3, h: f64, n: usize) -> Option<Stencil> {
        let inv_h = 1.0 / h;
        let mut base = [0usize; 3];
        let mut fx = Vec3::ZERO;
        let mut w = [[0.0; 3]; 3];
        let mut dw = [[0.0; 3]; 3];
        for a in 0..3 {
            let xs = x[a] * inv_h;
            if !xs.is_finite() {
                return None;
            }
            let b = (xs - 0.5).floor();
            if b < 0.0 || b + 2.0 > (n - 1) as f64 {
                return None;
            }
            base[a] = b as usize;
            let f = xs - b;
            fx[a] = f;
            w[a] = [
                0.5 * (1.5 - f) * (1.5 - f),
                0.75 - (f - 1.0) * (f - 1.0),
                0.5 * (f - 0.5) * (f - 0.5),
            ];
            dw[a] = [
                -(1.5 - f) * inv_h,
                -2.0 * (f - 1.0) * inv_h,
                (f - 0.5) * inv_h,
            ];
        }
        Some(Stencil { base, fx, w, dw, h })
    }

    /// Visits the 27 nodes in a fixed order (x outermost, z innermost).
    #[inline]
    pub fn for_each(&self, mut visit: impl FnMut(NodeWeight)) {
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    let (wx, wy, wz) = (self.w[0][i], self.w[1][j], self.w[2][k]);
                    let grad = Vec3::new(
                        self.dw[0][i] * wy * wz,
                        wx * self.dw[1][j] * wz,
                        wx * wy * self.dw[2][k],
                    );
                    let dpos = Vec3::new(
                        (i as f64 - self.fx.x) * self.h,
                        (j as f64 - self.fx.y) * self.h,
                        (k as f64 - self.fx.z) * self.h,
                    );
                    visit(NodeWeight {
                        node: [self.base[0] + i, self.base[1] + j, self.base[2] + k],
                        weight: wx * wy * wz,
                        grad,
                        dpos,
                    });
                }
            }
        }
    }
}
