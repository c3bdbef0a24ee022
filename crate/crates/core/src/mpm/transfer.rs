//! Particle/grid transfers (APIC with the MLS force term) and their adjoints.
//!
//! The forward kernels are shared by the plain simulator and by the
//! differentiable tape, whose backward pass calls [`transfer_vjp`]. The grid
//! is never stored on the tape: the adjoint recomputes it from the inputs.

use super::{BoundaryKind, GridConfig};
use crate::error::{Error, Result};
use crate::mpm::kernel::Stencil;
use crate::tensor3::{Mat3, Vec3};

/// Dense nodal fields for one step.
#[derive(Clone, Debug)]
pub struct GridState {
    pub n: usize,
    pub mass: Vec<f64>,
    pub momentum: Vec<Vec3>,
    pub force: Vec<Vec3>,
    pub velocity: Vec<Vec3>,
}

impl GridState {
    pub fn new(n: usize) -> Self {
        let len = n * n * n;
        GridState {
            n,
            mass: vec![0.0; len],
            momentum: vec![Vec3::ZERO; len],
            force: vec![Vec3::ZERO; len],
            velocity: vec![Vec3::ZERO; len],
        }
    }

    #[inline]
    pub fn index(&self, node: [usize; 3]) -> usize {
        (node[0] * self.n + node[1]) * self.n + node[2]
    }

    pub fn total_mass(&self) -> f64 {
        self.mass.iter().sum()
    }

    pub fn total_momentum(&self) -> Vec3 {
        self.momentum.iter().fold(Vec3::ZERO, |a, &b| a + b)
    }
}

/// Per-particle inputs to a transfer; `tau` is the Kirchhoff stress `J S`.
#[derive(Clone, Copy, Debug)]
pub struct TransferInputs<'a> {
    pub x: &'a [Vec3],
    pub v: &'a [Vec3],
    pub c: &'a [Mat3],
    pub tau: &'a [Mat3],
    pub mass: &'a [f64],
    pub volume: &'a [f64],
}

/// Adjoints of the transfer inputs.
#[derive(Clone, Debug)]
pub struct TransferGrads {
    pub x: Vec<Vec3>,
    pub v: Vec<Vec3>,
    pub c: Vec<Mat3>,
    pub tau: Vec<Mat3>,
}

fn stencil(grid: &GridConfig, x: Vec3, particle: usize) -> Result<Stencil> {
    Stencil::new(x, grid.h(), grid.n).ok_or(Error::OutOfDomain {
        particle,
        x: x.x,
        y: x.y,
        z: x.z,
    })
}

/// Inverse of the quadratic-kernel inertia tensor, `4/h²`.
#[inline]
pub fn apic_d_inv(h: f64) -> f64 {
    4.0 / (h * h)
}

/// Per-axis keep mask applied to a boundary node's velocity.
fn boundary_mask(grid: &GridConfig, node: [usize; 3]) -> Vec3 {
    let bw = grid.boundary_width;
    let hi = grid.n - 1 - bw;
    let wall = node.map(|i| i < bw || i > hi);
    match grid.boundary_kind {
        BoundaryKind::Sticky => {
            if wall.iter().any(|&w| w) {
                Vec3::ZERO
            } else {
                Vec3::splat(1.0)
            }
        }
        BoundaryKind::SlipWalls => Vec3::new(
            if wall[0] { 0.0 } else { 1.0 },
            if wall[1] { 0.0 } else { 1.0 },
            if wall[2] { 0.0 } else { 1.0 },
        ),
    }
}

/// Scatter mass, APIC momentum and MLS stress forces to the grid.
pub fn p2g(grid: &GridConfig, inp: &TransferInputs<'_>) -> Result<GridState> {
    let mut g = GridState::new(grid.n);
    let d_inv = apic_d_inv(grid.h());
    for p in 0..inp.x.len() {
        let st = stencil(grid, inp.x[p], p)?;
        let m = inp.mass[p];
        let v = inp.v[p];
        let c = inp.c[p];
        let stress_coef = inp.tau[p] * (-inp.volume[p] * d_inv);
        st.for_each(|nw| {
            let i = g.index(nw.node);
            g.mass[i] += nw.weight * m;
            g.momentum[i] += (v + c * nw.dpos) * (nw.weight * m);
            g.force[i] += (stress_coef * nw.dpos) * nw.weight;
        });
    }
    Ok(g)
}

/// Explicit velocity update with gravity and wall conditions.
pub fn grid_update(g: &mut GridState, grid: &GridConfig, dt: f64, gravity: Vec3) {
    let n = grid.n;
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let idx = (i * n + j) * n + k;
                let m = g.mass[idx];
                if m <= 0.0 {
                    g.velocity[idx] = Vec3::ZERO;
                    continue;
                }
                let v = (g.momentum[idx] + g.force[idx] * dt) * (1.0 / m) + gravity * dt;
                let keep = boundary_mask(grid, [i, j, k]);
                g.velocity[idx] = Vec3::new(v.x * keep.x, v.y * keep.y, v.z * keep.z);
            }
        }
    }
}

/// Gather velocity and affine velocity back to particles.
pub fn g2p(grid: &GridConfig, g: &GridState, x: &[Vec3]) -> Result<(Vec<Vec3>, Vec<Mat3>)> {
    let d_inv = apic_d_inv(grid.h());
    let mut vs = Vec::with_capacity(x.len());
    let mut cs = Vec::with_capacity(x.len());
    for (p, &xp) in x.iter().enumerate() {
        let st = stencil(grid, xp, p)?;
        let mut v = Vec3::ZERO;
        let mut c = Mat3::ZERO;
        st.for_each(|nw| {
            let vi = g.velocity[g.index(nw.node)];
            v += vi * nw.weight;
            c += Mat3::outer(vi, nw.dpos) * (nw.weight * d_inv);
        });
        vs.push(v);
        cs.push(c);
    }
    Ok((vs, cs))
}

/// `p2g → grid_update → g2p`, returning new particle `v` and `C`.
pub fn transfer(
    grid: &GridConfig,
    dt: f64,
    gravity: Vec3,
    inp: &TransferInputs<'_>,
) -> Result<(Vec<Vec3>, Vec<Mat3>)> {
    let mut g = p2g(grid, inp)?;
    grid_update(&mut g, grid, dt, gravity);
    g2p(grid, &g, inp.x)
}

/// Vector-Jacobian product of [`transfer`].
pub fn transfer_vjp(
    grid: &GridConfig,
    dt: f64,
    gravity: Vec3,
    inp: &TransferInputs<'_>,
    v_bar: &[Vec3],
    c_bar: &[Mat3],
) -> Result<TransferGrads> {
    let np = inp.x.len();
    let d_inv = apic_d_inv(grid.h());
    let mut g = p2g(grid, inp)?;
    grid_update(&mut g, grid, dt, gravity);

    let mut out = TransferGrads {
        x: vec![Vec3::ZERO; np],
        v: vec![Vec3::ZERO; np],
        c: vec![Mat3::ZERO; np],
        tau: vec![Mat3::ZERO; np],
    };

    // g2p
    let mut node_v_bar = vec![Vec3::ZERO; g.mass.len()];
    for p in 0..np {
        let st = stencil(grid, inp.x[p], p)?;
        let vb = v_bar[p];
        let cb = c_bar[p];
        let mut xb = Vec3::ZERO;
        st.for_each(|nw| {
            let i = g.index(nw.node);
            let vi = g.velocity[i];
            let cb_dpos = cb * nw.dpos;
            node_v_bar[i] += vb * nw.weight + cb_dpos * (nw.weight * d_inv);
            let c_term = (cb.transpose() * vi).dot(nw.dpos) * d_inv;
            xb += nw.grad * (vb.dot(vi) + c_term);
            xb -= cb.transpose() * vi * (nw.weight * d_inv);
        });
        out.x[p] += xb;
    }

    // grid update
    let n = grid.n;
    let mut mom_bar = vec![Vec3::ZERO; g.mass.len()];
    let mut force_bar = vec![Vec3::ZERO; g.mass.len()];
    let mut mass_bar = vec![0.0; g.mass.len()];
    for i in 0..n {
        for j in 0..n {
            for k in 0..n {
                let idx = (i * n + j) * n + k;
                let m = g.mass[idx];
                if m <= 0.0 {
                    continue;
                }
                let keep = boundary_mask(grid, [i, j, k]);
                let vb = node_v_bar[idx];
                let ub = Vec3::new(vb.x * keep.x, vb.y * keep.y, vb.z * keep.z);
                let inv_m = 1.0 / m;
                mom_bar[idx] = ub * inv_m;
                force_bar[idx] = ub * (dt * inv_m);
                let total = g.momentum[idx] + g.force[idx] * dt;
                mass_bar[idx] = -ub.dot(total) * inv_m * inv_m;
            }
        }
    }

    // p2g
    for p in 0..np {
        let st = stencil(grid, inp.x[p], p)?;
        let m = inp.mass[p];
        let v = inp.v[p];
        let c = inp.c[p];
        let tau = inp.tau[p];
        let coef = -inp.volume[p] * d_inv;
        let mut xb = Vec3::ZERO;
        let mut vb = Vec3::ZERO;
        let mut cb = Mat3::ZERO;
        let mut tb = Mat3::ZERO;
        st.for_each(|nw| {
            let i = g.index(nw.node);
            let w = nw.weight;
            let mb = mass_bar[i];
            let pb = mom_bar[i];
            let fb = force_bar[i];
            let apic = v + c * nw.dpos;
            let stress_f = (tau * nw.dpos) * coef;

            xb += nw.grad * (mb * m + m * pb.dot(apic) + fb.dot(stress_f));
            xb -= c.transpose() * pb * (w * m);
            xb -= tau.transpose() * fb * (w * coef);

            vb += pb * (w * m);
            cb += Mat3::outer(pb, nw.dpos) * (w * m);
            tb += Mat3::outer(fb, nw.dpos) * (w * coef);
        });
        out.x[p] += xb;
        out.v[p] += vb;
        out.c[p] += cb;
        out.tau[p] += tb;
    }
    Ok(out)
}
