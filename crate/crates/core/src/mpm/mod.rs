//! Explicit MLS-MPM simulator with a pluggable constitutive provider.
//!
//! One step is `p2g → grid_update → g2p → advect_and_update_F`. The return
//! mapping runs at the start of the step, so the particle keeps the projected
//! deformation gradient, and the stress scattered to the grid is computed
//! from it and the particle's current affine velocity.

pub mod kernel;
pub mod transfer;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::materials::{MaterialKind, MaterialSpec};
use crate::tensor3::{Mat3, Vec3};

pub use transfer::{g2p, grid_update, p2g, transfer, transfer_vjp, GridState, TransferInputs};

pub const DEFAULT_DENSITY: f64 = 1000.0;
pub const DEFAULT_GRAVITY: Vec3 = Vec3::new(0.0, -9.8, 0.0);
/// CFL safety factor used by the runtime check, `dt ≤ CFL_LIMIT·h/v_max`.
pub const CFL_LIMIT: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BoundaryKind {
    Sticky,
    SlipWalls,
}

impl BoundaryKind {
    pub fn code(self) -> u8 {
        match self {
            BoundaryKind::Sticky => 0,
            BoundaryKind::SlipWalls => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(BoundaryKind::Sticky),
            1 => Some(BoundaryKind::SlipWalls),
            _ => None,
        }
    }
}

/// Background grid over the unit cube with `n` nodes per axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridConfig {
    pub n: usize,
    pub boundary_width: usize,
    pub boundary_kind: BoundaryKind,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            n: 32,
            boundary_width: 3,
            boundary_kind: BoundaryKind::Sticky,
        }
    }
}

impl GridConfig {
    pub fn new(n: usize) -> Self {
        GridConfig {
            n,
            ..GridConfig::default()
        }
    }

    pub fn h(&self) -> f64 {
        1.0 / (self.n - 1) as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 8 {
            return Err(Error::Argument(format!(
                "grid needs n >= 8, got {}",
                self.n
            )));
        }
        if self.boundary_width < 2 || 2 * self.boundary_width + 3 > self.n {
            return Err(Error::Argument(format!(
                "boundary width {} invalid for n = {}",
                self.boundary_width, self.n
            )));
        }
        Ok(())
    }

    /// Interval particles are clamped to after advection.
    pub fn interior(&self) -> (f64, f64) {
        let h = self.h();
        (
            self.boundary_width as f64 * h,
            (self.n - 1 - self.boundary_width) as f64 * h,
        )
    }

    /// Mass and rest volume of one particle under the 8-per-cell seeding rule.
    pub fn particle_mass_volume(&self, density: f64) -> (f64, f64) {
        let vol = self.h().powi(3) / 8.0;
        (density * vol, vol)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub dt: f64,
    pub gravity: Vec3,
    pub steps: usize,
}

impl SimConfig {
    pub fn new(dt: f64, steps: usize) -> Self {
        SimConfig {
            dt,
            gravity: DEFAULT_GRAVITY,
            steps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::Argument(format!(
                "dt must be positive, got {}",
                self.dt
            )));
        }
        if !self.gravity.is_finite() {
            return Err(Error::Argument("gravity must be finite".into()));
        }
        Ok(())
    }
}

/// Largest time step we consider stable for a material at grid spacing `h`,
/// bounded to `[1e-5, 5e-4]` s.
pub fn suggest_dt(spec: &MaterialSpec, h: f64, density: f64, speed: f64) -> f64 {
    let mut dt = 0.3 * h / (spec.wave_speed(density) + speed);
    if spec.kind == MaterialKind::Newtonian {
        dt = dt.min(density * h * h / (6.0 * spec.mu));
    }
    dt.clamp(1e-5, 5e-4)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParticleState {
    pub x: Vec3,
    pub v: Vec3,
    pub c: Mat3,
    pub f: Mat3,
    pub mass: f64,
    pub volume0: f64,
}

impl ParticleState {
    pub fn at_rest(x: Vec3, mass: f64, volume0: f64) -> Self {
        ParticleState {
            x,
            v: Vec3::ZERO,
            c: Mat3::ZERO,
            f: Mat3::IDENTITY,
            mass,
            volume0,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.v.is_finite() && self.c.is_finite() && self.f.is_finite()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimState {
    pub particles: Vec<ParticleState>,
    pub grid: GridConfig,
}

impl SimState {
    pub fn positions(&self) -> Vec<Vec3> {
        self.particles.iter().map(|p| p.x).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.particles.iter().map(|p| p.mass).sum()
    }

    pub fn total_momentum(&self) -> Vec3 {
        self.particles
            .iter()
            .fold(Vec3::ZERO, |a, p| a + p.v * p.mass)
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.validate()?;
        for (i, p) in self.particles.iter().enumerate() {
            if !(p.mass > 0.0) || !(p.volume0 > 0.0) {
                return Err(Error::Argument(format!(
                    "particle {i} needs positive mass and volume"
                )));
            }
            if !p.is_finite() {
                return Err(Error::Numeric(format!("particle {i} has non-finite state")));
            }
        }
        Ok(())
    }
}

/// Per-particle, per-step supervision record.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SupervisionTuple {
    pub f: Mat3,
    pub f_proj: Mat3,
    pub c: Mat3,
    pub s: Mat3,
}

/// Return mapping and stress law, per particle.
///
/// The batch methods default to looping over the single-particle ones;
/// providers with cheaper batched evaluation (the neural model) override
/// them.
pub trait ConstitutiveProvider: Sync {
    fn project(&self, f: &Mat3, dt: f64) -> Result<Mat3>;

    fn stress(&self, f_proj: &Mat3, c: &Mat3) -> Result<Mat3>;

    fn project_batch(&self, f: &[Mat3], dt: f64) -> Result<Vec<Mat3>> {
        f.par_iter().map(|f| self.project(f, dt)).collect()
    }

    fn stress_batch(&self, f_proj: &[Mat3], c: &[Mat3]) -> Result<Vec<Mat3>> {
        f_proj
            .par_iter()
            .zip(c.par_iter())
            .map(|(f, c)| self.stress(f, c))
            .collect()
    }
}

/// Sequence of states from a rollout, the initial one included.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub grid: GridConfig,
    pub dt: f64,
    pub frames: Vec<Vec<ParticleState>>,
    /// One entry per step when recorded, else empty.
    pub tuples: Vec<Vec<SupervisionTuple>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.frames.len().saturating_sub(1)
    }

    pub fn num_particles(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    pub fn positions(&self) -> Vec<Vec<Vec3>> {
        self.frames
            .iter()
            .map(|f| f.iter().map(|p| p.x).collect())
            .collect()
    }

    pub fn state(&self, t: usize) -> SimState {
        SimState {
            particles: self.frames[t].clone(),
            grid: self.grid,
        }
    }
}

fn check_cfl(particles: &[ParticleState], grid: &GridConfig, dt: f64, step: usize) -> Result<()> {
    let v_max = particles.iter().fold(0.0_f64, |m, p| m.max(p.v.norm()));
    if !v_max.is_finite() {
        return Err(Error::Divergence { step });
    }
    if v_max > 0.0 {
        let bound = CFL_LIMIT * grid.h() / v_max;
        if dt > bound {
            return Err(Error::Cfl { step, dt, bound });
        }
    }
    Ok(())
}

/// `F ← (I + dt C) F`, `x ← clamp(x + dt v)`.
pub fn advect_and_update_f(particle: &mut ParticleState, dt: f64, grid: &GridConfig) {
    particle.f = (Mat3::IDENTITY + particle.c * dt) * particle.f;
    let (lo, hi) = grid.interior();
    particle.x = (particle.x + particle.v * dt).map(|v| v.clamp(lo, hi));
}

/// Advances the state by one step. Returns the supervision tuples of this
/// step when `record` is set (otherwise an empty vector).
pub fn step(
    state: &mut SimState,
    provider: &dyn ConstitutiveProvider,
    cfg: &SimConfig,
    record: bool,
) -> Result<Vec<SupervisionTuple>> {
    step_indexed(state, provider, cfg, record, 0)
}

fn step_indexed(
    state: &mut SimState,
    provider: &dyn ConstitutiveProvider,
    cfg: &SimConfig,
    record: bool,
    index: usize,
) -> Result<Vec<SupervisionTuple>> {
    let grid = state.grid;
    let dt = cfg.dt;
    check_cfl(&state.particles, &grid, dt, index)?;

    let f_trial: Vec<Mat3> = state.particles.iter().map(|p| p.f).collect();
    let c_old: Vec<Mat3> = state.particles.iter().map(|p| p.c).collect();
    let f_proj = provider.project_batch(&f_trial, dt)?;
    let stress = provider.stress_batch(&f_proj, &c_old)?;
    let tau: Vec<Mat3> = f_proj
        .iter()
        .zip(&stress)
        .map(|(f, s)| *s * f.det())
        .collect();

    let x: Vec<Vec3> = state.particles.iter().map(|p| p.x).collect();
    let v: Vec<Vec3> = state.particles.iter().map(|p| p.v).collect();
    let mass: Vec<f64> = state.particles.iter().map(|p| p.mass).collect();
    let volume: Vec<f64> = state.particles.iter().map(|p| p.volume0).collect();
    let inputs = TransferInputs {
        x: &x,
        v: &v,
        c: &c_old,
        tau: &tau,
        mass: &mass,
        volume: &volume,
    };
    let (v_new, c_new) = transfer(&grid, dt, cfg.gravity, &inputs)?;

    for (i, p) in state.particles.iter_mut().enumerate() {
        p.f = f_proj[i];
        p.v = v_new[i];
        p.c = c_new[i];
        advect_and_update_f(p, dt, &grid);
    }
    if state.particles.iter().any(|p| !p.is_finite()) {
        return Err(Error::Divergence { step: index });
    }

    Ok(if record {
        (0..f_trial.len())
            .map(|i| SupervisionTuple {
                f: f_trial[i],
                f_proj: f_proj[i],
                c: c_old[i],
                s: stress[i],
            })
            .collect()
    } else {
        Vec::new()
    })
}

/// Runs `cfg.steps` steps; errors carry the failing step index.
pub fn rollout(
    initial: &SimState,
    provider: &dyn ConstitutiveProvider,
    cfg: &SimConfig,
    record: bool,
) -> Result<Trajectory> {
    cfg.validate()?;
    initial.validate()?;
    let mut state = initial.clone();
    let mut frames = Vec::with_capacity(cfg.steps + 1);
    let mut tuples = Vec::new();
    frames.push(state.particles.clone());
    for t in 0..cfg.steps {
        let rec = step_indexed(&mut state, provider, cfg, record, t).map_err(|e| match e {
            Error::Numeric(_) | Error::SingularDeformation { .. } => Error::Divergence { step: t },
            other => other,
        })?;
        if record {
            tuples.push(rec);
        }
        frames.push(state.particles.clone());
    }
    Ok(Trajectory {
        grid: initial.grid,
        dt: cfg.dt,
        frames,
        tuples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::materials::MaterialSpec;

    struct Inert;

    impl ConstitutiveProvider for Inert {
        fn project(&self, f: &Mat3, _dt: f64) -> Result<Mat3> {
            Ok(*f)
        }
        fn stress(&self, _f: &Mat3, _c: &Mat3) -> Result<Mat3> {
            Ok(Mat3::ZERO)
        }
    }

    fn block(grid: GridConfig, lo: Vec3, cells: usize, v: Vec3) -> SimState {
        let h = grid.h();
        let (m, vol) = grid.particle_mass_volume(DEFAULT_DENSITY);
        let mut particles = Vec::new();
        for i in 0..2 * cells {
            for j in 0..2 * cells {
                for k in 0..2 * cells {
                    let x =
                        lo + Vec3::new(i as f64 + 0.5, j as f64 + 0.5, k as f64 + 0.5) * (0.5 * h);
                    let mut p = ParticleState::at_rest(x, m, vol);
                    p.v = v;
                    particles.push(p);
                }
            }
        }
        SimState { particles, grid }
    }

    #[test]
    fn single_particle_at_rest_is_fixed_point() {
        let grid = GridConfig::new(16);
        let (m, vol) = grid.particle_mass_volume(DEFAULT_DENSITY);
        let s0 = SimState {
            particles: vec![ParticleState::at_rest(Vec3::splat(0.5), m, vol)],
            grid,
        };
        let mut cfg = SimConfig::new(1e-3, 3);
        cfg.gravity = Vec3::ZERO;
        let traj = rollout(&s0, &MaterialSpec::elastic(1e4, 1e4), &cfg, false).unwrap();
        for f in &traj.frames {
            assert_eq!(f[0].x, s0.particles[0].x);
            assert_eq!(f[0].v, Vec3::ZERO);
            assert_eq!(f[0].f, Mat3::IDENTITY);
        }
    }

    #[test]
    fn single_particle_free_fall() {
        let grid = GridConfig::new(16);
        let (m, vol) = grid.particle_mass_volume(DEFAULT_DENSITY);
        let x0 = Vec3::new(0.5, 0.6, 0.5);
        let mut s = SimState {
            particles: vec![ParticleState::at_rest(x0, m, vol)],
            grid,
        };
        let cfg = SimConfig::new(1e-3, 1);
        step(&mut s, &Inert, &cfg, false).unwrap();
        let p = s.particles[0];
        assert!((p.v - Vec3::new(0.0, -9.8e-3, 0.0)).max_abs() < 1e-14);
        assert!((p.x - (x0 + p.v * 1e-3)).max_abs() < 1e-15);
        assert!(p.c.max_abs() < 1e-12);
    }

    #[test]
    fn advect_examples() {
        let grid = GridConfig::new(16);
        let mut p = ParticleState::at_rest(Vec3::splat(0.5), 1.0, 1.0);
        advect_and_update_f(&mut p, 0.01, &grid);
        assert_eq!(p.x, Vec3::splat(0.5));
        assert_eq!(p.f, Mat3::IDENTITY);
        p.v = Vec3::new(1.0, 0.0, 0.0);
        advect_and_update_f(&mut p, 0.01, &grid);
        assert!((p.x - Vec3::new(0.51, 0.5, 0.5)).max_abs() < 1e-15);
        assert_eq!(p.f, Mat3::IDENTITY);
        p.v = Vec3::ZERO;
        p.c = Mat3::diag(Vec3::new(0.1, 0.0, 0.0));
        advect_and_update_f(&mut p, 0.01, &grid);
        assert!((p.f - Mat3::diag(Vec3::new(1.001, 1.0, 1.0))).max_abs() < 1e-15);
    }

    #[test]
    fn uniform_translation_conserves_momentum_and_keeps_f() {
        let grid = GridConfig::new(16);
        let h = grid.h();
        let s0 = block(grid, Vec3::splat(6.0 * h), 3, Vec3::new(0.4, 0.1, -0.2));
        let mut cfg = SimConfig::new(2e-4, 100);
        cfg.gravity = Vec3::ZERO;
        let spec = MaterialSpec::elastic(1e4, 1e4);
        let p0 = s0.total_momentum();
        let mut s = s0.clone();
        for _ in 0..100 {
            let tuples = step(&mut s, &spec, &cfg, true).unwrap();
            let p = s.total_momentum();
            assert!((p - p0).norm() <= 1e-10 * p0.norm());
            for (pt, t) in s.particles.iter().zip(&tuples) {
                assert!((pt.f - Mat3::IDENTITY).frobenius() < 1e-9);
                assert!(t.s.frobenius() < 1e-9);
            }
        }
    }

    #[test]
    fn rollout_length_and_determinism() {
        let grid = GridConfig::new(16);
        let h = grid.h();
        let s0 = block(grid, Vec3::new(6.0 * h, 4.0 * h, 6.0 * h), 2, Vec3::ZERO);
        let cfg = SimConfig::new(5e-4, 0);
        let spec = MaterialSpec::elastic(2e3, 2e3);
        let t0 = rollout(&s0, &spec, &cfg, true).unwrap();
        assert_eq!(t0.frames.len(), 1);
        assert_eq!(t0.frames[0], s0.particles);
        assert!(t0.tuples.is_empty());

        let cfg = SimConfig::new(5e-4, 50);
        let a = rollout(&s0, &spec, &cfg, true).unwrap();
        let b = rollout(&s0, &spec, &cfg, true).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.frames.len(), 51);
        assert_eq!(a.tuples.len(), 50);
        let y0: f64 = a.frames[0].iter().map(|p| p.x.y).sum();
        let y1: f64 = a.frames[50].iter().map(|p| p.x.y).sum();
        assert!(y1 < y0);
    }

    #[test]
    fn divergence_and_cfl_reported() {
        let grid = GridConfig::new(16);
        let (m, vol) = grid.particle_mass_volume(DEFAULT_DENSITY);
        let mut p = ParticleState::at_rest(Vec3::splat(0.5), m, vol);
        p.v = Vec3::new(100.0, 0.0, 0.0);
        let s = SimState {
            particles: vec![p],
            grid,
        };
        let err = rollout(&s, &Inert, &SimConfig::new(1e-3, 2), false).unwrap_err();
        assert!(matches!(err, Error::Cfl { step: 0, .. }));
    }

    #[test]
    fn suggested_dt_bounds() {
        let h = 1.0 / 31.0;
        let soft = MaterialSpec::elastic(350.0, 500.0);
        assert_eq!(suggest_dt(&soft, h, DEFAULT_DENSITY, 1.0), 5e-4);
        let stiff = MaterialSpec::sand(9e6, 9e6, 0.3);
        let dt = suggest_dt(&stiff, h, DEFAULT_DENSITY, 1.0);
        assert!(dt < 1e-4 && dt >= 1e-5);
    }
}
