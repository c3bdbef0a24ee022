//! Scene sampling, ground-truth trajectories and the dataset container.

mod format;

use std::io::Write;

use log::{debug, info};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::materials::{validate_params, MaterialKind, MaterialSpec};
use crate::mpm::{
    self, suggest_dt, GridConfig, ParticleState, SimConfig, SimState, Trajectory, CFL_LIMIT,
    DEFAULT_DENSITY, DEFAULT_GRAVITY,
};
use crate::tensor3::Vec3;

pub use format::{
    decode_dataset, encode_dataset, read_dataset, write_dataset, DATASET_MAGIC, DATASET_VERSION,
};

/// Attempts per trajectory slot before generation gives up.
pub const MAX_ATTEMPTS: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Geometry {
    Box {
        extents: Vec3,
    },
    Sphere {
        radius: f64,
    },
    /// Axis along y.
    Cylinder {
        radius: f64,
        height: f64,
    },
}

impl Geometry {
    pub fn code(&self) -> u8 {
        match self {
            Geometry::Box { .. } => 0,
            Geometry::Sphere { .. } => 1,
            Geometry::Cylinder { .. } => 2,
        }
    }

    pub fn dims(&self) -> [f64; 3] {
        match *self {
            Geometry::Box { extents } => extents.to_array(),
            Geometry::Sphere { radius } => [radius, 0.0, 0.0],
            Geometry::Cylinder { radius, height } => [radius, height, 0.0],
        }
    }

    pub fn from_code(code: u8, d: [f64; 3]) -> Option<Self> {
        match code {
            0 => Some(Geometry::Box {
                extents: Vec3::from_array(d),
            }),
            1 => Some(Geometry::Sphere { radius: d[0] }),
            2 => Some(Geometry::Cylinder {
                radius: d[0],
                height: d[1],
            }),
            _ => None,
        }
    }

    pub fn half_extents(&self) -> Vec3 {
        match *self {
            Geometry::Box { extents } => extents * 0.5,
            Geometry::Sphere { radius } => Vec3::splat(radius),
            Geometry::Cylinder { radius, height } => Vec3::new(radius, 0.5 * height, radius),
        }
    }

    /// Largest distance from the centre to a point of the body.
    pub fn radius(&self) -> f64 {
        match *self {
            Geometry::Sphere { radius } => radius,
            _ => self.half_extents().norm(),
        }
    }

    /// Membership of an offset from the centre.
    pub fn contains(&self, d: Vec3) -> bool {
        match *self {
            Geometry::Box { extents } => (0..3).all(|k| d[k].abs() <= 0.5 * extents[k]),
            Geometry::Sphere { radius } => d.norm_squared() <= radius * radius,
            Geometry::Cylinder { radius, height } => {
                d.x * d.x + d.z * d.z <= radius * radius && d.y.abs() <= 0.5 * height
            }
        }
    }

    pub fn scaled(&self, s: f64) -> Geometry {
        match *self {
            Geometry::Box { extents } => Geometry::Box {
                extents: extents * s,
            },
            Geometry::Sphere { radius } => Geometry::Sphere { radius: radius * s },
            Geometry::Cylinder { radius, height } => Geometry::Cylinder {
                radius: radius * s,
                height: height * s,
            },
        }
    }

    pub fn is_valid(&self) -> bool {
        let d = self.dims();
        d.iter().all(|v| v.is_finite())
            && match self {
                Geometry::Box { extents } => (0..3).all(|k| extents[k] > 0.0),
                Geometry::Sphere { radius } => *radius > 0.0,
                Geometry::Cylinder { radius, height } => *radius > 0.0 && *height > 0.0,
            }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MotionTag {
    Drop,
    Roll,
    Throw,
}

impl MotionTag {
    pub const ALL: [MotionTag; 3] = [MotionTag::Drop, MotionTag::Roll, MotionTag::Throw];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Self::ALL.get(c as usize).copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub geometry: Geometry,
    pub center: Vec3,
    pub initial_velocity: Vec3,
    pub angular_velocity: Vec3,
    pub material: MaterialSpec,
    pub motion_tag: MotionTag,
}

impl SceneConfig {
    /// Lattice points at spacing `h/2`, symmetric about the centre.
    pub fn seed_positions(&self, grid: &GridConfig) -> Vec<Vec3> {
        let s = 0.5 * grid.h();
        let half = self.geometry.half_extents();
        let counts: Vec<usize> = (0..3)
            .map(|k| ((2.0 * half[k] / s).floor() as usize).max(1))
            .collect();
        let mut out = Vec::new();
        for i in 0..counts[0] {
            for j in 0..counts[1] {
                for k in 0..counts[2] {
                    let d = Vec3::new(
                        (i as f64 - 0.5 * (counts[0] - 1) as f64) * s,
                        (j as f64 - 0.5 * (counts[1] - 1) as f64) * s,
                        (k as f64 - 0.5 * (counts[2] - 1) as f64) * s,
                    );
                    if self.geometry.contains(d) {
                        out.push(self.center + d);
                    }
                }
            }
        }
        out
    }

    pub fn particle_count(&self, grid: &GridConfig) -> usize {
        self.seed_positions(grid).len()
    }

    /// Rigid initial velocity `v + ω × (x − centre)`.
    pub fn velocity_at(&self, x: Vec3) -> Vec3 {
        self.initial_velocity + self.angular_velocity.cross(x - self.center)
    }

    pub fn max_speed(&self) -> f64 {
        self.initial_velocity.norm() + self.angular_velocity.norm() * self.geometry.radius()
    }

    /// Checks the body fits inside the grid interior and that its parameters
    /// are admissible.
    pub fn validate(&self, grid: &GridConfig) -> Result<()> {
        grid.validate()?;
        validate_params(self.material)?;
        if !self.geometry.is_valid() {
            return Err(Error::Argument(format!(
                "invalid geometry {:?}",
                self.geometry
            )));
        }
        if !(self.center.is_finite()
            && self.initial_velocity.is_finite()
            && self.angular_velocity.is_finite())
        {
            return Err(Error::Argument("scene vectors must be finite".into()));
        }
        let (lo, hi) = grid.interior();
        let half = self.geometry.half_extents();
        for k in 0..3 {
            if self.center[k] - half[k] < lo || self.center[k] + half[k] > hi {
                return Err(Error::Argument(format!(
                    "geometry leaves the interior [{lo}, {hi}] along axis {k}"
                )));
            }
        }
        Ok(())
    }

    pub fn initial_state(&self, grid: &GridConfig, density: f64) -> Result<SimState> {
        self.validate(grid)?;
        let (m, vol) = grid.particle_mass_volume(density);
        let particles: Vec<ParticleState> = self
            .seed_positions(grid)
            .into_iter()
            .map(|x| ParticleState {
                v: self.velocity_at(x),
                ..ParticleState::at_rest(x, m, vol)
            })
            .collect();
        if particles.is_empty() {
            return Err(Error::Argument("geometry seeds no particles".into()));
        }
        Ok(SimState {
            particles,
            grid: *grid,
        })
    }

    /// Time step used for ground truth: the material's stable step,
    /// additionally kept inside the CFL bound for the initial speed.
    pub fn suggested_dt(&self, grid: &GridConfig, density: f64) -> f64 {
        let speed = self.max_speed();
        let dt = suggest_dt(&self.material, grid.h(), density, speed);
        if speed > 0.0 {
            dt.min(0.5 * CFL_LIMIT * grid.h() / speed)
        } else {
            dt
        }
    }
}

/// Settings shared by every generated trajectory.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub grid: GridConfig,
    pub steps: usize,
    pub max_particles: usize,
    pub density: f64,
    pub gravity: Vec3,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            grid: GridConfig::new(16),
            steps: 100,
            max_particles: 512,
            density: DEFAULT_DENSITY,
            gravity: DEFAULT_GRAVITY,
        }
    }
}

fn log_uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    rng.random_range(lo.ln()..=hi.ln()).exp().clamp(lo, hi)
}

pub fn sample_material(kind: MaterialKind, rng: &mut impl Rng) -> MaterialSpec {
    let r = kind.ranges();
    let mu = log_uniform(rng, r.mu);
    let lambda = log_uniform(rng, r.lambda);
    let mut b = [mu, lambda, 0.0, 0.0, 0.0];
    for (slot, range) in [(2, r.tau_y), (3, r.theta_fric), (4, r.eta)] {
        if let Some(range) = range {
            b[slot] = log_uniform(rng, range);
        }
    }
    MaterialSpec::from_block(kind, b)
}

fn sample_geometry(rng: &mut impl Rng) -> Geometry {
    match rng.random_range(0..3) {
        0 => Geometry::Box {
            extents: Vec3::new(
                rng.random_range(0.15..0.3),
                rng.random_range(0.15..0.3),
                rng.random_range(0.15..0.3),
            ),
        },
        1 => Geometry::Sphere {
            radius: rng.random_range(0.08..0.15),
        },
        _ => Geometry::Cylinder {
            radius: rng.random_range(0.08..0.14),
            height: rng.random_range(0.15..0.3),
        },
    }
}

fn horizontal(rng: &mut impl Rng, speed: f64) -> Vec3 {
    let a = rng.random_range(0.0..std::f64::consts::TAU);
    Vec3::new(speed * a.cos(), 0.0, speed * a.sin())
}

/// Draws a scene for `kind`: a random primitive near the floor with a
/// drop, roll or throw velocity pattern. The body is shrunk until it seeds
/// at most `cfg.max_particles` particles.
pub fn sample_scene(kind: MaterialKind, cfg: &GenConfig, rng: &mut impl Rng) -> SceneConfig {
    let material = sample_material(kind, rng);
    let mut geometry = sample_geometry(rng);
    let motion_tag = MotionTag::ALL[rng.random_range(0..3)];
    let h = cfg.grid.h();
    let (lo, hi) = cfg.grid.interior();

    let probe = |g: Geometry| SceneConfig {
        geometry: g,
        center: Vec3::splat(0.5),
        initial_velocity: Vec3::ZERO,
        angular_velocity: Vec3::ZERO,
        material,
        motion_tag,
    };
    let room = 0.5 * (hi - lo) - h;
    let fit = (0..3)
        .map(|k| room / geometry.half_extents()[k])
        .fold(f64::INFINITY, f64::min);
    if fit < 1.0 {
        geometry = geometry.scaled(fit);
    }
    for _ in 0..32 {
        let count = probe(geometry).particle_count(&cfg.grid);
        if count <= cfg.max_particles.max(1) {
            break;
        }
        geometry =
            geometry.scaled(0.97 * (cfg.max_particles as f64 / count as f64).cbrt().min(0.99));
    }

    let half = geometry.half_extents();
    let mut center = Vec3::ZERO;
    for k in [0, 2] {
        center[k] = rng.random_range(lo + half[k]..=hi - half[k]);
    }
    let rest_y = lo + half.y;
    let (initial_velocity, angular_velocity) = match motion_tag {
        MotionTag::Drop => {
            center.y = (rest_y + rng.random_range(0.0..2.0 * h)).min(hi - half.y);
            (Vec3::new(0.0, -rng.random_range(1.0..3.0), 0.0), Vec3::ZERO)
        }
        MotionTag::Roll => {
            center.y = rest_y + 0.25 * h;
            let speed = rng.random_range(0.5..2.0);
            let v = horizontal(rng, speed);
            let r = geometry.half_extents().y;
            (v, Vec3::new(v.z / r, 0.0, -v.x / r))
        }
        MotionTag::Throw => {
            center.y = (rest_y + rng.random_range(h..4.0 * h)).min(hi - half.y);
            let speed = rng.random_range(0.5..2.0);
            let mut v = horizontal(rng, speed);
            v.y = rng.random_range(-2.5..0.5);
            let w = Vec3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
            );
            (v, w)
        }
    };
    SceneConfig {
        geometry,
        center,
        initial_velocity,
        angular_velocity,
        material,
        motion_tag,
    }
}

/// Analytical rollout of a scene with supervision tuples recorded.
pub fn generate_trajectory(
    scene: &SceneConfig,
    grid: &GridConfig,
    density: f64,
    sim: &SimConfig,
) -> Result<Trajectory> {
    let state = scene.initial_state(grid, density)?;
    mpm::rollout(&state, &scene.material, sim, true)
}

/// One stored trajectory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub id: u64,
    pub scene: SceneConfig,
    pub gravity: Vec3,
    pub trajectory: Trajectory,
}

impl Record {
    pub fn kind(&self) -> MaterialKind {
        self.scene.material.kind
    }

    pub fn sim_config(&self) -> SimConfig {
        SimConfig {
            dt: self.trajectory.dt,
            gravity: self.gravity,
            steps: self.trajectory.steps(),
        }
    }

    pub fn initial_state(&self) -> SimState {
        self.trajectory.state(0)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.records.iter().map(|r| r.id).collect()
    }

    pub fn get(&self, id: u64) -> Option<&Record> {
        self.records.iter().find(|r| r.id == id)
    }

    pub fn of_kind(&self, kind: MaterialKind) -> impl Iterator<Item = &Record> {
        self.records.iter().filter(move |r| r.kind() == kind)
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids = self.ids();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Argument("duplicate trajectory id".into()));
        }
        Ok(())
    }
}

/// Per-material generation counts.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenStats {
    pub accepted: Vec<(MaterialKind, usize)>,
    pub rejected: Vec<(MaterialKind, usize)>,
}

/// Builds `per_material` trajectories for every kind in `kinds`. Slot `i`
/// draws from its own random stream, so the result does not depend on the
/// thread count. Ids are assigned in order starting at `first_id`.
pub fn generate_dataset(
    kinds: &[MaterialKind],
    per_material: usize,
    cfg: &GenConfig,
    seed: u64,
    first_id: u64,
) -> Result<(Dataset, GenStats)> {
    if per_material == 0 {
        return Err(Error::Argument(
            "per-material count must be positive".into(),
        ));
    }
    if cfg.max_particles == 0 {
        return Err(Error::Argument("particle budget must be positive".into()));
    }
    cfg.grid.validate()?;
    let slots: Vec<(usize, MaterialKind)> = kinds
        .iter()
        .flat_map(|&k| std::iter::repeat_n(k, per_material))
        .enumerate()
        .collect();
    let results: Vec<Result<(SceneConfig, Trajectory, usize)>> = slots
        .par_iter()
        .map(|&(slot, kind)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(slot as u64);
            let mut rejected = 0;
            for _ in 0..MAX_ATTEMPTS {
                let scene = sample_scene(kind, cfg, &mut rng);
                let sim = SimConfig {
                    dt: scene.suggested_dt(&cfg.grid, cfg.density),
                    gravity: cfg.gravity,
                    steps: cfg.steps,
                };
                match generate_trajectory(&scene, &cfg.grid, cfg.density, &sim) {
                    Ok(t) => return Ok((scene, t, rejected)),
                    Err(e) if e.is_divergence() => {
                        debug!("slot {slot} ({kind}): rejected scene: {e}");
                        rejected += 1;
                    }
                    Err(e) => return Err(e),
                }
            }
            Err(Error::Divergence { step: 0 })
        })
        .collect();

    let mut dataset = Dataset::default();
    let mut stats = GenStats::default();
    for &k in kinds {
        stats.accepted.push((k, 0));
        stats.rejected.push((k, 0));
    }
    for ((slot, kind), r) in slots.iter().zip(results) {
        let (scene, trajectory, rejected) = r?;
        let i = kinds.iter().position(|k| k == kind).expect("kind listed");
        stats.accepted[i].1 += 1;
        stats.rejected[i].1 += rejected;
        dataset.records.push(Record {
            id: first_id + *slot as u64,
            scene,
            gravity: cfg.gravity,
            trajectory,
        });
    }
    for ((k, a), (_, r)) in stats.accepted.iter().zip(&stats.rejected) {
        info!("{k}: {a} trajectories, {r} rejected scenes");
    }
    Ok((dataset, stats))
}

/// `step,particle,x,y,z` rows, one per particle per frame.
pub fn write_positions_csv(positions: &[Vec<Vec3>], mut out: impl Write) -> Result<()> {
    writeln!(out, "step,particle,x,y,z")?;
    for (t, frame) in positions.iter().enumerate() {
        for (p, x) in frame.iter().enumerate() {
            writeln!(out, "{t},{p},{},{},{}", x.x, x.y, x.z)?;
        }
    }
    Ok(())
}
