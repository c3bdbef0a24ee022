//! `UPHY` dataset files.
//!
//! ```text
//! magic "UPHY" | version u32 | trajectory count u32
//! per trajectory:
//!   id u64 | kind u8 | params f64[5] | particles u32 | steps u32 | dt f64
//!   geometry u8 | dims f64[3] | center f64[3] | velocity f64[3] | angular f64[3] | motion u8
//!   grid n u32 | boundary width u32 | boundary kind u8 | gravity f64[3]
//!   mass f64[P] | volume f64[P]
//!   positions f32[(T+1)·P·3]
//!   tuples f32[T·P·36]            (F, F_proj, C, S per particle per step)
//!   velocities f32[(T+1)·P·3]
//!   final C f32[P·9] | final F f32[P·9]
//!   crc32 u32                     (over everything from `id` on)
//! ```
//!
//! The frame state at step `t < T` takes `C` and `F` from the step's tuples.

use std::fs;
use std::path::Path;

use super::{Dataset, Geometry, MotionTag, Record, SceneConfig};
use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::materials::{MaterialKind, MaterialSpec};
use crate::mpm::{BoundaryKind, GridConfig, ParticleState, SupervisionTuple, Trajectory};
use crate::tensor3::{Mat3, Vec3};

pub const DATASET_MAGIC: [u8; 4] = *b"UPHY";
pub const DATASET_VERSION: u32 = 1;

fn vec3(w: &mut Writer, v: Vec3) {
    for k in 0..3 {
        w.f64(v[k]);
    }
}

fn read_vec3(r: &mut Reader, what: &str) -> Result<Vec3> {
    Ok(Vec3::new(r.f64(what)?, r.f64(what)?, r.f64(what)?))
}

fn encode_record(w: &mut Writer, rec: &Record) -> Result<()> {
    let t = &rec.trajectory;
    let p = t.num_particles();
    let steps = t.steps();
    if t.frames.iter().any(|f| f.len() != p)
        || t.tuples.len() != steps
        || t.tuples.iter().any(|s| s.len() != p)
    {
        return Err(Error::Argument(format!(
            "trajectory {} has ragged frames or tuples",
            rec.id
        )));
    }
    let start = w.buf.len();
    let s = &rec.scene;
    w.u64(rec.id);
    w.u8(s.material.kind.code());
    for v in s.material.to_block() {
        w.f64(v);
    }
    w.u32(p as u32);
    w.u32(steps as u32);
    w.f64(t.dt);
    w.u8(s.geometry.code());
    for v in s.geometry.dims() {
        w.f64(v);
    }
    vec3(w, s.center);
    vec3(w, s.initial_velocity);
    vec3(w, s.angular_velocity);
    w.u8(s.motion_tag.code());
    w.u32(t.grid.n as u32);
    w.u32(t.grid.boundary_width as u32);
    w.u8(t.grid.boundary_kind.code());
    vec3(w, rec.gravity);
    let first = t.frames.first().map(Vec::as_slice).unwrap_or(&[]);
    for q in first {
        w.f64(q.mass);
    }
    for q in first {
        w.f64(q.volume0);
    }
    for frame in &t.frames {
        w.f32s(frame.iter().flat_map(|q| q.x.to_array()));
    }
    for step in &t.tuples {
        for tu in step {
            w.f32s(
                tu.f.0
                    .into_iter()
                    .chain(tu.f_proj.0)
                    .chain(tu.c.0)
                    .chain(tu.s.0),
            );
        }
    }
    for frame in &t.frames {
        w.f32s(frame.iter().flat_map(|q| q.v.to_array()));
    }
    let last = t.frames.last().map(Vec::as_slice).unwrap_or(&[]);
    w.f32s(last.iter().flat_map(|q| q.c.0));
    w.f32s(last.iter().flat_map(|q| q.f.0));
    let crc = crc32fast::hash(&w.buf[start..]);
    w.u32(crc);
    Ok(())
}

fn mat(v: &[f64]) -> Mat3 {
    Mat3::from_slice(v)
}

fn decode_record(r: &mut Reader) -> Result<Record> {
    let start = r.pos();
    let id = r.u64("trajectory id")?;
    let kind_code = r.u8("material kind")?;
    let kind = MaterialKind::from_code(kind_code).ok_or_else(|| {
        Error::Argument(format!(
            "trajectory {id}: unknown material code {kind_code}"
        ))
    })?;
    let mut block = [0.0; 5];
    for b in &mut block {
        *b = r.f64("parameter block")?;
    }
    let p = r.u32("particle count")? as usize;
    let steps = r.u32("step count")? as usize;
    let dt = r.f64("dt")?;
    let geo = r.u8("geometry")?;
    let dims = [r.f64("geometry")?, r.f64("geometry")?, r.f64("geometry")?];
    let geometry = Geometry::from_code(geo, dims)
        .ok_or_else(|| Error::Argument(format!("trajectory {id}: unknown geometry {geo}")))?;
    let center = read_vec3(r, "center")?;
    let initial_velocity = read_vec3(r, "velocity")?;
    let angular_velocity = read_vec3(r, "angular velocity")?;
    let mo = r.u8("motion tag")?;
    let motion_tag = MotionTag::from_code(mo)
        .ok_or_else(|| Error::Argument(format!("trajectory {id}: unknown motion tag {mo}")))?;
    let n = r.u32("grid size")? as usize;
    let boundary_width = r.u32("boundary width")? as usize;
    let bk = r.u8("boundary kind")?;
    let boundary_kind = BoundaryKind::from_code(bk)
        .ok_or_else(|| Error::Argument(format!("trajectory {id}: unknown boundary {bk}")))?;
    let gravity = read_vec3(r, "gravity")?;
    let mass: Vec<f64> = (0..p).map(|_| r.f64("mass")).collect::<Result<_>>()?;
    let volume: Vec<f64> = (0..p).map(|_| r.f64("volume")).collect::<Result<_>>()?;

    let frames_len = (steps + 1)
        .checked_mul(p)
        .ok_or_else(|| Error::Truncated(format!("trajectory {id}: sizes overflow")))?;
    let positions = r.f32s(frames_len * 3, "positions")?;
    let tuples_raw = r.f32s(steps * p * 36, "supervision tuples")?;
    let velocities = r.f32s(frames_len * 3, "velocities")?;
    let last_c = r.f32s(p * 9, "final C")?;
    let last_f = r.f32s(p * 9, "final F")?;
    let computed = crc32fast::hash(r.slice_since(start));
    let stored = r.u32("checksum")?;
    if computed != stored {
        return Err(Error::Crc { id });
    }

    let tuples: Vec<Vec<SupervisionTuple>> = if p == 0 {
        vec![Vec::new(); steps]
    } else {
        tuples_raw
            .chunks_exact(p * 36)
            .map(|step| {
                step.chunks_exact(36)
                    .map(|c| SupervisionTuple {
                        f: mat(&c[0..9]),
                        f_proj: mat(&c[9..18]),
                        c: mat(&c[18..27]),
                        s: mat(&c[27..36]),
                    })
                    .collect()
            })
            .collect()
    };
    let frames: Vec<Vec<ParticleState>> = (0..=steps)
        .map(|t| {
            (0..p)
                .map(|i| {
                    let k = (t * p + i) * 3;
                    let (c, f) = if t < steps {
                        (tuples[t][i].c, tuples[t][i].f)
                    } else {
                        (
                            mat(&last_c[i * 9..i * 9 + 9]),
                            mat(&last_f[i * 9..i * 9 + 9]),
                        )
                    };
                    ParticleState {
                        x: Vec3::new(positions[k], positions[k + 1], positions[k + 2]),
                        v: Vec3::new(velocities[k], velocities[k + 1], velocities[k + 2]),
                        c,
                        f,
                        mass: mass[i],
                        volume0: volume[i],
                    }
                })
                .collect()
        })
        .collect();

    Ok(Record {
        id,
        scene: SceneConfig {
            geometry,
            center,
            initial_velocity,
            angular_velocity,
            material: MaterialSpec::from_block(kind, block),
            motion_tag,
        },
        gravity,
        trajectory: Trajectory {
            grid: GridConfig {
                n,
                boundary_width,
                boundary_kind,
            },
            dt,
            frames,
            tuples,
        },
    })
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>> {
    ds.validate()?;
    let mut w = Writer::default();
    w.bytes(&DATASET_MAGIC);
    w.u32(DATASET_VERSION);
    w.u32(ds.records.len() as u32);
    for rec in &ds.records {
        encode_record(&mut w, rec)?;
    }
    Ok(w.buf)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = Reader::new(bytes);
    r.magic(DATASET_MAGIC)?;
    let version = r.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::BadVersion(version));
    }
    let count = r.u32("trajectory count")?;
    let mut ds = Dataset::default();
    for _ in 0..count {
        ds.records.push(decode_record(&mut r)?);
    }
    if !r.at_end() {
        return Err(Error::Argument("trailing bytes after dataset".into()));
    }
    ds.validate()?;
    Ok(ds)
}

pub fn write_dataset(ds: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, encode_dataset(ds)?)?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
