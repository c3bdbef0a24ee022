//! Latent-conditioned projection and stress networks.
//!
//! The projection network maps `[F, U, Vᵀ, z]` to a residual added to `F`;
//! the stress network maps invariants of `F_proj`, the affine velocity `C`
//! and `z` to a stress that is symmetrised before use.

mod checkpoint;
mod provider;

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::tensor3::{Mat3, Svd3};

pub use checkpoint::{
    decode_checkpoint, encode_checkpoint, read_checkpoint, write_checkpoint, Checkpoint,
    CHECKPOINT_VERSION,
};
pub use provider::NeuralProvider;

pub const LATENT_DIM: usize = 32;
pub const PROJECTION_FEATURES: usize = 59;
pub const STRESS_FEATURES: usize = 57;
pub const PROJECTION_HIDDEN: usize = 32;
pub const STRESS_HIDDEN: usize = 128;
/// Linear layers per network.
pub const DEPTH: usize = 5;
/// Floor applied to `det F` and `F[0,0]` before taking logarithms.
pub const LOG_FLOOR: f64 = 1e-6;

/// Per-trajectory material code.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Latent(Vec<f64>);

impl TryFrom<Vec<f64>> for Latent {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Latent::new(v)
    }
}

impl From<Latent> for Vec<f64> {
    fn from(z: Latent) -> Self {
        z.0
    }
}

impl Latent {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() != LATENT_DIM {
            return Err(Error::Argument(format!(
                "latent needs {LATENT_DIM} values, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite latent".into()));
        }
        Ok(Latent(values))
    }

    pub fn zeros() -> Self {
        Latent(vec![0.0; LATENT_DIM])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::row_vector(self.0.clone())
    }
}

/// Standard-normal latent.
pub fn init_latent(rng: &mut impl Rng) -> Latent {
    Latent(
        (0..LATENT_DIM)
            .map(|_| StandardNormal.sample(rng))
            .collect(),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Gelu,
}

impl Activation {
    pub fn code(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Gelu => 1,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Gelu),
            _ => None,
        }
    }
}

/// `y = act(x W + b)` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: Tensor,
    pub b: Tensor,
    pub activation: Activation,
}

impl Layer {
    pub fn inputs(&self) -> usize {
        self.w.rows
    }

    pub fn outputs(&self) -> usize {
        self.w.cols
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Tape handles of one network's parameters, `(W, b)` per layer.
pub type MlpVars = Vec<(Var, Var)>;

impl Mlp {
    /// Fan-in scaled uniform init with GELU between layers; the last layer
    /// is scaled by `head_scale` (zero gives an all-zero head).
    pub fn init(widths: &[usize], head_scale: f64, rng: &mut impl Rng) -> Self {
        let n = widths.len() - 1;
        let layers = (0..n)
            .map(|i| {
                let (din, dout) = (widths[i], widths[i + 1]);
                let bound = (1.0 / din as f64).sqrt() * if i + 1 == n { head_scale } else { 1.0 };
                let mut draw = |len| {
                    (0..len)
                        .map(|_| {
                            if bound > 0.0 {
                                rng.random_range(-bound..bound)
                            } else {
                                0.0
                            }
                        })
                        .collect::<Vec<f64>>()
                };
                let w = Tensor::new(din, dout, draw(din * dout));
                let b = Tensor::row_vector(draw(dout));
                Layer {
                    w,
                    b,
                    activation: if i + 1 == n {
                        Activation::Identity
                    } else {
                        Activation::Gelu
                    },
                }
            })
            .collect();
        Mlp { layers }
    }

    pub fn validate(&self, input: usize, output: usize) -> Result<()> {
        let mut width = input;
        for (i, l) in self.layers.iter().enumerate() {
            if l.inputs() != width || l.b.shape() != (1, l.outputs()) {
                return Err(Error::Argument(format!(
                    "layer {i} has inconsistent dimensions"
                )));
            }
            width = l.outputs();
        }
        if width != output {
            return Err(Error::Argument(format!(
                "network emits {width} values, expected {output}"
            )));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn tensors(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [l.w.clone(), l.b.clone()])
            .collect()
    }

    /// Overwrites parameters from tensors ordered as [`Mlp::tensors`].
    pub fn set_tensors(&mut self, ts: &[Tensor]) {
        for (l, pair) in self.layers.iter_mut().zip(ts.chunks(2)) {
            l.w = pair[0].clone();
            l.b = pair[1].clone();
        }
    }

    pub fn register(&self, tape: &mut Tape, trainable: bool) -> MlpVars {
        self.layers
            .iter()
            .map(|l| {
                if trainable {
                    (tape.leaf(l.w.clone()), tape.leaf(l.b.clone()))
                } else {
                    (tape.constant(l.w.clone()), tape.constant(l.b.clone()))
                }
            })
            .collect()
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[(Var, Var)], x: Var) -> Var {
        let mut h = x;
        for (l, &(w, b)) in self.layers.iter().zip(vars) {
            h = tape.linear(h, w, b);
            if l.activation == Activation::Gelu {
                h = tape.gelu(h);
            }
        }
        h
    }
}

/// Projection network `g`, stress network `f`, and the factor applied to
/// the stress network's output.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub projection: Mlp,
    pub stress: Mlp,
    pub stress_scale: f64,
}

impl Model {
    pub fn init(rng: &mut impl Rng) -> Self {
        let mut pw = vec![PROJECTION_FEATURES];
        pw.extend([PROJECTION_HIDDEN; DEPTH - 1]);
        pw.push(9);
        let mut sw = vec![STRESS_FEATURES];
        sw.extend([STRESS_HIDDEN; DEPTH - 1]);
        sw.push(9);
        Model {
            projection: Mlp::init(&pw, 0.0, rng),
            stress: Mlp::init(&sw, 0.01, rng),
            stress_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.projection.validate(PROJECTION_FEATURES, 9)?;
        self.stress.validate(STRESS_FEATURES, 9)?;
        if !(self.stress_scale > 0.0) || !self.stress_scale.is_finite() {
            return Err(Error::Argument(format!(
                "invalid stress scale {}",
                self.stress_scale
            )));
        }
        Ok(())
    }

    /// All weights, projection network first.
    pub fn tensors(&self) -> Vec<Tensor> {
        let mut t = self.projection.tensors();
        t.extend(self.stress.tensors());
        t
    }

    pub fn set_tensors(&mut self, ts: &[Tensor]) {
        let n = 2 * self.projection.layers.len();
        self.projection.set_tensors(&ts[..n]);
        self.stress.set_tensors(&ts[n..]);
    }

    /// FNV-1a over the bit patterns of every weight, for frozen-weight
    /// checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in self.tensors() {
            for v in &t.data {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= byte as u64;
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

/// Tape handles of a registered [`Model`].
#[derive(Clone, Debug)]
pub struct ModelVars {
    pub projection: MlpVars,
    pub stress: MlpVars,
}

impl ModelVars {
    pub fn register(model: &Model, tape: &mut Tape, trainable: bool) -> Self {
        ModelVars {
            projection: model.projection.register(tape, trainable),
            stress: model.stress.register(tape, trainable),
        }
    }

    /// Flat list ordered as [`Model::tensors`].
    pub fn flat(&self) -> Vec<Var> {
        self.projection
            .iter()
            .chain(&self.stress)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    pub fn from_flat(model: &Model, vars: &[Var]) -> Self {
        let n = model.projection.layers.len();
        let pairs: Vec<(Var, Var)> = vars.chunks(2).map(|p| (p[0], p[1])).collect();
        ModelVars {
            projection: pairs[..n].to_vec(),
            stress: pairs[n..].to_vec(),
        }
    }
}

/// `[F, U, Vᵀ, z]` for a batch: `f: [N, 9]`, `z_rows: [N, 32]`.
pub fn projection_features_on_tape(tape: &mut Tape, f: Var, z_rows: Var) -> Result<Var> {
    let svd = tape.svd3(f)?;
    let u = tape.slice(svd, 0, 9);
    let v = tape.slice(svd, 12, 9);
    let vt = tape.transpose3(v);
    Ok(tape.concat(&[f, u, vt, z_rows]))
}

/// `[σ, FᵀF, det F, log det F, F_max, log F_max, C, z]` with
/// `F_max = max(F[0,0], 1e-6)` and the determinant floored before the log.
pub fn stress_features_on_tape(tape: &mut Tape, f_proj: Var, c: Var, z_rows: Var) -> Result<Var> {
    let svd = tape.svd3(f_proj)?;
    let sigma = tape.slice(svd, 9, 3);
    let ft = tape.transpose3(f_proj);
    let ftf = tape.matmul3(ft, f_proj);
    let det = tape.det3(f_proj);
    let det_floor = tape.clamp_min(det, LOG_FLOOR);
    let log_det = tape.log(det_floor);
    let f00 = tape.slice(f_proj, 0, 1);
    let f_max = tape.clamp_min(f00, LOG_FLOOR);
    let log_f_max = tape.log(f_max);
    Ok(tape.concat(&[sigma, ftf, det, log_det, f_max, log_f_max, c, z_rows]))
}

/// `F + g([F, U, Vᵀ, z])`
pub fn project_on_tape(
    model: &Model,
    tape: &mut Tape,
    vars: &MlpVars,
    f: Var,
    z_rows: Var,
) -> Result<Var> {
    let x = projection_features_on_tape(tape, f, z_rows)?;
    let delta = model.projection.forward(tape, vars, x);
    Ok(tape.add(f, delta))
}

/// `scale · ½(S₁ + S₁ᵀ)` with `S₁ = f(features)`.
pub fn stress_on_tape(
    model: &Model,
    tape: &mut Tape,
    vars: &MlpVars,
    f_proj: Var,
    c: Var,
    z_rows: Var,
) -> Result<Var> {
    let x = stress_features_on_tape(tape, f_proj, c, z_rows)?;
    let s1 = model.stress.forward(tape, vars, x);
    let s1t = tape.transpose3(s1);
    let sym = tape.add(s1, s1t);
    Ok(tape.scale(sym, 0.5 * model.stress_scale))
}

/// Projection-network input for one particle.
pub fn features_projection(f: &Mat3, svd: &Svd3, z: &Latent) -> Vec<f64> {
    let mut out = Vec::with_capacity(PROJECTION_FEATURES);
    out.extend_from_slice(&f.0);
    out.extend_from_slice(&svd.u.0);
    out.extend_from_slice(&svd.v.transpose().0);
    out.extend_from_slice(z.as_slice());
    out
}

/// Stress-network input for one particle.
pub fn features_stress(f_proj: &Mat3, c: &Mat3, z: &Latent) -> Result<Vec<f64>> {
    let svd = crate::tensor3::svd3(f_proj)?;
    let det = f_proj.det();
    let f_max = f_proj.get(0, 0).max(LOG_FLOOR);
    let mut out = Vec::with_capacity(STRESS_FEATURES);
    out.extend_from_slice(&svd.sigma.to_array());
    out.extend_from_slice(&(f_proj.transpose() * *f_proj).0);
    out.push(det);
    out.push(det.max(LOG_FLOOR).ln());
    out.push(f_max);
    out.push(f_max.ln());
    out.extend_from_slice(&c.0);
    out.extend_from_slice(z.as_slice());
    Ok(out)
}

fn single(tape: &Tape, v: Var) -> Result<Mat3> {
    let m = tape.value(v).mat3(0);
    if m.is_finite() {
        Ok(m)
    } else {
        Err(Error::Numeric("non-finite network output".into()))
    }
}

/// `F_proj` for one particle.
pub fn g_phi_forward(model: &Model, f: &Mat3, z: &Latent) -> Result<Mat3> {
    let mut tape = Tape::new();
    let vars = model.projection.register(&mut tape, false);
    let fv = tape.constant(Tensor::from_mat3s(&[*f]));
    let zv = tape.constant(z.to_tensor());
    let out = project_on_tape(model, &mut tape, &vars, fv, zv)?;
    single(&tape, out)
}

/// Symmetric stress for one particle.
pub fn f_theta_forward(model: &Model, f_proj: &Mat3, c: &Mat3, z: &Latent) -> Result<Mat3> {
    let mut tape = Tape::new();
    let vars = model.stress.register(&mut tape, false);
    let fv = tape.constant(Tensor::from_mat3s(&[*f_proj]));
    let cv = tape.constant(Tensor::from_mat3s(&[*c]));
    let zv = tape.constant(z.to_tensor());
    let out = stress_on_tape(model, &mut tape, &vars, fv, cv, zv)?;
    single(&tape, out)
}

/// Trajectory id → latent. Ordered so iteration is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LatentCodebook {
    pub entries: BTreeMap<u64, Latent>,
}

impl LatentCodebook {
    pub fn new() -> Self {
        LatentCodebook::default()
    }

    /// One standard-normal latent per id, drawn in the given order.
    pub fn init(ids: &[u64], rng: &mut impl Rng) -> Self {
        LatentCodebook {
            entries: ids.iter().map(|&id| (id, init_latent(rng))).collect(),
        }
    }

    pub fn get(&self, id: u64) -> Option<&Latent> {
        self.entries.get(&id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> Vec<u64> {
        self.entries.keys().copied().collect()
    }

    /// Latents stacked as `[M, 32]` in id order.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            self.entries.len(),
            LATENT_DIM,
            self.entries
                .values()
                .flat_map(|z| z.as_slice().to_vec())
                .collect(),
        )
    }

    /// Inverse of [`LatentCodebook::to_tensor`] for the same ids.
    pub fn set_from_tensor(&mut self, t: &Tensor) -> Result<()> {
        for (r, z) in self.entries.values_mut().enumerate() {
            *z = Latent::new(t.row(r).to_vec())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests;
