use super::{project_on_tape, stress_on_tape, Latent, Model, ModelVars};
use crate::autodiff::{DiffProvider, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::mpm::ConstitutiveProvider;
use crate::tensor3::Mat3;

/// Both networks bound to one latent.
///
/// As a [`DiffProvider`] its parameters are the latent followed by the
/// network weights in [`Model::tensors`] order.
#[derive(Clone, Debug)]
pub struct NeuralProvider<'a> {
    pub model: &'a Model,
    pub z: Latent,
}

impl<'a> NeuralProvider<'a> {
    pub fn new(model: &'a Model, z: Latent) -> Self {
        NeuralProvider { model, z }
    }

    /// Mask selecting only the latent for differentiation.
    pub fn latent_only(&self) -> Vec<bool> {
        let mut m = vec![false; 1 + self.model.tensors().len()];
        m[0] = true;
        m
    }

    fn z_rows(tape: &mut Tape, z: Var, n: usize) -> Var {
        tape.gather_rows(z, vec![0; n])
    }
}

fn finite_rows(t: &Tensor) -> Result<Vec<Mat3>> {
    if t.is_finite() {
        Ok(t.to_mat3s())
    } else {
        Err(Error::Numeric("non-finite network output".into()))
    }
}

impl ConstitutiveProvider for NeuralProvider<'_> {
    fn project(&self, f: &Mat3, dt: f64) -> Result<Mat3> {
        Ok(self.project_batch(&[*f], dt)?[0])
    }

    fn stress(&self, f_proj: &Mat3, c: &Mat3) -> Result<Mat3> {
        Ok(self.stress_batch(&[*f_proj], &[*c])?[0])
    }

    fn project_batch(&self, f: &[Mat3], _dt: f64) -> Result<Vec<Mat3>> {
        let mut tape = Tape::new();
        let vars = self.model.projection.register(&mut tape, false);
        let z = tape.constant(self.z.to_tensor());
        let zr = Self::z_rows(&mut tape, z, f.len());
        let fv = tape.constant(Tensor::from_mat3s(f));
        let out = project_on_tape(self.model, &mut tape, &vars, fv, zr)?;
        finite_rows(tape.value(out))
    }

    fn stress_batch(&self, f_proj: &[Mat3], c: &[Mat3]) -> Result<Vec<Mat3>> {
        let mut tape = Tape::new();
        let vars = self.model.stress.register(&mut tape, false);
        let z = tape.constant(self.z.to_tensor());
        let zr = Self::z_rows(&mut tape, z, f_proj.len());
        let fv = tape.constant(Tensor::from_mat3s(f_proj));
        let cv = tape.constant(Tensor::from_mat3s(c));
        let out = stress_on_tape(self.model, &mut tape, &vars, fv, cv, zr)?;
        finite_rows(tape.value(out))
    }
}

impl DiffProvider for NeuralProvider<'_> {
    fn parameters(&self) -> Vec<Tensor> {
        let mut p = vec![self.z.to_tensor()];
        p.extend(self.model.tensors());
        p
    }

    fn project(&self, tape: &mut Tape, params: &[Var], f: Var, _dt: f64) -> Result<Var> {
        let n = tape.value(f).rows;
        let zr = Self::z_rows(tape, params[0], n);
        let vars = ModelVars::from_flat(self.model, &params[1..]);
        project_on_tape(self.model, tape, &vars.projection, f, zr)
    }

    fn stress(&self, tape: &mut Tape, params: &[Var], f_proj: Var, c: Var) -> Result<Var> {
        let n = tape.value(f_proj).rows;
        let zr = Self::z_rows(tape, params[0], n);
        let vars = ModelVars::from_flat(self.model, &params[1..]);
        stress_on_tape(self.model, tape, &vars.stress, f_proj, c, zr)
    }
}
