//! Analytical constitutive models written as tape programs. Branches of the
//! return mappings become row masks; norms are floored so the branch not
//! taken stays finite and contributes a zero adjoint.

use super::rollout::DiffProvider;
use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::Result;
use crate::materials::{MaterialKind, MaterialSpec};
use crate::tensor3::HENCKY_FLOOR;

const NORM_SQ_FLOOR: f64 = 1e-24;

struct Strain {
    u: Var,
    v: Var,
    sigma: Var,
    eps: Var,
    trace: Var,
    mean: Var,
    dev: Var,
    dev_norm: Var,
}

fn strain(tape: &mut Tape, f: Var) -> Result<Strain> {
    let (u, sigma, v) = tape.svd3_parts(f)?;
    let floored = tape.clamp_min(sigma, HENCKY_FLOOR);
    let eps = tape.log(floored);
    let trace = tape.sum_cols(eps);
    let mean = tape.scale(trace, 1.0 / 3.0);
    let dev = tape.sub(eps, mean);
    let sq = tape.square(dev);
    let sq = tape.sum_cols(sq);
    let sq = tape.clamp_min(sq, NORM_SQ_FLOOR);
    let dev_norm = tape.sqrt(sq);
    Ok(Strain {
        u,
        v,
        sigma,
        eps,
        trace,
        mean,
        dev,
        dev_norm,
    })
}

fn positive_rows(tape: &Tape, v: Var) -> Vec<bool> {
    tape.value(v).data.iter().map(|&x| x > 0.0).collect()
}

/// `ε − δγ ε̂/‖ε̂‖` mapped back to a deformation gradient.
fn radial_return(tape: &mut Tape, s: &Strain, delta_gamma: Var) -> Var {
    let ratio = tape.div(delta_gamma, s.dev_norm);
    let corr = tape.mul(s.dev, ratio);
    let eps_new = tape.sub(s.eps, corr);
    let sig = tape.exp(eps_new);
    tape.usv(s.u, sig, s.v)
}

impl DiffProvider for MaterialSpec {
    fn parameters(&self) -> Vec<Tensor> {
        Vec::new()
    }

    fn project(&self, tape: &mut Tape, _params: &[Var], f: Var, dt: f64) -> Result<Var> {
        let mu = self.mu;
        match self.kind {
            MaterialKind::Elastic => Ok(f),
            MaterialKind::Newtonian => {
                let j = tape.det3(f);
                let jc = tape.powf(j, 1.0 / 3.0);
                let eye = tape.constant(Tensor::identity3());
                Ok(tape.mul(eye, jc))
            }
            MaterialKind::Plasticine => {
                let s = strain(tape, f)?;
                let dg = tape.offset(s.dev_norm, -self.tau_y()? / (2.0 * mu));
                let mask = positive_rows(tape, dg);
                let fp = radial_return(tape, &s, dg);
                Ok(tape.select(mask, fp, f))
            }
            MaterialKind::Sand => {
                let alpha = self.sand_alpha()?;
                let s = strain(tape, f)?;
                let expand = positive_rows(tape, s.trace);
                let k = alpha * (3.0 * self.lambda + 2.0 * mu) / (2.0 * mu);
                let tr = tape.scale(s.trace, k);
                let dg = tape.add(s.dev_norm, tr);
                let yielding = positive_rows(tape, dg);
                let fp = radial_return(tape, &s, dg);
                let inner = tape.select(yielding, fp, f);
                let vt = tape.transpose3(s.v);
                let rot = tape.matmul3(s.u, vt);
                Ok(tape.select(expand, rot, inner))
            }
            MaterialKind::NonNewtonian => {
                let (tau_y, eta) = (self.tau_y()?, self.eta()?);
                let s = strain(tape, f)?;
                let s_norm = tape.scale(s.dev_norm, 2.0 * mu);
                let dg = tape.offset(s_norm, -tau_y);
                let mask = positive_rows(tape, dg);
                let sig_sq = tape.square(s.sigma);
                let sig_sq = tape.sum_cols(sig_sq);
                let mu_hat = tape.scale(sig_sq, mu / 3.0);
                let inv = tape.powf(mu_hat, -1.0);
                let q = tape.scale(inv, eta / (2.0 * dt));
                let denom = tape.offset(q, 1.0);
                let relax = tape.div(dg, denom);
                let s_hat = tape.sub(s_norm, relax);
                let s_hat = tape.scale(s_hat, 1.0 / (2.0 * mu));
                let coef = tape.div(s_hat, s.dev_norm);
                let dev = tape.mul(s.dev, coef);
                let eps_new = tape.add(dev, s.mean);
                let sig = tape.exp(eps_new);
                let fp = tape.usv(s.u, sig, s.v);
                Ok(tape.select(mask, fp, f))
            }
        }
    }

    fn stress(&self, tape: &mut Tape, _params: &[Var], f_proj: Var, c: Var) -> Result<Var> {
        let (mu, lambda) = (self.mu, self.lambda);
        let j = tape.det3(f_proj);
        let eye = tape.constant(Tensor::identity3());
        let kirchhoff = match self.kind {
            MaterialKind::Elastic => {
                let ft = tape.transpose3(f_proj);
                let b = tape.matmul3(f_proj, ft);
                let b = tape.scale(b, mu);
                let lnj = tape.log(j);
                let coef = tape.scale(lnj, lambda);
                let coef = tape.offset(coef, -mu);
                let iso = tape.mul(eye, coef);
                tape.add(b, iso)
            }
            MaterialKind::Newtonian => {
                let kappa = 2.0 / 3.0 * mu + lambda;
                let j6 = tape.powf(j, -6.0);
                let p = tape.sub(j, j6);
                let p = tape.scale(p, kappa);
                let iso = tape.mul(eye, p);
                let ct = tape.transpose3(c);
                let sym = tape.add(c, ct);
                let visc = tape.scale(sym, 0.5 * mu);
                tape.add(iso, visc)
            }
            MaterialKind::Plasticine | MaterialKind::Sand | MaterialKind::NonNewtonian => {
                let s = strain(tape, f_proj)?;
                let dev = tape.scale(s.eps, 2.0 * mu);
                let vol = tape.scale(s.trace, lambda);
                let principal = tape.add(dev, vol);
                tape.usv(s.u, principal, s.u)
            }
        };
        Ok(tape.div(kirchhoff, j))
    }
}
