//! Analytical return mappings and stress laws for the five material families.
//!
//! These are the ground-truth generators for the dataset and the reference
//! the neural model is measured against. Stresses are Cauchy stresses; the
//! laws are written in Kirchhoff form (`J S = ...`) and divided by `J`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mpm::ConstitutiveProvider;
use crate::tensor3::{compose_usv, hencky, svd3, Mat3, Vec3};

/// Spatial dimension used by the viscoplastic mapping.
const DIM: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum MaterialKind {
    Elastic,
    Newtonian,
    Plasticine,
    Sand,
    NonNewtonian,
}

impl MaterialKind {
    pub const ALL: [MaterialKind; 5] = [
        MaterialKind::Elastic,
        MaterialKind::Newtonian,
        MaterialKind::Plasticine,
        MaterialKind::Sand,
        MaterialKind::NonNewtonian,
    ];

    pub fn code(self) -> u8 {
        match self {
            MaterialKind::Elastic => 0,
            MaterialKind::Newtonian => 1,
            MaterialKind::Plasticine => 2,
            MaterialKind::Sand => 3,
            MaterialKind::NonNewtonian => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        MaterialKind::ALL.get(code as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MaterialKind::Elastic => "elastic",
            MaterialKind::Newtonian => "newtonian",
            MaterialKind::Plasticine => "plasticine",
            MaterialKind::Sand => "sand",
            MaterialKind::NonNewtonian => "non-newtonian",
        }
    }

    /// Admissible parameter box as `(mu, lambda, tau_y, theta_fric, eta)`
    /// ranges; `None` where the kind has no such parameter.
    pub fn ranges(self) -> ParamRanges {
        match self {
            MaterialKind::Elastic => ParamRanges {
                mu: (350.0, 2_595_196.0),
                lambda: (500.0, 2_580_120.0),
                tau_y: None,
                theta_fric: None,
                eta: None,
            },
            MaterialKind::Newtonian => ParamRanges {
                mu: (50.0, 1e3),
                lambda: (30.0, 5e5),
                tau_y: None,
                theta_fric: None,
                eta: None,
            },
            MaterialKind::Plasticine => ParamRanges {
                mu: (1e4, 1e6),
                lambda: (1e4, 3e6),
                tau_y: Some((5e3, 1e4)),
                theta_fric: None,
                eta: None,
            },
            MaterialKind::Sand => ParamRanges {
                mu: (2400.0, 9e6),
                lambda: (2400.0, 9e6),
                tau_y: None,
                theta_fric: Some((0.01, 0.4)),
                eta: None,
            },
            MaterialKind::NonNewtonian => ParamRanges {
                mu: (1e3, 2e6),
                lambda: (1e3, 2e6),
                tau_y: Some((1e3, 2e6)),
                theta_fric: None,
                eta: Some((0.1, 100.0)),
            },
        }
    }
}

impl fmt::Display for MaterialKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MaterialKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('_', "-").as_str() {
            "elastic" => Ok(MaterialKind::Elastic),
            "newtonian" => Ok(MaterialKind::Newtonian),
            "plasticine" => Ok(MaterialKind::Plasticine),
            "sand" => Ok(MaterialKind::Sand),
            "non-newtonian" | "nonnewtonian" => Ok(MaterialKind::NonNewtonian),
            other => Err(Error::Argument(format!("unknown material `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ParamRanges {
    pub mu: (f64, f64),
    pub lambda: (f64, f64),
    pub tau_y: Option<(f64, f64)>,
    pub theta_fric: Option<(f64, f64)>,
    pub eta: Option<(f64, f64)>,
}

/// Material family plus physical parameters (Pa, radians, Pa·s).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub kind: MaterialKind,
    pub mu: f64,
    pub lambda: f64,
    pub tau_y: Option<f64>,
    pub theta_fric: Option<f64>,
    pub eta: Option<f64>,
}

impl MaterialSpec {
    pub fn elastic(mu: f64, lambda: f64) -> Self {
        MaterialSpec {
            kind: MaterialKind::Elastic,
            mu,
            lambda,
            tau_y: None,
            theta_fric: None,
            eta: None,
        }
    }

    pub fn newtonian(mu: f64, lambda: f64) -> Self {
        MaterialSpec {
            kind: MaterialKind::Newtonian,
            ..MaterialSpec::elastic(mu, lambda)
        }
    }

    pub fn plasticine(mu: f64, lambda: f64, tau_y: f64) -> Self {
        MaterialSpec {
            kind: MaterialKind::Plasticine,
            tau_y: Some(tau_y),
            ..MaterialSpec::elastic(mu, lambda)
        }
    }

    pub fn sand(mu: f64, lambda: f64, theta_fric: f64) -> Self {
        MaterialSpec {
            kind: MaterialKind::Sand,
            theta_fric: Some(theta_fric),
            ..MaterialSpec::elastic(mu, lambda)
        }
    }

    pub fn non_newtonian(mu: f64, lambda: f64, tau_y: f64, eta: f64) -> Self {
        MaterialSpec {
            kind: MaterialKind::NonNewtonian,
            tau_y: Some(tau_y),
            eta: Some(eta),
            ..MaterialSpec::elastic(mu, lambda)
        }
    }

    /// Fixed five-slot parameter block `[mu, lambda, tau_y, theta_fric, eta]`,
    /// absent parameters stored as zero.
    pub fn to_block(&self) -> [f64; 5] {
        [
            self.mu,
            self.lambda,
            self.tau_y.unwrap_or(0.0),
            self.theta_fric.unwrap_or(0.0),
            self.eta.unwrap_or(0.0),
        ]
    }

    pub fn from_block(kind: MaterialKind, b: [f64; 5]) -> Self {
        let r = kind.ranges();
        MaterialSpec {
            kind,
            mu: b[0],
            lambda: b[1],
            tau_y: r.tau_y.map(|_| b[2]),
            theta_fric: r.theta_fric.map(|_| b[3]),
            eta: r.eta.map(|_| b[4]),
        }
    }

    pub fn tau_y(&self) -> Result<f64> {
        self.tau_y.ok_or(Error::MissingField("tau_y"))
    }

    pub fn theta_fric(&self) -> Result<f64> {
        self.theta_fric.ok_or(Error::MissingField("theta_fric"))
    }

    pub fn eta(&self) -> Result<f64> {
        self.eta.ok_or(Error::MissingField("eta"))
    }

    /// Drucker-Prager cone slope.
    pub fn sand_alpha(&self) -> Result<f64> {
        let s = self.theta_fric()?.sin();
        Ok((2.0_f64 / 3.0).sqrt() * 2.0 * s / (3.0 - s))
    }

    /// Longitudinal elastic wave speed `sqrt((λ + 2μ)/ρ)`.
    pub fn wave_speed(&self, density: f64) -> f64 {
        ((self.lambda + 2.0 * self.mu) / density).sqrt()
    }
}

fn check(field: &'static str, value: f64, (lo, hi): (f64, f64)) -> Result<()> {
    if value.is_finite() && value >= lo && value <= hi {
        Ok(())
    } else {
        Err(Error::OutOfRange {
            field,
            value,
            lo,
            hi,
        })
    }
}

fn check_opt(field: &'static str, value: Option<f64>, range: Option<(f64, f64)>) -> Result<()> {
    match range {
        Some(r) => check(field, value.ok_or(Error::MissingField(field))?, r),
        None => Ok(()),
    }
}

/// Returns the spec unchanged when every parameter its kind needs is
/// present and inside the admissible range.
pub fn validate_params(spec: MaterialSpec) -> Result<MaterialSpec> {
    let r = spec.kind.ranges();
    check("mu", spec.mu, r.mu)?;
    check("lambda", spec.lambda, r.lambda)?;
    check_opt("tau_y", spec.tau_y, r.tau_y)?;
    check_opt("theta_fric", spec.theta_fric, r.theta_fric)?;
    check_opt("eta", spec.eta, r.eta)?;
    Ok(spec)
}

fn positive_det(f: &Mat3) -> Result<f64> {
    let j = f.det();
    if j > 0.0 && j.is_finite() {
        Ok(j)
    } else {
        Err(Error::SingularDeformation { det: j })
    }
}

/// Deviatoric part and its norm.
fn deviator(eps: Vec3) -> (Vec3, f64) {
    let mean = eps.sum() / 3.0;
    let dev = eps - Vec3::splat(mean);
    (dev, dev.norm())
}

/// Return mapping `F -> F_proj` for the given material.
pub fn project_deformation(spec: &MaterialSpec, f: &Mat3, dt: f64) -> Result<Mat3> {
    positive_det(f)?;
    match spec.kind {
        MaterialKind::Elastic => Ok(*f),
        MaterialKind::Newtonian => Ok(Mat3::scalar(f.det().cbrt())),
        MaterialKind::Plasticine => {
            let tau_y = spec.tau_y()?;
            let svd = svd3(f)?;
            let eps = hencky(svd.sigma);
            let (dev, dev_norm) = deviator(eps);
            let delta_gamma = dev_norm - tau_y / (2.0 * spec.mu);
            if delta_gamma <= 0.0 {
                return Ok(*f);
            }
            let eps_new = eps - dev * (delta_gamma / dev_norm);
            Ok(compose_usv(&svd.u, eps_new.map(f64::exp), &svd.v))
        }
        MaterialKind::Sand => {
            let alpha = spec.sand_alpha()?;
            let svd = svd3(f)?;
            let eps = hencky(svd.sigma);
            let tr = eps.sum();
            if tr > 0.0 {
                return Ok(svd.rotation());
            }
            let (dev, dev_norm) = deviator(eps);
            let delta_gamma =
                dev_norm + alpha * (3.0 * spec.lambda + 2.0 * spec.mu) * tr / (2.0 * spec.mu);
            if delta_gamma <= 0.0 {
                return Ok(*f);
            }
            let eps_new = eps - dev * (delta_gamma / dev_norm);
            Ok(compose_usv(&svd.u, eps_new.map(f64::exp), &svd.v))
        }
        MaterialKind::NonNewtonian => {
            if !(dt > 0.0) {
                return Err(Error::Argument(format!("dt must be positive, got {dt}")));
            }
            let tau_y = spec.tau_y()?;
            let eta = spec.eta()?;
            let svd = svd3(f)?;
            let eps = hencky(svd.sigma);
            let (dev, dev_norm) = deviator(eps);
            let s_norm = 2.0 * spec.mu * dev_norm;
            let delta_gamma = s_norm - tau_y;
            if delta_gamma <= 0.0 {
                return Ok(*f);
            }
            let mu_hat = spec.mu / DIM * svd.sigma.norm_squared();
            let s_hat = s_norm - delta_gamma / (1.0 + eta / (2.0 * mu_hat * dt));
            let mean = eps.sum() / DIM;
            let eps_new = dev * (s_hat / (2.0 * spec.mu) / dev_norm) + Vec3::splat(mean);
            Ok(compose_usv(&svd.u, eps_new.map(f64::exp), &svd.v))
        }
    }
}

/// Cauchy stress for a projected deformation gradient. `c` is the affine
/// velocity (velocity gradient) and only matters for Newtonian fluids.
pub fn cauchy_stress(spec: &MaterialSpec, f_proj: &Mat3, c: &Mat3) -> Result<Mat3> {
    let j = positive_det(f_proj)?;
    let mu = spec.mu;
    let lambda = spec.lambda;
    let kirchhoff = match spec.kind {
        MaterialKind::Elastic => {
            let b = *f_proj * f_proj.transpose();
            b * mu + Mat3::scalar(lambda * j.ln() - mu)
        }
        MaterialKind::Newtonian => {
            let kappa = 2.0 / 3.0 * mu + lambda;
            Mat3::scalar(kappa * (j - j.powi(-6))) + (*c + c.transpose()) * (0.5 * mu)
        }
        MaterialKind::Plasticine | MaterialKind::Sand | MaterialKind::NonNewtonian => {
            let svd = svd3(f_proj)?;
            let eps = hencky(svd.sigma);
            let principal = eps * (2.0 * mu) + Vec3::splat(lambda * eps.sum());
            compose_usv(&svd.u, principal, &svd.u)
        }
    };
    Ok(kirchhoff * (1.0 / j))
}

impl ConstitutiveProvider for MaterialSpec {
    fn project(&self, f: &Mat3, dt: f64) -> Result<Mat3> {
        project_deformation(self, f, dt)
    }

    fn stress(&self, f_proj: &Mat3, c: &Mat3) -> Result<Mat3> {
        cauchy_stress(self, f_proj, c)
    }
}
