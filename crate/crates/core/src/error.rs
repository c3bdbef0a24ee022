use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("domain error: {0}")]
    Domain(String),

    #[error("parameter `{field}` = {value} outside [{lo}, {hi}]")]
    OutOfRange {
        field: &'static str,
        value: f64,
        lo: f64,
        hi: f64,
    },

    #[error("missing field `{0}` for this material kind")]
    MissingField(&'static str),

    #[error("singular deformation: det(F) = {det}")]
    SingularDeformation { det: f64 },

    #[error("particle {particle} at ({x}, {y}, {z}) is outside the grid interior")]
    OutOfDomain {
        particle: usize,
        x: f64,
        y: f64,
        z: f64,
    },

    #[error("time step {dt} violates CFL bound {bound} at step {step}")]
    Cfl { step: usize, dt: f64, bound: f64 },

    #[error("simulation diverged at step {step}")]
    Divergence { step: usize },

    #[error("non-finite adjoint at tape op {op}")]
    AdjointDivergence { op: usize },

    #[error("non-finite value: {0}")]
    Numeric(String),

    #[error("invalid argument: {0}")]
    Argument(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: [u8; 4], found: [u8; 4] },

    #[error("unsupported format version {0}")]
    BadVersion(u32),

    #[error("checksum mismatch in trajectory {id}")]
    Crc { id: u64 },

    #[error("truncated file: {0}")]
    Truncated(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    /// True for failures caused by numerical blow-up rather than bad input.
    pub fn is_divergence(&self) -> bool {
        matches!(
            self,
            Error::Divergence { .. }
                | Error::AdjointDivergence { .. }
                | Error::Numeric(_)
                | Error::Cfl { .. }
                | Error::SingularDeformation { .. }
                | Error::OutOfDomain { .. }
        )
    }
}
