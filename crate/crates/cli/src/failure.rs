//! Exit-code classification.

use std::fmt;
use std::path::PathBuf;

use maskctl_core::CoreError;

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_MISSING: u8 = 2;
pub const EXIT_INVALID_DATA: u8 = 3;
pub const EXIT_NUMERICAL: u8 = 4;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Missing(PathBuf),
    InvalidData(String),
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "usage: {m}"),
            Failure::Missing(p) => write!(f, "missing artifact: {}", p.display()),
            Failure::InvalidData(m) => write!(f, "invalid input data: {m}"),
        }
    }
}

impl std::error::Error for Failure {}

fn core_code(e: &CoreError) -> u8 {
    match e {
        CoreError::Config(_) | CoreError::Argument(_) => EXIT_USAGE,
        CoreError::Shape(_)
        | CoreError::Vocabulary(_)
        | CoreError::InvalidData(_)
        | CoreError::Codec(_)
        | CoreError::Tensor(_) => EXIT_INVALID_DATA,
        CoreError::Numerical { .. } => EXIT_NUMERICAL,
        CoreError::Io(io) if io.kind() == std::io::ErrorKind::NotFound => EXIT_MISSING,
        CoreError::Io(_) => EXIT_USAGE,
    }
}

/// The first classifiable cause decides the code; anything else is a usage
/// error.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(f) = cause.downcast_ref::<Failure>() {
            return match f {
                Failure::Usage(_) => EXIT_USAGE,
                Failure::Missing(_) => EXIT_MISSING,
                Failure::InvalidData(_) => EXIT_INVALID_DATA,
            };
        }
        if let Some(e) = cause.downcast_ref::<CoreError>() {
            return core_code(e);
        }
        if let Some(io) = cause.downcast_ref::<std::io::Error>() {
            if io.kind() == std::io::ErrorKind::NotFound {
                return EXIT_MISSING;
            }
        }
    }
    EXIT_USAGE
}
