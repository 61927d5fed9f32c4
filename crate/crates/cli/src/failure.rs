use std::fmt;

use geofaith::entropy::EntropyError;
use geofaith::geometry::GeometryError;
use geofaith::pipeline::PipelineError;
use geofaith::reward::RewardError;
use geofaith::spectral::SpectralError;
use geofaith::trace_store::StoreError;
use geofaith::vae::VaeError;

/// A failed run. `Analysis` exits with 1, `Usage` (bad flags, paths, I/O)
/// with 2.
#[derive(Debug)]
pub enum Failure {
    Analysis(String),
    Usage(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Analysis(_) => 1,
            Failure::Usage(_) => 2,
        }
    }

    pub fn usage(msg: impl fmt::Display) -> Self {
        Failure::Usage(msg.to_string())
    }

    pub fn analysis(msg: impl fmt::Display) -> Self {
        Failure::Analysis(msg.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Analysis(m) => write!(f, "analysis error: {m}"),
            Failure::Usage(m) => write!(f, "error: {m}"),
        }
    }
}

pub type Result<T> = std::result::Result<T, Failure>;

impl From<StoreError> for Failure {
    fn from(e: StoreError) -> Self {
        match e {
            StoreError::MissingManifest(_) | StoreError::IoFailure { .. } => Failure::usage(e),
            _ => Failure::analysis(e),
        }
    }
}

impl From<VaeError> for Failure {
    fn from(e: VaeError) -> Self {
        match e {
            VaeError::Checkpoint { .. } => Failure::usage(e),
            VaeError::InvalidConfig(_) => Failure::usage(e),
            _ => Failure::analysis(e),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::OutOfRange { .. } | PipelineError::InvalidConfig(_) => Failure::usage(e),
            PipelineError::Vae(v) => v.into(),
            _ => Failure::analysis(e),
        }
    }
}

macro_rules! analysis_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for Failure {
            fn from(e: $t) -> Self {
                Failure::analysis(e)
            }
        }
    )*};
}

analysis_errors!(EntropyError, GeometryError, RewardError, SpectralError);
