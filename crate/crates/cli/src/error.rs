use ndi_core::density::DensityError;
use ndi_core::envs::EnvError;
use ndi_core::imitation::ImitationError;
use ndi_core::mdp::MdpError;
use ndi_core::nn::NnError;
use ndi_core::occupancy::OccupancyError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("{0}")]
    Io(String),
    #[error("bad input: {0}")]
    Input(String),
    #[error("verification failed: {0}")]
    Verification(String),
    #[error("numerical divergence: {0}")]
    Divergence(String),
}

impl CliError {
    /// 1 usage or input error, 2 verification failure, 3 divergence.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io(_) | CliError::Input(_) => 1,
            CliError::Verification(_) => 2,
            CliError::Divergence(_) => 3,
        }
    }

    pub(crate) fn io(path: &std::path::Path, e: impl std::fmt::Display) -> Self {
        CliError::Io(format!("{}: {e}", path.display()))
    }
}

impl From<DensityError> for CliError {
    fn from(e: DensityError) -> Self {
        match e {
            DensityError::NonFiniteLoss { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<ImitationError> for CliError {
    fn from(e: ImitationError) -> Self {
        match e {
            ImitationError::NonFinite(_) | ImitationError::NotConverged { .. } => CliError::Divergence(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Unknown(_) => CliError::Usage(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

macro_rules! input_error {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Input(e.to_string())
            }
        }
    )*};
}

input_error!(MdpError, NnError, OccupancyError);
