//! Failure classes and their process exit codes.

use skipsponge_core::Error as CoreError;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;
pub const EXIT_NO_SPARSITY_LAYERS: i32 = 5;
pub const EXIT_INTERNAL: i32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),

    #[error("data error: {0}")]
    Data(String),

    /// Training diverged or a metric became non-finite.
    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("no sparsity layers: {0}")]
    NoSparsityLayers(String),

    #[error(transparent)]
    Core(#[from] CoreError),
}

pub type Result<T, E = CliError> = std::result::Result<T, E>;

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Numeric(_) => EXIT_NUMERIC,
            CliError::NoSparsityLayers(_) => EXIT_NO_SPARSITY_LAYERS,
            CliError::Core(e) => match e {
                CoreError::Config(_) | CoreError::Domain(_) | CoreError::Inapplicable(_) => EXIT_CONFIG,
                CoreError::Load { .. } | CoreError::Io { .. } | CoreError::Dimension(_) | CoreError::Csv(_) => EXIT_DATA,
                CoreError::Json(_) => EXIT_DATA,
                CoreError::NonFinite(_) => EXIT_NUMERIC,
                CoreError::State(_) => EXIT_INTERNAL,
            },
        }
    }
}

pub(crate) fn io(path: &std::path::Path, e: std::io::Error) -> CliError {
    CliError::Core(CoreError::Io { path: path.to_path_buf(), source: e })
}
