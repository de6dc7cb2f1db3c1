use thiserror::Error;

/// Process exit code for bad input or flags.
pub const EXIT_USAGE: i32 = 2;
/// Process exit code when estimation fails numerically.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    #[error("{stage}: {source}")]
    Estimation {
        stage: &'static str,
        #[source]
        source: sparseiv::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Io { .. } => EXIT_USAGE,
            CliError::Estimation { source, .. } => {
                if is_validation(source) {
                    EXIT_USAGE
                } else {
                    EXIT_NUMERICAL
                }
            }
        }
    }
}

fn is_validation(e: &sparseiv::Error) -> bool {
    use sparseiv::Error::*;
    match e {
        Dimension(_) | NonFinite(_) | InvalidArgument(_) | InfeasibleDesign(_) | EmptyGrid => true,
        Half { source, .. } => is_validation(source),
        _ => false,
    }
}

pub fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Tags a core error with the pipeline stage that raised it.
pub fn stage(stage: &'static str) -> impl FnOnce(sparseiv::Error) -> CliError {
    move |source| CliError::Estimation { stage, source }
}

pub type CliResult<T> = Result<T, CliError>;
