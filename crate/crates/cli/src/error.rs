use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] soh_core::Error),

    #[error("stage {stage}: {source}")]
    Stage {
        stage: u32,
        #[source]
        source: soh_core::Error,
    },

    #[error("validation error: {0}")]
    Validation(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Validation(msg.into())
}

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> CliError {
    let path = path.into();
    move |source| CliError::Io { path, source }
}

/// Attaches the stage to a core error.
pub(crate) fn in_stage(stage: u32) -> impl FnOnce(soh_core::Error) -> CliError {
    move |source| CliError::Stage { stage, source }
}

fn core_code(e: &soh_core::Error) -> i32 {
    use soh_core::Error as E;
    match e {
        E::Parse { .. } | E::Validation(_) | E::Shape(_) => 1,
        E::Numerical(_) => 2,
        E::Io { .. } => 3,
        E::Json(j) if j.is_io() => 3,
        E::Json(_) => 1,
    }
}

impl CliError {
    /// 1 validation, 2 numerical failure, 3 I/O.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) | CliError::Stage { source: e, .. } => core_code(e),
            CliError::Validation(_) => 1,
            CliError::Io { .. } => 3,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_error_class() {
        assert_eq!(invalid("x").exit_code(), 1);
        let io = CliError::Io {
            path: "a".into(),
            source: std::io::Error::other("boom"),
        };
        assert_eq!(io.exit_code(), 3);
        let nan = in_stage(2)(soh_core::Error::Numerical("NaN at epoch 3".into()));
        assert_eq!(nan.exit_code(), 2);
        assert!(nan.to_string().starts_with("stage 2: "));
        let json: soh_core::Error = serde_json::from_str::<u32>("x").unwrap_err().into();
        assert_eq!(CliError::from(json).exit_code(), 1);
    }
}
