use thiserror::Error;

/// Errors raised by the refinement pipeline and metric suite.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("sequence too short for {what}: need at least {needed} frames, got {got}")]
    TooShort {
        what: &'static str,
        needed: usize,
        got: usize,
    },

    #[error("point behind camera at frame {frame}{} (depth {depth:.3e} m)", joint.map(|j| format!(", joint {j}")).unwrap_or_default())]
    BehindCamera {
        frame: usize,
        joint: Option<usize>,
        depth: f64,
    },

    #[error("parse error in field `{field}`: {message}")]
    Parse { field: String, message: String },

    #[error("optimization diverged at epoch {epoch}")]
    Diverged { epoch: usize },

    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn parse(field: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Parse {
            field: field.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        Error::Io {
            path: path.display().to_string(),
            source,
        }
    }

    pub(crate) fn with_joint(self, joint: usize) -> Self {
        match self {
            Error::BehindCamera { frame, depth, .. } => Error::BehindCamera {
                frame,
                joint: Some(joint),
                depth,
            },
            other => other,
        }
    }
}

pub(crate) fn ensure_len(what: &'static str, needed: usize, got: usize) -> Result<()> {
    if got < needed {
        Err(Error::TooShort { what, needed, got })
    } else {
        Ok(())
    }
}
