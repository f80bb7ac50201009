use thiserror::Error;

/// Errors raised anywhere in the optimization pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-conforming mesh at {interface}: {detail}")]
    NonConforming { interface: String, detail: String },

    #[error("element {element} has non-positive Jacobian determinant {det:e}")]
    BadJacobian { element: usize, det: f64 },

    #[error("singular system ({context}): pivot {pivot} is {value:e}")]
    Singular {
        context: String,
        pivot: usize,
        value: f64,
    },

    #[error("eigensolver did not converge for mode {mode}: relative residual {residual:e}")]
    EigenNoConvergence { mode: usize, residual: f64 },

    #[error("sensitivity field vanished identically")]
    VanishedGradient,

    #[error("mode {mode}: open-circuit frequency {omega_oc} below short-circuit frequency {omega_sc}")]
    ModeOrdering {
        mode: usize,
        omega_oc: f64,
        omega_sc: f64,
    },

    #[error("mode {mode}: coupling coefficient is zero, objective unbounded")]
    ZeroCoupling { mode: usize },

    #[error("mode {mode} has zero frequency")]
    ZeroFrequency { mode: usize },

    #[error("piezoelectric layer is entirely void")]
    EmptyPiezoLayer,

    #[error("size mismatch: {0}")]
    SizeMismatch(String),

    #[error("parse error: {0}")]
    Parse(String),

    #[error("iteration {iteration}, stage {stage}: {inner}")]
    Stage {
        iteration: usize,
        stage: &'static str,
        inner: Box<Error>,
    },

    #[error("I/O error on {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Wraps an error with the optimization iteration and stage it came from.
    pub fn at(self, iteration: usize, stage: &'static str) -> Self {
        Error::Stage {
            iteration,
            stage,
            inner: Box::new(self),
        }
    }

    /// True for errors caused by the configuration rather than the run.
    pub fn is_config_error(&self) -> bool {
        match self {
            Error::InvalidConfig(_) | Error::NonConforming { .. } | Error::Parse(_) => true,
            Error::Stage { inner, .. } => inner.is_config_error(),
            _ => false,
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }
}
