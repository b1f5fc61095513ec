use thiserror::Error;

/// Errors raised by the numerical core.
#[derive(Debug, Error)]
pub enum PsdError {
    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    Shape { expected: String, found: String },

    #[error("out of range: {0}")]
    Range(String),

    #[error("timestep ordering violated: next timestep {next} is after current timestep {current}")]
    Ordering { current: usize, next: usize },

    #[error("singular schedule at timestep {0}: alpha is zero")]
    SingularSchedule(usize),

    #[error("numerical failure in mixture component {component}: {reason}")]
    Component { component: usize, reason: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("unsupported in this representation mode: {0}")]
    Mode(String),

    #[error("oracle failure: {0}")]
    Oracle(String),

    #[error("run aborted at iteration {iter}: {source}")]
    Aborted {
        iter: usize,
        #[source]
        source: Box<PsdError>,
    },
}

pub type Result<T> = std::result::Result<T, PsdError>;

pub(crate) fn check_len(what: &str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(PsdError::Shape {
            expected: format!("{what} of length {expected}"),
            found: format!("length {found}"),
        })
    }
}
