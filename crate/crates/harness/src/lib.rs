//! Configuration, orchestration and reporting around `psd-core`.

pub mod ablate;
pub mod config;
pub mod gradcheck;
pub mod output;
pub mod report;
pub mod run;
pub mod sample;

use psd_core::PsdError;

/// Process exit codes used by `psdlab`.
pub mod exit {
    pub const OK: u8 = 0;
    /// A check ran and did not pass.
    pub const CHECK_FAILED: u8 = 1;
    /// Bad arguments, configuration or input files.
    pub const USAGE: u8 = 2;
    /// The computation itself broke down.
    pub const NUMERICAL: u8 = 3;
}

/// Maps an error to its exit code: numerical breakdowns in the core give
/// [`exit::NUMERICAL`], everything else is treated as bad input.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<PsdError>() {
            if is_numerical(e) {
                return exit::NUMERICAL;
            }
        }
    }
    exit::USAGE
}

fn is_numerical(e: &PsdError) -> bool {
    matches!(
        e,
        PsdError::Aborted { .. } | PsdError::Numerical(_) | PsdError::SingularSchedule(_) | PsdError::Component { .. }
    )
}
