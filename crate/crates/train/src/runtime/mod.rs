//! Actor-learner orchestration around the evaluation service.

pub mod eval;
pub mod learner;
#[cfg(unix)]
pub mod socket;
