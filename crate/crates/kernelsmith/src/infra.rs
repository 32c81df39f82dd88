//! Infrastructure failures: transient faults of external collaborators
//! (subprocess verifiers, remote generators). Distinct from verification
//! failures, which are ordinary outcomes; infra failures are retryable.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum InfraError {
    #[error("timed out after {0:.1}s")]
    Timeout(f64),
    #[error("process exited with status {status}: {stderr}")]
    Exit { status: i32, stderr: String },
    #[error("malformed response: {msg}; stderr: {stderr}")]
    Parse { msg: String, stderr: String },
    #[error("http error: {0}")]
    Http(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
