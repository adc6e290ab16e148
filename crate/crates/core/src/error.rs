use crate::evaluation::EvalError;
use crate::linalg::LinalgError;
use crate::lti::LtiError;
use crate::riccati::RiccatiError;
use crate::sdp::SdpError;
use crate::synthesis::SynthesisError;
use crate::sysid::SysidError;
use thiserror::Error;

/// Any failure surfaced by the crate's top-level entry points.
#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Lti(#[from] LtiError),
    #[error(transparent)]
    Sysid(#[from] SysidError),
    #[error(transparent)]
    Riccati(#[from] RiccatiError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Sdp(#[from] SdpError),
    #[error(transparent)]
    Synthesis(#[from] SynthesisError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}
