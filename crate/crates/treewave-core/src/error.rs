//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("invalid network: {0}")]
    InvalidTree(String),

    #[error("unknown node id `{0}`")]
    UnknownNode(String),

    #[error("unknown edge id `{0}`")]
    UnknownEdge(String),

    #[error("node `{0}` is not an external node")]
    NotExternal(String),

    #[error("edge `{edge}` is not incident to node `{node}`")]
    NotIncident { edge: String, node: String },

    #[error("CFL violation: dt/dx = {ratio:.6} exceeds 1 on edge `{edge}`")]
    CflViolation { edge: String, ratio: f64 },

    #[error("field shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("boundary data incompatible with initial data at node `{node}`: |h(0) - u0| = {gap:.3e}")]
    IncompatibleBoundary { node: String, gap: f64 },

    #[error("missing boundary data for external node `{0}`")]
    MissingBoundary(String),

    #[error("time index {index} out of range (have {len} snapshots)")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("singular linear system at node `{0}`")]
    SingularSystem(String),

    #[error("transform tail weight too large: need tau_max >= {required:.4}, have {have:.4}")]
    TailWeight { required: f64, have: f64 },

    #[error("non-finite objective at iterate {iter}")]
    NonFinite { iter: usize },

    #[error("observation window {have:.4} too short for edge `{edge}` (need > {need:.4})")]
    HorizonTooShort { edge: String, need: f64, have: f64 },

    #[error("node `{node}` has {count} unrecovered incident edges; expected exactly one")]
    AmbiguousTransfer { node: String, count: usize },

    #[error("inconsistent transferred data at node `{node}`: Dirichlet discrepancy {gap:.3e}")]
    InconsistentTransfer { node: String, gap: f64 },

    #[error("missing measurement for node `{0}`")]
    MissingMeasurement(String),

    #[error("empty ensemble after filtering degenerate members")]
    EmptyEnsemble,

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}
