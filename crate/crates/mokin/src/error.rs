//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A quaternion input contained NaN or infinity.
    #[error("non-finite quaternion: ({0}, {1}, {2}, {3})")]
    NonFiniteQuaternion(f64, f64, f64, f64),

    /// Normalization of a near-zero quaternion would amplify noise.
    #[error("degenerate quaternion output: |q| = {norm:e} below {eps:e}")]
    DegenerateQuaternion { norm: f64, eps: f64 },

    /// Joint count of a pose does not match the skeleton it is applied to.
    #[error("joint/rotation arity mismatch: skeleton has {expected} joints, got {got}")]
    ArityMismatch { expected: usize, got: usize },

    /// A joint names a parent that does not precede it in the joint table.
    #[error("invalid skeleton: joint {joint} has parent index {parent}")]
    InvalidHierarchy { joint: usize, parent: usize },

    /// Tensor operands have incompatible shapes.
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    /// An operation produced or received a non-finite number.
    #[error("non-finite value in {0}")]
    NonFinite(String),

    /// Gradients were requested twice, or from a tape that was never run.
    #[error("tape backward pass already consumed")]
    BackwardConsumed,

    /// Text input (BVH, config, CSV) failed to parse.
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// A serialized file has a schema version this build does not support.
    #[error("unsupported schema version {found} (supported: {supported})")]
    SchemaVersion { found: u32, supported: u32 },

    /// Frame counts of local and global motion disagree.
    #[error("length mismatch: {0}")]
    LengthMismatch(String),

    /// A checkpoint does not match the model shape it is loaded into.
    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    /// A motion clip violates a structural invariant.
    #[error("invalid motion clip: {0}")]
    Clip(String),

    /// Dataset directory is missing clips or the manifest is inconsistent.
    #[error("dataset error: {0}")]
    Dataset(String),

    /// A configuration value or combination is unusable.
    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}
