//! Crate-wide error type. Every fallible public operation returns [`Result`].

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Matrix product with incompatible inner dimensions.
    #[error("matrix multiply shape mismatch: left is {left_rows}x{left_cols}, right is {right_rows}x{right_cols}")]
    MatMulShape {
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    /// Any other shape violation; `expected`/`got` describe the shapes in `rows x cols` form.
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },

    /// A value that must be finite (matrix entry, loss, metric) was NaN or infinite.
    #[error("non-finite value in {context}")]
    NonFinite { context: String },

    /// Jacobi sweeps exhausted before the off-diagonal mass dropped below tolerance.
    #[error("singular value iteration did not converge after {sweeps} sweeps (worst off-diagonal ratio {off_diag:e})")]
    SvdNoConvergence { sweeps: usize, off_diag: f64 },

    /// The probed objective returned NaN/inf while forming a finite difference.
    #[error("objective returned a non-finite value while probing coordinate {coord}")]
    NonFiniteProbe { coord: usize },

    /// A scalar parameter violated its precondition.
    #[error("invalid parameter {name} = {value}: {reason}")]
    InvalidParam {
        name: &'static str,
        value: f64,
        reason: &'static str,
    },

    /// Training produced a non-finite loss; names the step and the parameter block
    /// whose update preceded the blow-up.
    #[error("non-finite loss at step {step} (parameter block: {block})")]
    NonFiniteLoss { step: u64, block: String },

    /// Models passed to the heatmap do not share a (layer, weight-type) labeling.
    #[error("inconsistent layer labeling across models: {0}")]
    InconsistentLabels(String),

    /// Configuration or experiment-spec validation failure.
    #[error("invalid config: {0}")]
    InvalidConfig(String),

    /// Operation is not defined for this adapter/model state.
    #[error("unsupported operation: {0}")]
    Unsupported(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("spec parse error: {0}")]
    SpecParse(String),
}

pub type Result<T> = std::result::Result<T, Error>;
