//! Error type shared across the crate.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Operand shapes are incompatible for the named operation.
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An axis or index was out of range, or a reduction had nothing to reduce.
    #[error("{op}: {msg}")]
    Domain { op: &'static str, msg: String },

    /// A library-produced value was NaN or infinite. Non-finite values are
    /// always surfaced, never propagated silently.
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },

    /// Elementwise division hit a zero divisor.
    #[error("{op}: division by zero")]
    ZeroDivisor { op: &'static str },

    /// An input-normalising layer received a sample with vanishing norm.
    /// The map x -> x/|x| is singular at the origin, so this is an error
    /// rather than a silent clamp.
    #[error("input norm {norm:e} below threshold {eps:e}; normalising layer is singular at |x| -> 0")]
    ZeroInputNorm { norm: f64, eps: f64 },

    /// A patch-normalised convolution in strict mode saw an all-zero patch.
    #[error("patch {patch} has norm {norm:e} below threshold; zero receptive field under strict patch normalisation")]
    ZeroPatchNorm { patch: usize, norm: f64 },

    /// Invalid configuration (unknown normaliser name, batch size 1 for
    /// batch statistics, batched call to a single-sample learning-rate
    /// policy, and similar).
    #[error("configuration error: {0}")]
    Config(String),

    /// A classification label was outside [0, classes).
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    /// A data file did not match the expected binary layout.
    #[error("format error in {path}: {msg}")]
    Format { path: String, msg: String },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub(crate) fn domain(op: &'static str, msg: impl Into<String>) -> Self {
        Error::Domain {
            op,
            msg: msg.into(),
        }
    }
}
