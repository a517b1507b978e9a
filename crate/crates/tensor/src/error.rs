use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: shape mismatch between {lhs:?} and {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: {msg}")]
    Invalid { op: &'static str, msg: String },
    #[error("{op}: invalid parameter: {msg}")]
    Param { op: &'static str, msg: String },
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
    #[error("data error: {0}")]
    Data(String),
    #[error("gradient check failed for `{param}` at index {index}: relative error {rel_err:.3e} > {tol:.1e}")]
    GradCheck {
        param: String,
        index: usize,
        rel_err: f64,
        tol: f64,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;
