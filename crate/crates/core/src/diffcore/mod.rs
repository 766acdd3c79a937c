//! Dense double-precision arrays with tape-based reverse-mode differentiation
//! and an Adam optimizer.

mod adam;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState, ParamBlock};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
