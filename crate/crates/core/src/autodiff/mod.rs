//! Dense tensors, a reverse-mode tape, Adam, and finite-difference checks.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use gradcheck::{grad_check, relative_error, GradCheckReport, GradChecker, ParamCheck, REL_ERROR_FLOOR};
pub use tape::{bce, group_softmax, sigmoid, Activation, Fault, Tape, Var, BCE_EPS};
pub use tensor::{ParamId, ParameterSet, Tensor};

/// Glorot-uniform initialised tensor of the given shape.
pub fn glorot<R: rand::Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape, data).expect("glorot: invalid shape")
}

/// Uniform `[-limit, limit]` tensor.
pub fn uniform<R: rand::Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, limit: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..=limit)).collect();
    Tensor::new(shape, data).expect("uniform: invalid shape")
}
