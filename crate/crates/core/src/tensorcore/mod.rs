//! Differentiable numeric core.

mod adam;
pub mod checkpoint;
pub mod kernels;
mod params;
mod schedule;
mod tape;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use params::{ParamEntry, ParamStore};
pub use schedule::LrSchedule;
pub use tape::{CustomOp, Gradients, Tape, Var};
pub use tensor::Tensor;

use rand::Rng;

/// He-uniform initialisation: `U(−√(6/fan_in), √(6/fan_in))`.
pub fn he_uniform<R: Rng>(shape: &[usize], fan_in: usize, rng: &mut R) -> Tensor {
    let limit = (6.0 / fan_in.max(1) as f32).sqrt();
    Tensor::uniform(shape, limit, rng)
}
