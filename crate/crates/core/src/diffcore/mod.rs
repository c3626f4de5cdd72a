//! Differentiable numerics: tensors, a reverse-mode tape, parameter storage
//! and the optimizer.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, max_rel_error, rel_error, worst, GradCheck, Probe};
pub use optim::{AdamW, LrSchedule, OptimError};
pub use params::{Bound, GradBuffer, Group, Param, ParamId, ParamStore};
pub use tape::{Grads, NonFinite, Tape, Var};
pub use tensor::{Real, Tensor};

pub(crate) use tensor::log_sum_exp;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("non-finite loss: {0}")]
    NonFinite(NonFinite),
}

/// Builds the computation with `build` on a fresh tape, then differentiates
/// the returned scalar with respect to every parameter.
pub fn forward_backward<T: Real>(
    params: &ParamStore,
    build: impl FnOnce(&mut Tape<T>, &Bound) -> Var,
) -> Result<(f64, GradBuffer), DiffError> {
    let mut tape = Tape::<T>::new();
    let bound = params.bind(&mut tape);
    let loss = build(&mut tape, &bound);
    let value = tape.scalar(loss);
    if !value.is_finite() {
        let culprit = tape.first_non_finite().unwrap_or(NonFinite { node: loss.index(), op: "output" });
        return Err(DiffError::NonFinite(culprit));
    }
    let grads = tape.backward(loss);
    Ok((value.as_f64(), params.collect_grads(&bound, &grads)))
}
