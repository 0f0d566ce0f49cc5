//! Minimal neural-network engine with flat parameter vectors.
//!
//! Everything is generic over the element type (`f32` for training speed,
//! `f64` for finite-difference tests). Alongside plain values, every tensor
//! can carry a forward-mode tangent. Propagating tangents through both the
//! forward and the backward pass yields exact mixed second derivatives:
//!
//! * tangent on the parameters + backward to the inputs gives
//!   `d/dX (w . grad_theta L)` — the gradient-matching attack objective;
//! * tangent on the inputs + backward to the parameters gives
//!   `d/dtheta (w . grad_x D)` — the critic gradient penalty.

mod adam;
mod dual;
mod loss;
mod net;
mod ops;

pub use adam::{Adam, AdamConfig};
pub use dual::{Dual, Scalar};
pub use loss::{softmax_cross_entropy, sum_outputs, SoftmaxCe};
pub use net::{Mode, Net, Node, ParamView, Tape};
