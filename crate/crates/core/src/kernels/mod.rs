//! Value-level kernels. These operate on flat slices and know nothing about
//! the tape; [`crate::autodiff`] pairs each forward kernel with its adjoint.

pub mod activation;
pub mod broadcast;
pub mod conv;
pub mod norm;
pub mod pool;
pub mod resample;
