//! Cross-modality image synthesis that stays equivariant to spatial deformations,
//! trained jointly with rigid and diffeomorphic registration networks.

// Tape ops are fallible and record onto a shared tape, so they stay plain methods.
#![allow(clippy::should_implement_trait)]
// `!(x > 0.0)` deliberately rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datagen;
pub mod deform;
pub mod error;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::{Tape, Tensor, Var};
