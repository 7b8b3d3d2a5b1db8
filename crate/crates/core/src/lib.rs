//! Lesion-normalized structure maps and a multi-view diagnosis head for
//! dermoscopy images.
//!
//! All grids are [`ValueGrid`]s with axes `(h, w, c)`; pixel centers sit at
//! integer coordinates with `x` the column and `y` the row (pointing down).

pub mod augment;
pub mod conv;
pub mod diagnosis;
pub mod error;
pub mod geometry;
pub mod gradcheck;
pub mod structure;
pub mod tensor;
pub mod tensor_io;
pub mod toy;

pub use error::{Error, Result};
pub use tensor::{finite_diff_check, DifferentiableOp, ValueGrid};
