//! Partial-identification IV toolkit: interval bounds on the return to
//! friendships when the return to schooling is only known to lie in a range.

pub mod bounds;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod frame;
pub mod instruments;
pub mod linalg;
pub mod montecarlo;
pub mod pipeline;
pub mod regress;
pub mod sim;

pub use error::{Error, Result};
pub use frame::{ColumnSource, Frame};
