//! Dense kernels and the reverse-mode tape used for training adapters (and,
//! during pretraining, the backbone itself).

pub mod adam;
pub mod gradcheck;
pub mod linalg;
pub mod losses;
pub mod matrix;
pub mod ops;
pub mod tape;

pub use adam::{Adam, AdamConfig};
pub use gradcheck::{grad_check, GradCheckReport};
pub use matrix::Matrix;
pub use ops::{cross_entropy, log_softmax, softmax};
pub use tape::{CustomOp, GradTape, NodeId};
