//! Dense matrices, reverse-mode autodiff, power iteration and optimizers.

pub mod eigen;
pub mod gradcheck;
pub mod matrix;
pub mod optim;
pub mod tape;

pub use eigen::{dominant_eigenvalue, EigenEstimate};
pub use gradcheck::{check_gradients, GroupCheck};
pub use matrix::{row_softmax, Matrix};
pub use optim::{Bindings, NamedGrads, Optimizer, ParamStore};
pub use tape::{Gradients, NodeId, Tape};
