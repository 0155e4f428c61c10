//! Dense matrices, a reverse-mode tape over a fixed operation vocabulary,
//! parameter storage and SGD with momentum.

mod gradcheck;
mod matrix;
mod optim;
mod params;
pub mod rng;
mod tape;
pub mod trunk;

pub use gradcheck::{finite_difference_check, GradCheckReport, GRADIENT_FLOOR};
pub(crate) use matrix::squared_euclidean;
pub use matrix::Matrix;
pub use optim::{sgd_step, Sgd};
pub use params::{Gradients, ParamStore};
pub use rng::SeedRng;
pub(crate) use tape::softmax_rows;
pub use tape::{Backward, Bindings, Tape, Var, LOG_FLOOR};
pub use trunk::{forward_trunk, forward_trunk_var};
