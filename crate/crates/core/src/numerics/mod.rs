//! Matrix autodiff substrate: graph-recorded operations, parameters,
//! optimizer, checkpoints and a finite-difference gradient oracle.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;

pub use gradcheck::{gradient_check, gradient_check_params};
pub use graph::{sigmoid, softmax_rows, Gradients, Graph, Var};
pub use optim::{Adam, GradBuffer};
pub use params::{Init, Matrix, ParamId, ParameterStore};
