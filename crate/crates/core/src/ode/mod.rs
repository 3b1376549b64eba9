//! Neural ODE blocks: adaptive solvers, learned vector fields, first-order
//! and heavy-ball dynamics with adjoint gradients, and spectral checks.

pub mod classifier;
pub mod dynamics;
pub mod field;
pub mod solver;
pub mod spectrum;

pub use classifier::{ClassifierConfig, OdeClassifier, OdeFamily};
pub use dynamics::{
    adjoint_backward, adjoint_backward_ghbnode, adjoint_backward_hbnode, adjoint_backward_node, adjoint_norm_trace,
    ghbnode_rhs, hbnode_rhs, node_rhs, solve, AdjointOptions, AdjointOutput, DampingParams, Dynamics,
    MomentumActivation, OdeState, SolverStats,
};
pub use field::{LinearField, MlpField, OdeFunc, VectorField};
pub use solver::{integrate, Method, SolverOptions, StepStats};
pub use spectrum::{eigen_pairing_check, PairingReport};
