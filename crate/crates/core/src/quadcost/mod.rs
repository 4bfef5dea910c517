//! Quadratic costs over a flat state: residual stacking, single Gauss-Newton
//! steps and Schur-complement marginalization.

mod belief;
mod layout;
pub mod linalg;
mod residual;
mod solve;

pub use belief::GaussianBelief;
pub use layout::{Block, Epoch, VariableKey, VariableLayout, FEATURE_DIM, POSE_DIM};
pub use residual::{FnModel, LinearModel, ResidualModel, ResidualTerm};
pub use solve::{gauss_newton_step, marginalize, normal_equations, reorder, stack_residuals, NormalEquations, SolveMode};
