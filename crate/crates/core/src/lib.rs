//! Optimal control of controlled production-destruction systems (CPDS).
//!
//! The crate solves finite-horizon optimal control problems
//!
//! ```text
//! y' = (P(y) ⊙ 𝒫(a) − D(y) ⊙ 𝒟(a)) e,      a(t) ∈ A
//! J  = ∫ ℓ(y, a, t) dt + φ(y(t_f))
//! ```
//!
//! by dynamic programming. The backward Hamilton-Jacobi-Bellman equation is
//! discretized with a semi-Lagrangian scheme whose characteristic feet are
//! traced with the Modified Patankar-Euler step (MPSL). Because that step is
//! unconditionally positive and conservative, feet never leave the invariant
//! box of the system. A classical semi-Lagrangian baseline traces the
//! characteristics with explicit Euler instead.
//!
//! Layout:
//!
//! * [`model`]: the [`CpdsModel`] contract, vector field and assumption checks
//! * [`models`]: the enzyme (Michaelis-Menten) and SIRD case studies
//! * [`integrators`]: Patankar matrix, MPE step, explicit Euler step
//! * [`grid`]: uniform grids, scalar fields, multilinear interpolation
//! * [`hjb`]: backward value iteration
//! * [`synthesis`]: trajectory/control reconstruction, costs, escape census
//! * [`io`]: configuration, snapshots, manifests, CSV and the run pipeline

pub mod error;
pub mod grid;
pub mod hjb;
pub mod integrators;
pub mod io;
pub mod linalg;
pub mod model;
pub mod models;
pub mod synthesis;

pub use error::{Error, Result};
pub use grid::{ScalarField, UniformGrid};
pub use hjb::{ControlGrid, Integrator, TimeSchedule, ValueFunctionSeries};
pub use model::{ControlBox, ControlPoint, CpdsModel, InvariantBox, StateVector};
pub use synthesis::TrajectoryRecord;
