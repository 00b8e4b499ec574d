//! Reduction of polynomial nonlinear state-space (PNLSS) models into decoupled
//! models: univariate polynomial branches sandwiched between two linear maps.
//!
//! The crate is organised along the reduction workflow:
//!
//! * [`poly`] and [`model`] define coupled/decoupled nonlinearities and the
//!   discrete-time state-space models that carry them.
//! * [`benchmarks`] generates excitation signals and synthetic truth data.
//! * [`decoupling`] turns a coupled polynomial map into a decoupled one through
//!   a CP decomposition of its Jacobian tensor.
//! * [`reduction`] unifies branches and removes them one at a time.
//! * [`finetune`] re-optimises all model parameters on the simulation error.
//! * [`classify`] interprets one-branch models as springs or dampers.
//! * [`pipeline`] chains everything and persists intermediate models.

pub mod benchmarks;
pub mod classify;
pub mod data;
pub mod decoupling;
pub mod dof;
pub mod error;
pub mod finetune;
pub mod io;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod poly;
pub mod reduction;
pub mod spectrum;

pub use data::Dataset;
pub use error::{Error, Result};
pub use model::{Nonlinearity, SimOptions, Simulation, StateSpaceModel};
pub use poly::{BranchPolynomial, DecoupledMap, MonomialBasis, PolynomialMap};
