//! Built-in models: the two case studies plus small named test systems.

pub mod custom;
pub mod enzyme;
pub mod sird;

pub use enzyme::{arrhenius_rate, enzyme_model, EnzymeModel, EnzymeParams};
pub use sird::{force_of_infection, sird_model, SirdModel, SirdParams};
