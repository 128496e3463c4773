//! Market clearing for a macro load area by exchange ADMM.
//!
//! Elastic consumers (load area controllers) and generators (thermal plant,
//! photovoltaic, grid connection) each solve a small local problem against a
//! price broadcast by a coordinator. The coordinator adjusts the price until
//! supply and demand balance in every time slot.
//!
//! The numeric core is generic over [`Scalar`] (`f32`/`f64`); the aliases at
//! the crate root fix it to `f64`, which the wire protocol and CLI use.

pub mod admm;
pub mod agents;
pub mod model;
pub mod oracle;
pub mod scalar;
pub mod synthetic;
pub mod transport;

pub use scalar::Scalar;

pub type Scenario = model::Scenario<f64>;
pub type SolverOptions = model::SolverOptions<f64>;
pub type LacSpec = model::LacSpec<f64>;
pub type TppSpec = model::TppSpec<f64>;
pub type PvSpec = model::PvSpec<f64>;
pub type GridSpec = model::GridSpec<f64>;
pub type TimeGrid = model::TimeGrid<f64>;
pub type GeneratorSpec = model::GeneratorSpec<f64>;
pub type AgentSpec = model::AgentSpec<f64>;
pub type SlotResult = admm::SlotResult<f64>;
pub type HorizonResult = admm::HorizonResult<f64>;
pub type TraceEntry = admm::TraceEntry<f64>;
pub type ClearingResult = oracle::ClearingResult<f64>;
