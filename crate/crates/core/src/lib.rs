//! Desk-scale emulator of a software-defined QKD network.
//!
//! Nodes aggregate QKD interfaces under one security perimeter and run a
//! local key management system ([`lkms`]) plus an SDN [`agent`]. A central
//! controller ([`controlplane`]) plans physical links, spectrum and relay
//! routes; virtual links forward keys through trusted nodes with one-time
//! pads ([`relay`]). Quantum channels are simulated by a loss-driven rate
//! model ([`linksim`]) and the whole network runs inside a deterministic
//! discrete-event [`harness`].
//!
//! The physical-layer math is generic over [`scalar::Scalar`]; the aliases
//! below pin it to `f64`, which the rest of the crate uses.

pub mod agent;
pub mod controlplane;
pub mod document;
pub mod harness;
pub mod linksim;
pub mod lkms;
pub mod model;
pub mod relay;
pub mod scalar;

use thiserror::Error;

pub type FiberSpec = model::FiberSpec<f64>;
pub type FiberSpec32 = model::FiberSpec<f32>;
pub type RateProfile = linksim::RateProfile<f64>;
pub type RateProfile32 = linksim::RateProfile<f32>;
pub type SchedulerConfig = linksim::SchedulerConfig<f64>;
pub type SchedulerConfig32 = linksim::SchedulerConfig<f32>;

pub use harness::{madrid_scenario, MetricsReport, Network, Scenario, Simulation};

/// Any failure surfaced by the emulator.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum Error {
    #[error(transparent)]
    Model(#[from] model::ModelError),
    #[error(transparent)]
    LinkSim(#[from] linksim::LinkSimError),
    #[error(transparent)]
    Lkms(#[from] lkms::LkmsError),
    #[error(transparent)]
    Relay(#[from] relay::RelayError),
    #[error(transparent)]
    Control(#[from] controlplane::ControlError),
    #[error(transparent)]
    Agent(#[from] agent::AgentError),
    #[error(transparent)]
    Document(#[from] document::DocumentError),
    #[error(transparent)]
    Scenario(#[from] harness::ScenarioError),
}

impl Error {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            Error::Model(e) => e.code(),
            Error::LinkSim(e) => e.code(),
            Error::Lkms(e) => e.code(),
            Error::Relay(e) => e.code(),
            Error::Control(e) => e.code(),
            Error::Agent(e) => e.code(),
            Error::Document(_) => "schema_violation",
            Error::Scenario(e) => e.code(),
        }
    }
}
