//! Discrete-event simulator for a four-level disaster management and
//! communication system: sensors and their cluster coordinators, mobile
//! access points that mule data between them, processing centres, and the
//! central decision point that issues warnings.

pub mod decision;
pub mod engine;
pub mod model;
pub mod mule;
pub mod processing;
pub mod rng;
pub mod scenario;
pub mod sensing;
pub mod sweep;

pub use scenario::{parse_scenario, parse_scenario_str, Scenario, ScenarioError, Settings};
