//! Autonomous configuration service for industrial IoT local clouds.
//!
//! Configuration commissions flow through the pipeline
//! `commissioning → scheduler → factory → stores → shipping`, against a
//! device registry and a simulated device fleet that closes the loop with
//! state reports and completion receipts.

pub mod cli;
pub mod commission;
pub mod config;
pub mod doc;
pub mod factory;
pub mod model;
pub mod package;
pub mod phase;
pub mod registry;
pub mod scheduler;
pub mod shipping;
pub mod sim;
pub mod store;
pub mod transform;
pub mod value;

pub use value::{FieldPath, Tick, Value};
