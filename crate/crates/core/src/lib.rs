//! User simulation and tester-based evaluation for task-oriented dialogue
//! systems.

pub mod corpus;
pub mod error;
pub mod harness;
pub mod metaphor;
pub mod metrics;
pub mod nlg;
pub mod nlu;
pub mod policy;
pub mod preference;
pub mod registry;
pub mod sampling;
pub mod service;
pub mod simulators;
pub mod synth;
pub mod tester;
pub mod text;

pub use error::{Error, Result};
