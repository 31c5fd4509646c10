//! Structured knowledge hunter: selects an ordered plan of knowledge triples
//! from structured input with a hierarchical encoder and lockstep pointer
//! decoders, realizes plans as text, and scores them.

pub mod embed;
pub mod encoder;
pub mod error;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod planner;
pub mod realize;
pub mod schema;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
