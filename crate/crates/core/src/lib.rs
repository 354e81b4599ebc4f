//! Harness for in-context learning when demonstration labels are noisy.

pub mod backend;
pub mod confidence;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod http;
pub mod noise;
pub mod rectifier;
pub mod retrieval;
pub mod seed;
pub mod strategies;
pub mod synthetic;

pub use error::{Error, ErrorKind, Result};
