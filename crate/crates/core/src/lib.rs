//! Experienced-segregation analysis from location pings.

pub mod annotate;
pub mod bridging;
pub mod config;
pub mod crossings;
pub mod error;
pub mod geo;
pub mod home;
pub mod ingest;
pub mod layers;
pub mod nullmodels;
pub mod pipeline;
pub mod seed;
pub mod segregation;
pub mod stats;
pub mod synthcity;

pub use error::{Error, Result};
