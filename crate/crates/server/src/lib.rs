//! HTTP API and command-line front end for the eraser pipeline.

pub mod api;
pub mod cli;

pub use api::{router, AppState};
