//! Review service, document store and command-line front end.

pub mod api;
pub mod cli;
pub mod clock;
pub mod engine;
pub mod metrics;
pub mod store;
