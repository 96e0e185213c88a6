//! HTTP service and command-line front end for the veil engine.

pub mod api;
pub mod config;
pub mod server;

pub use api::{ApiError, ApiRequest, ApiResponse, HttpMethod, Service};
pub use config::{Config, ConfigError};
