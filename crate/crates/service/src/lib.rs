//! Command-line entry points and the HTTP job service.

pub mod app;
pub mod cli;
pub mod engine;
pub mod error;
pub mod images;
pub mod jobs;
pub mod server;

pub use app::{App, ServeConfig};
pub use error::{ErrorBody, ServiceError, ServiceResult};
