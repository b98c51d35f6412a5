//! Document structure service: ingestion, correction staging, incremental
//! training and an HTTP interface over them.

pub mod domain;
pub mod features;
pub mod http;
pub mod service;
pub mod store;
pub mod validate;

pub use service::{Service, ServiceConfig, ServiceError};
