//! Project store, pipeline commands and HTTP API.

pub mod api;
pub mod error;
pub mod json;
pub mod pipeline;
pub mod store;

pub use error::{Result, ServiceError};
pub use store::ProjectStore;
