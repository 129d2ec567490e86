//! Workspace store, background jobs, HTTP API and command line around the
//! `shiftkit` pipeline.
//!
//! [`pipeline`] holds the steps shared by the command line ([`cli`]) and the
//! HTTP API ([`http`]); [`adapter`] carries backends across process
//! boundaries.

pub mod adapter;
pub mod backend;
pub mod cli;
pub mod error;
pub mod http;
pub mod jobs;
pub mod pipeline;
pub mod workspace;

pub use error::{Result, ServiceError};
