//! HTTP service and command-line front end for the EHR navigator.
//!
//! [`registry::Registry`] turns a [`config::ServiceConfig`] into one
//! navigator per database. [`ask::ask`] is the single entry point both the
//! HTTP handler and `ehrnav ask` go through; every trace it produces lands
//! in a [`store::TraceStore`].

#![forbid(unsafe_code)]

pub mod ask;
pub mod cli;
pub mod config;
pub mod http;
pub mod registry;
pub mod schema;
pub mod store;

pub use ask::{AskError, AskRequest, AskResponse, EvidenceSummary};
pub use config::ServiceConfig;
pub use http::{router, App};
pub use registry::Registry;
pub use store::TraceStore;
