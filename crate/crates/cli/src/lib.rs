//! Command-line workflows and the HTTP service around `wesper-core`.

pub mod commands;
pub mod config;
pub mod service;
