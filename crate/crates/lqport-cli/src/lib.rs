//! Library half of the `lqport` binary, shared with its integration tests.

pub mod commands;
pub mod config;
pub mod error;
pub mod formats;
pub mod verify;
