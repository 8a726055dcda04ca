//! Command line and streaming server for the frame generator.

pub mod cli;
pub mod inbox;
pub mod protocol;
pub mod server;
pub mod session;
