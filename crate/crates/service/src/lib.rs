//! Command-line pipeline and live inference service on top of `magnet`.

pub mod cli;
pub mod server;
pub mod session;
