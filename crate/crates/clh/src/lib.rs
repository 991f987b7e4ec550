//! Files, network, threads and the command line around `clh-core`.

pub mod backends;
pub mod cli;
pub mod config;
pub mod data;
pub mod exec;
pub mod http;
pub mod io;
pub mod manifest;
pub mod snapshot;
pub mod synth;
