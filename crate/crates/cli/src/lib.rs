//! Library surface of the patchprobe CLI, exposed so integration tests can
//! introspect the command grammar and rerun machinery directly.

pub mod cli;
pub mod commands;
pub mod inputs;
pub mod manifest;
