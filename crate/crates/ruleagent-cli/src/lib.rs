//! Library surface of the `ruleagent` binary, exposed so integration tests
//! can drive commands in-process.

pub mod cli;
pub mod commands;
pub mod config;
