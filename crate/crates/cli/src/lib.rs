//! Command-line front end: configuration files and one function per verb.

pub mod commands;
pub mod config;
