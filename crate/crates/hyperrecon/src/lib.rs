//! File formats, command-line pipeline and HTTP service around
//! `hyperrecon-core`.

pub mod cli;
pub mod config;
pub mod io;
pub mod pipeline;
pub mod serve;
