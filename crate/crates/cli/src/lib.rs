//! Configuration layer of the `styleswap` command-line tool.

pub mod config;
