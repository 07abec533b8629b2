//! Pipeline orchestration behind the `xmodal` binary.
//!
//! The library half exists so integration and acceptance tests can drive the
//! exact code the CLI runs without spawning processes.

pub mod config;
pub mod pipeline;
pub mod render;
