//! Everything the command-line front end drives: run configuration, model
//! loading, perplexity, routing reports and the built-in self-test.

pub mod config;
pub mod model;
pub mod ppl;
pub mod route;
pub mod selftest;
