//! Configuration, experiment orchestration and artefact writers behind the
//! `beamadapt` command-line tool.

pub mod commands;
pub mod config;
pub mod experiment;
pub mod output;

pub use config::RunConfig;
