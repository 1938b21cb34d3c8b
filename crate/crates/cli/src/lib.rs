//! Experiment toolkit: configuration, binary array artifacts, run manifests,
//! and the end-to-end pipeline behind the `l96uq` binary.

pub mod arrayfile;
pub mod config;
pub mod manifest;
pub mod pipeline;
