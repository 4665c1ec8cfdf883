#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod conservation;
pub mod frame;
mod geom;
pub mod ingest;
pub mod propagation;
pub mod rng;
pub mod safety;
pub mod stats;
pub mod pipeline;
pub mod report;
pub mod synth;
