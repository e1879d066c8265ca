//! Retrieval of related labeled tables, harmonization of a retrieved
//! source onto a target table, and weighted source/target training.

pub mod adapter;
pub mod catalog;
pub mod embed;
pub mod harmonize;
pub mod kv;
pub mod pipeline;
pub mod synth;
pub mod transfer;
pub mod util;
