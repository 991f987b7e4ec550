//! Core of the staged medical-coding engine.
//!
//! The crate is `no_std` (it needs `alloc`) and holds every algorithm of the
//! engine: the ICD-10-CM taxonomy model, hybrid lexical/dense retrieval over
//! the alphabetical index, prompt rendering and answer parsing, the four-stage
//! Analyze/Locate/Assign/Verify pipeline, evaluation metrics and the
//! controlled candidate-set experiments.
//!
//! Anything touching files, the network, threads or clocks lives in the
//! companion `clh` crate, which plugs into the traits exposed here
//! ([`backend::Backend`], [`retrieval::Embedder`], [`pipeline::Executor`],
//! [`pipeline::Clock`]).
#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod backend;
pub mod code;
pub mod experiments;
pub mod metrics;
pub mod pipeline;
pub mod retrieval;
pub mod taxonomy;

pub use code::{Chapter, CodeError, CodeId, CHAPTERS};
pub use taxonomy::{GuidelineDoc, IndexEntry, InstructionalNotes, Taxonomy, TaxonomyError};

/// Hex-encoded SHA-256 of `text`; the content key used by scripted backends
/// and run manifests.
pub fn content_hash(text: &str) -> alloc::string::String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(text.as_bytes()))
}
