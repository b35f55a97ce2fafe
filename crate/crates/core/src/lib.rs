//! Core algorithms for retrieval-augmented generation with self-memory.
//!
//! Everything in this crate is `no_std` + `alloc`: deterministic synthetic
//! corpus construction, BM25 retrieval, text metrics, a small reverse-mode
//! autodiff tape, transformer encoder/decoder models, beam decoding, a
//! candidate selector, and the iterative generate-select pipeline that ties
//! them together. File formats, configuration, and the command-line surface
//! live in the companion `selfmem-cli` crate.

#![no_std]
#![forbid(unsafe_code)]

extern crate alloc;

#[cfg(test)]
extern crate std;

pub mod corpus;
pub mod decode;
pub mod generator;
pub mod linalg;
pub mod metrics;
pub mod nn;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod selector;
pub mod tape;
