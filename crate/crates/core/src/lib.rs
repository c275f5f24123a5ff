//! SOME/IP traffic simulation, attack and failure injection, labeled window
//! datasets and the six neural detectors that classify them.
//!
//! Data flows `sim` → `pipeline` (segments, injects via `attack` and
//! `failure`, windows and balances via `dataset`, encodes via `encode`) →
//! `store` on disk → `train` / `eval` / `bench`. Every random stage draws
//! from a seed derived in `seeds`, so a global seed reproduces every artifact
//! byte for byte.

pub mod attack;
pub mod bench;
pub mod codec;
pub mod dataset;
pub mod encode;
pub mod eval;
pub mod failure;
pub mod models;
pub mod pipeline;
pub mod seeds;
pub mod sim;
pub mod store;
pub mod topology;
pub mod trace;
pub mod train;
