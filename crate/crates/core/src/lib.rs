//! A desk-scale laboratory for remote cache-timing attacks on AES-128.
//!
//! The pieces, bottom to top:
//!
//! * [`aes`]: table-driven AES-128 that reports every table lookup it makes.
//! * [`cache`]: a deterministic cache model that prices a lookup trace in cycles.
//! * [`countermeasure`]: per-round cycle-padding policies that mask the timing.
//! * [`server`]: a TCP oracle that encrypts payloads under a secret key and
//!   returns only the cycle count plus the encryption of the all-zero block.
//! * [`client`]: timing collection, per-byte profiling, profile correlation,
//!   key-space estimation, and brute-force search.
//! * [`analysis`]: overhead/efficiency metrics, the search-speed benchmark,
//!   and report files.
//! * [`experiment`]: the scripted end-to-end run used by the CLI and tests.

pub mod aes;
pub mod analysis;
pub mod cache;
pub mod client;
pub mod countermeasure;
pub mod experiment;
pub mod server;

pub use aes::{AesKey, Block};

use std::io;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("payload length {0} is not a positive multiple of 16")]
    PayloadLength(usize),
    #[error("malformed lookup trace: {0}")]
    Trace(String),
    #[error("bad configuration: {0}")]
    Config(String),
    #[error("malformed file {path}: {reason}")]
    FileFormat { path: String, reason: String },
    #[error("wire protocol violation: {0}")]
    Protocol(String),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
