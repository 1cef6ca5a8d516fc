//! Labeled MIMO IQ datasets: `r = H·s + n` with Gray-mapped symbol streams
//! on every transmit antenna, flat block fading and per-antenna AWGN.

mod channel;
mod constellation;
mod dataset;
mod format;
mod rng;

pub use channel::{
    add_awgn, apply_channel, apply_channel_per_slot, draw_channel, ChannelRealization, DRIFT_RHO,
};
pub use constellation::{
    gray, make_constellation, modulate, Constellation, Modulation, Scheme, APSK16_RING_RATIO,
};
pub use dataset::{
    generate_dataset, generate_frame, DatasetFile, DatasetHeader, DatasetSpec, SignalFrame,
};
pub use format::{
    decode_dataset, encode_dataset, read_dataset, write_dataset, FORMAT_VERSION, MAGIC,
};
pub use rng::{derive_seed, splitmix64, SignalRng, RNG_ID};

use std::path::Path;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unsupported constellation {scheme:?} with order {order}")]
    UnsupportedConstellation { scheme: Scheme, order: u32 },
    #[error("unknown modulation class {0:?}")]
    UnknownClass(String),
    #[error("{bits} bits do not divide into {bits_per_symbol}-bit symbols")]
    BitCount { bits: usize, bits_per_symbol: usize },
    #[error("need 1 <= Nt <= Nr, got Nt={nt}, Nr={nr}")]
    Antennas { nt: usize, nr: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite signal values")]
    NonFinite,
    #[error("class list is empty")]
    EmptyClasses,
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("bad magic {found:?}, expected \"CAMD\"")]
    BadMagic { found: Vec<u8> },
    #[error("unsupported format version {found} (expected {expected})")]
    Version { found: u32, expected: u32 },
    #[error("truncated dataset: expected {expected} bytes, found {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("dataset has trailing bytes: expected {expected} bytes, found {actual}")]
    TrailingBytes { expected: usize, actual: usize },
    #[error("corrupt dataset: {0}")]
    Corrupt(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl SynthError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        SynthError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}
