//! Synthetic MIMO modulation datasets and the CAMD recognizer.
//!
//! * [`diffcore`]: reverse-mode array engine, AdamW and gradient checking.
//! * [`sigsynth`]: constellations, block-fading channels, AWGN and the
//!   binary dataset format.
//! * [`model`]: channel compensation, feature embedding, inter-antenna
//!   transformer, temporal LSTM, ablation variants and checkpoints.
//! * [`train`]: stratified splits, the training loop, evaluation and CSV
//!   reports.
//! * [`selfcheck`]: finite-difference check of every operation and of the
//!   network.
//! * [`config`]: flat dotted-key run configuration.

pub mod config;
pub mod diffcore;
pub mod model;
pub mod selfcheck;
pub mod sigsynth;
pub mod train;
