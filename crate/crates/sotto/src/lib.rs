//! Targeted adversarial audio against a small CTC speech transcriber.
//!
//! The crate spans the whole pipeline needed to build and study such
//! attacks end to end, with no external data or ML framework:
//!
//! - [`tensor`]: a reverse-mode differentiation graph over dense `f64`
//!   arrays, so every stage below is differentiable down to raw samples.
//! - [`audio`]: 16-bit waveforms, WAV files, peak-decibel measurement,
//!   and legal-range clipping.
//! - [`features`]: a framing + mel-cepstrum front end built from graph
//!   ops (dense DFT matrices), 50 frames per second.
//! - [`model`]: a small LSTM transcriber over those features, a CTC
//!   training loop, checkpointing, and a synthetic two-tone speech corpus
//!   so everything is reproducible from a seed.
//! - [`ctc`]: alignment reduction, phrase probabilities via dynamic
//!   programming, the differentiable CTC loss, and greedy/beam decoders,
//!   plus brute-force oracles used by the test suites.
//! - [`attack`]: the optimization attacks themselves — the CTC-loss
//!   attack with peak-bound reduction, the alignment-fixing two-step
//!   attack, dense and silence targets, single-step probes, and
//!   noise/codec-robust variants.
//! - [`report`]: serializable attack records, probe curves, and batch
//!   summary statistics.
//!
//! The `sotto-cli` crate wraps all of this in a command line; the guide
//! under `book/` walks through the concepts chapter by chapter.

pub mod alphabet;
pub mod attack;
pub mod audio;
pub mod ctc;
pub mod features;
pub mod gradcheck;
pub mod model;
pub mod optim;
pub mod report;
pub mod tensor;

#[cfg(doctest)]
mod book;
