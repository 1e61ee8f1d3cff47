//! Object-centric transformer for long-form video understanding.
//!
//! Videos are represented as sets of detection tracks rather than frame
//! pixels. Each detection contributes one token built from its appearance
//! feature, box geometry, temporal position, instance identity, and shot
//! membership. A small transformer encoder runs over the token sequence and
//! task heads read either the `[CLS]` state or per-token states.
//!
//! The crate is self-contained: it ships its own reverse-mode autodiff over
//! dense tensors, an Adam optimizer, a synthetic corpus generator with
//! controllable long-range structure, preprocessing from raw per-frame
//! detections (tracking, shot detection, span enumeration), pretraining
//! (masked-instance and span-compatibility objectives), fine-tuning with a
//! small grid search, pooling baselines, and a short-term/long-term late
//! fusion head. The `objtx` binary exposes the pipeline stages as
//! subcommands.

pub mod cli;
pub mod data;
pub mod error;
pub mod finetune;
pub mod fusion;
pub mod io;
pub mod model;
pub mod numerics;
pub mod preprocess;
pub mod pretrain;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
