//! Temporal scene-graph generation with scene-graph memory.
//!
//! Scene graphs predicted at earlier timepoints are re-consumed as memory
//! input for the current prediction. The crate covers the full desk-scale
//! pipeline: domain types and file formats, memory-window selection, a
//! from-scratch reverse-mode tensor engine, the graph/fusion encoders,
//! teacher-forced training with autoregressive inference, evaluation
//! metrics, a synthetic benchmark generator and an ablation harness.

pub mod ablate;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod manifest;
pub mod memory;
pub mod model;
pub mod params;
pub mod recording;
pub mod scene;
pub mod synth;
pub mod tensor;
pub mod vocab;
