//! Inverse-graphics toolkit around a textual scene-program DSL.
//!
//! The pipeline: a procedural generator samples 3D scenes and serializes each
//! camera view as a graphics-code program (`scene`); programs are converted to
//! hybrid token streams whose special tokens carry continuous rotation and
//! appearance payloads (`codec`); a small autoregressive decoder is trained to
//! invert a fixed synthetic feature model back into such streams (`decoder`);
//! reconstructions are scored with layout and retrieval metrics (`eval`).
//!
//! See the `examples/` directory for one runnable demo per capability, and
//! `docs/` for the grammar and binary formats.

pub mod cli;
pub mod codec;
pub mod datagen;
pub mod decoder;
pub mod eval;
pub mod index;
pub mod rot;
pub mod scene;
