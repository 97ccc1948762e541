//! Non-neural pipeline of an RGB/event-camera fusion detector.
//!
//! The crate covers everything around the networks: event-stream parsing and
//! denoising, temporal voxelization with event-count conservation, low-light
//! degradation and CLAHE enhancement, minimum-variance adaptive fusion with
//! its attention realization, detection decoding with NMS, and a
//! precision/recall/F1 evaluation harness. Feature maps and raw detection
//! head outputs are treated as inputs; no training happens here.
//!
//! All file formats (event CSV, `EVXG` voxel grids, `EVIM` images, `EVWT`
//! convolution weights, `EVRP` raw predictions, detection/ground-truth JSON)
//! live next to the types they serialize, and every reader rejects malformed
//! input rather than guessing.

pub mod codec;
pub mod config;
pub mod detect;
pub mod enhance;
pub mod error;
pub mod eval;
pub mod events;
pub mod fusion;
pub mod voxel;

pub use error::{Error, Result};
