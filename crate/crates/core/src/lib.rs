//! Desk-scale multimodal fake-news detection.
//!
//! The model fuses text, image and caption representations through
//! co-attention blocks, gates the fused feature by cross-modal cosine
//! similarity, and runs a panel of recurrent experts that score the
//! emotional tone of each textual modality. A closed-form prior over the
//! relationship between tone and authenticity turns the mixed tone score
//! into an authenticity estimate, which is trained jointly with the final
//! classifier.
//!
//! Everything runs in `f64` on a recording tape so every trainable path
//! can be verified against central finite differences.

pub mod attention;
pub mod detector;
pub mod emotion;
pub mod encoders;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod model;
pub mod numerics;
pub mod params;
pub mod verify;

pub use error::{Result, SeerError};
