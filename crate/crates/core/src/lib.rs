//! Few-shot out-of-distribution detection with synthesized outlier supervision.
//!
//! The pipeline extracts class-relevant patch regions from a frozen
//! vision-language backbone (neighborhood context incorporation plus
//! value-value attention, corrected by the discrepancy between the modified
//! and unmodified similarity maps), pools them into per-class features,
//! synthesizes outlier features by cross-class mixup, trains class prompts
//! together with an "unknown" prompt, and scores test images by maximum
//! class softmax for ID/OOD separation.

pub mod backbone;
pub mod config;
pub mod data;
pub mod error;
pub mod masking;
pub mod numeric;
pub mod objective;
pub mod pipeline;
pub mod scoring;
pub mod synthesis;
pub mod textbank;

pub use error::{Error, Result};
