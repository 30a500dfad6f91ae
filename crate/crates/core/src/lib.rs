//! Dual-prompt conditioned volumetric segmentation.
//!
//! A 3D encoder/decoder whose features are modulated (FiLM) by a context
//! prompt describing modality and body region, and whose 1×1×1 prediction
//! head is generated on the fly from a target prompt naming the structure
//! to segment. The same backbone can be adapted with low-rank adapters to
//! predict a survival risk score from an EHR-derived prompt.
//!
//! Everything in this crate is pure computation over owned buffers and runs
//! under `no_std` with `alloc`. File formats, dataset generation on disk and
//! the command-line front end live in the companion `dualprompt` crate.

#![no_std]

extern crate alloc;

pub mod ablation;
pub mod adaptation;
pub mod augment;
pub mod backbone;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod head;
pub mod lora;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod optim;
pub mod phantom;
pub mod prognosis;
pub mod real;
pub mod sampling;
pub mod tensor;
pub mod text;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::{Dims, FeatureMap};
