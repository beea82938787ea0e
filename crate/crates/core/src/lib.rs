//! Adapt a pretrained image generator toward a hybrid target domain
//! described by a mix of reference images and text prompts.
//!
//! The pipeline works entirely in a joint image-text embedding space: each
//! reference contributes a domain shift vector relative to a source anchor,
//! the shifts compose linearly into one target direction, and a cloned copy
//! of the frozen source generator is trained so that its outputs' embedding
//! shifts align with that direction. A patch-token contrastive loss keeps
//! the spatial layout of every sample pinned to the source while the
//! semantic loss moves its domain.
//!
//! Everything is deterministic given a config seed: noise, toy encoder
//! projections, and generator initialization all come from named substreams,
//! and the binary artifact formats round-trip bitwise.

pub mod css;
pub mod directions;
pub mod encoders;
pub mod error;
pub mod generators;
pub mod image;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod trainer;

mod vecmath;

pub use error::{Error, Result};
