//! Glimpse-based active perception for visual relational reasoning.
//!
//! The pipeline factorizes an image into a "what" stream of glimpse
//! contents and a "where" stream of glimpse locations: an error-neuron
//! saliency map drives winner-takes-all glimpse selection with
//! inhibition-of-return masking; a multi-scale or log-polar sensor extracts
//! the pixels around each fixation; and a Transformer or Abstractor head
//! turns the dual sequence into a binary decision. Everything trains with a
//! small built-in reverse-mode autodiff engine.

pub mod error;
pub mod image;
pub mod saliency;
pub mod policy;
pub mod sensor;
pub mod tensor;

pub use error::{GapError, Result};
