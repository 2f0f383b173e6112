//! Functional-code analysis of neural-network hidden layers.
//!
//! Hidden-layer activations are average-pooled and unit-normalized into
//! hidden-layer representations (HLRs), a toroidal self-organizing map is
//! trained on them, and the resulting best-matching units (BMUs) are analyzed
//! for density, class correlation, adversarial displacement and the input
//! features they encode.
//!
//! A small convolutional reference network ([`refnet`]) with hand-written
//! backpropagation makes the whole pipeline runnable without external models.

pub mod adversarial;
pub mod clustering;
pub mod config;
pub mod density;
pub mod error;
pub mod hlr;
pub mod image;
pub mod inversion;
pub mod pipeline;
pub mod refnet;
pub mod som;

mod binio;

pub use error::{Error, Result};
