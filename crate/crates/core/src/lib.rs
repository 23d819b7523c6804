//! Desk-scale class-incremental learning with prototype classifiers.
//!
//! The crate provides an exemplar-free incremental data protocol, two small
//! trainable backbones (a vision transformer and a BN-equipped convolutional
//! network), a family of parameter-efficient adaptation methods, cosine
//! prototype classification with optional adapt-and-merge feature
//! concatenation, feature-compression ablations, and exact accuracy
//! accounting. Batch embedding and evaluation are data-parallel behind the
//! `parallel` feature (on by default) with a sequential fallback.

pub mod autodiff;
pub mod backbone;
pub mod data;
pub mod embedder;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub mod io;
pub mod learner;
pub mod parallel;
pub mod params;
pub mod peft;
pub mod projection;
pub mod prototype;
pub mod rng;
pub mod stream;

pub use backbone::{default_cnn_spec, default_vit_spec};
pub use error::{Error, Result};
