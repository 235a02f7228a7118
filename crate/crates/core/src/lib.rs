//! Multimodal training lab built around grad⊙input modality attribution and
//! an attribution-ratio regularizer on the fusion/classifier layers.
//!
//! Layering, bottom up: [`tensor`] (autodiff with double backprop), [`model`],
//! [`attribution`], [`amr`], [`baselines`], [`data`], [`harness`], and the
//! [`config`] / [`cli`] front end.

pub mod amr;
pub mod attribution;
pub mod baselines;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod harness;
pub mod model;
pub mod optim;
pub mod tensor;

pub use error::{Error, Result};
