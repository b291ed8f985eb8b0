//! Continual learning for multichannel 1-D streams with generative replay.
//!
//! The crate is organized bottom-up: [`tensor`] provides a small
//! reverse-mode autodiff engine, [`nn`] builds the classifier and the
//! denoising network from it, [`diffusion`] implements the DDPM forward
//! corruption / reverse sampler, [`dsg`] adds distillation-guided generator
//! updates, and [`continual`] drives a whole task stream end to end.
//! [`data`], [`metrics`], [`config`], and [`cli`] supply the surrounding
//! plumbing.

pub mod cli;
pub mod config;
pub mod continual;
pub mod data;
pub mod diffusion;
pub mod dsg;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod tensor;
