//! Network definitions: the CNN classifier and the 1-D U-Net noise
//! predictor, assembled from tensor ops.
//!
//! Models are plain parameter containers. `trainable()` lists the tensors an
//! optimizer should update; `state()` additionally includes running buffers
//! (batchnorm statistics) and defines the checkpoint order. A JSON manifest
//! written alongside each checkpoint records the architecture so `load` can
//! rebuild the container before filling it.

mod classifier;
mod unet;

pub use classifier::{classifier_forward, ClassifierConfig, ClassifierModel};
pub use unet::{noise_predictor_forward, NoisePredictorModel, UnetConfig};

use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NnError {
    #[error("model: expected {expected} input channels, got {got}")]
    ChannelMismatch { expected: usize, got: usize },
    #[error("model: input length {length} too short; need at least {required}")]
    LengthTooShort { length: usize, required: usize },
    #[error("model: expected rank-3 (batch, channels, length) input, got shape {0:?}")]
    BadRank(String),
    #[error("model: timestep {tau} outside [1, {max}]")]
    TimestepOutOfRange { tau: usize, max: usize },
    #[error("model: timestep count {got} does not match batch size {batch}")]
    TimestepCount { got: usize, batch: usize },
    #[error("model: invalid configuration: {0}")]
    BadConfig(String),
    #[error("checkpoint does not fit this architecture: {0}")]
    StateMismatch(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("model io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

/// Sinusoidal position code for diffusion timesteps. Pure function of τ —
/// no trainable state.
#[derive(Debug, Clone)]
pub struct TimestepEmbedding {
    dimension: usize,
    max_period: f64,
}

impl TimestepEmbedding {
    pub fn new(dimension: usize) -> Result<TimestepEmbedding> {
        Self::with_period(dimension, 10_000.0)
    }

    pub fn with_period(dimension: usize, max_period: f64) -> Result<TimestepEmbedding> {
        if dimension == 0 || !dimension.is_multiple_of(2) {
            return Err(NnError::BadConfig(format!(
                "timestep embedding dimension must be even and positive, got {dimension}"
            )));
        }
        if max_period <= 1.0 {
            return Err(NnError::BadConfig(format!(
                "max_period {max_period} must exceed 1"
            )));
        }
        Ok(TimestepEmbedding {
            dimension,
            max_period,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// `(len(taus), dimension)` constant tensor: half sines, half cosines at
    /// geometrically spaced frequencies.
    pub fn embed(&self, taus: &[usize]) -> Tensor {
        let half = self.dimension / 2;
        let mut data = Vec::with_capacity(taus.len() * self.dimension);
        for &tau in taus {
            let t = tau as f64;
            for i in 0..half {
                let freq = (-(self.max_period.ln()) * i as f64 / half as f64).exp();
                data.push((t * freq).sin());
            }
            for i in 0..half {
                let freq = (-(self.max_period.ln()) * i as f64 / half as f64).exp();
                data.push((t * freq).cos());
            }
        }
        Tensor::new(&[taus.len(), self.dimension], data).expect("embedding shape")
    }
}

// ── checkpoint plumbing shared by both models ───────────────────────────

pub(crate) fn manifest_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("json")
}

pub(crate) fn write_manifest<M: Serialize>(checkpoint: &Path, manifest: &M) -> Result<()> {
    let text =
        serde_json::to_string_pretty(manifest).map_err(|e| NnError::Manifest(e.to_string()))?;
    std::fs::write(manifest_path(checkpoint), text + "\n")?;
    Ok(())
}

pub(crate) fn read_manifest<M: DeserializeOwned>(checkpoint: &Path) -> Result<M> {
    let path = manifest_path(checkpoint);
    let text = std::fs::read_to_string(&path)
        .map_err(|e| NnError::Manifest(format!("cannot read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| NnError::Manifest(e.to_string()))
}

/// Copies `sources` into `targets` position by position, verifying shapes.
pub(crate) fn fill_state(targets: &[Tensor], sources: &[Tensor]) -> Result<()> {
    if targets.len() != sources.len() {
        return Err(NnError::StateMismatch(format!(
            "{} tensors in file, model has {}",
            sources.len(),
            targets.len()
        )));
    }
    for (i, (t, s)) in targets.iter().zip(sources).enumerate() {
        if t.shape() != s.shape() {
            return Err(NnError::StateMismatch(format!(
                "tensor {i}: file shape {:?}, model shape {:?}",
                s.shape(),
                t.shape()
            )));
        }
        t.copy_from(&s.to_vec());
    }
    Ok(())
}
