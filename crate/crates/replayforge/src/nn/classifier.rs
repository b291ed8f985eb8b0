//! The convolutional classifier: four conv blocks (conv k=5 s=1 p=2, ReLU,
//! batchnorm, maxpool k=2 s=2, dropout), global average pooling over time,
//! and a linear head. The channel plan is configurable; the default follows
//! the 64→128→256→128 widening used for the full-scale datasets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fill_state, read_manifest, write_manifest, NnError, Result};
use crate::rng::Rng;
use crate::tensor::{load_tensors, save_tensors, Graph, Tensor};

const KERNEL: usize = 5;
const PADDING: usize = 2;
const BN_MOMENTUM: f64 = 0.1;
const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub channels: Vec<usize>,
    pub dropout_rate: f64,
}

impl ClassifierConfig {
    pub fn new(in_channels: usize, num_classes: usize) -> ClassifierConfig {
        ClassifierConfig {
            in_channels,
            num_classes,
            channels: vec![64, 128, 256, 128],
            dropout_rate: 0.1,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.num_classes == 0 {
            return Err(NnError::BadConfig(
                "channels and classes must be >= 1".into(),
            ));
        }
        if self.channels.is_empty() || self.channels.contains(&0) {
            return Err(NnError::BadConfig(format!(
                "bad channel plan {:?}",
                self.channels
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(NnError::BadConfig(format!(
                "dropout rate {} outside [0, 1)",
                self.dropout_rate
            )));
        }
        Ok(())
    }

    /// Smallest input length the block stack can pool down without hitting
    /// extent zero.
    pub fn min_length(&self) -> usize {
        1 << self.channels.len()
    }
}

struct ConvBlock {
    w: Tensor,
    b: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: Tensor,
    running_var: Tensor,
}

pub struct ClassifierModel {
    cfg: ClassifierConfig,
    blocks: Vec<ConvBlock>,
    head_w: Tensor,
    head_b: Tensor,
}

impl ClassifierModel {
    pub fn new(cfg: ClassifierConfig, rng: &mut Rng) -> Result<ClassifierModel> {
        cfg.validate()?;
        let mut blocks = Vec::with_capacity(cfg.channels.len());
        let mut prev = cfg.in_channels;
        for &ch in &cfg.channels {
            let std = (2.0 / (prev * KERNEL) as f64).sqrt();
            let g = Graph::inference();
            let w = g
                .scalar_mul(&Tensor::randn(&[ch, prev, KERNEL], rng), std)?
                .with_grad();
            blocks.push(ConvBlock {
                w,
                b: Tensor::zeros(&[ch]).with_grad(),
                gamma: Tensor::full(&[ch], 1.0).with_grad(),
                beta: Tensor::zeros(&[ch]).with_grad(),
                running_mean: Tensor::zeros(&[ch]),
                running_var: Tensor::full(&[ch], 1.0),
            });
            prev = ch;
        }
        let std = (1.0 / prev as f64).sqrt();
        let g = Graph::inference();
        let head_w = g
            .scalar_mul(&Tensor::randn(&[prev, cfg.num_classes], rng), std)?
            .with_grad();
        let head_b = Tensor::zeros(&[cfg.num_classes]).with_grad();
        Ok(ClassifierModel {
            cfg,
            blocks,
            head_w,
            head_b,
        })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.cfg
    }

    pub fn num_classes(&self) -> usize {
        self.cfg.num_classes
    }

    /// Optimizer targets, in checkpoint order.
    pub fn trainable(&self) -> Vec<Tensor> {
        let mut ps = Vec::new();
        for b in &self.blocks {
            ps.extend([b.w.clone(), b.b.clone(), b.gamma.clone(), b.beta.clone()]);
        }
        ps.extend([self.head_w.clone(), self.head_b.clone()]);
        ps
    }

    /// Trainable parameters followed by batchnorm running buffers; the full
    /// checkpoint contents.
    pub fn state(&self) -> Vec<Tensor> {
        let mut ts = self.trainable();
        for b in &self.blocks {
            ts.extend([b.running_mean.clone(), b.running_var.clone()]);
        }
        ts
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(Tensor::numel).sum()
    }

    /// Independent copy with the same weights and buffers.
    pub fn deep_clone(&self) -> ClassifierModel {
        let blocks = self
            .blocks
            .iter()
            .map(|b| ConvBlock {
                w: b.w.deep_clone(),
                b: b.b.deep_clone(),
                gamma: b.gamma.deep_clone(),
                beta: b.beta.deep_clone(),
                running_mean: b.running_mean.deep_clone(),
                running_var: b.running_var.deep_clone(),
            })
            .collect();
        ClassifierModel {
            cfg: self.cfg.clone(),
            blocks,
            head_w: self.head_w.deep_clone(),
            head_b: self.head_b.deep_clone(),
        }
    }

    /// Overwrites this model's weights and buffers from another instance of
    /// the same architecture.
    pub fn copy_weights_from(&mut self, other: &ClassifierModel) -> Result<()> {
        fill_state(&self.state(), &other.state())
    }

    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        save_tensors(checkpoint, &self.state())?;
        write_manifest(
            checkpoint,
            &Manifest {
                architecture: "classifier".into(),
                config: self.cfg.clone(),
            },
        )
    }

    pub fn load(checkpoint: &Path) -> Result<ClassifierModel> {
        let manifest: Manifest = read_manifest(checkpoint)?;
        if manifest.architecture != "classifier" {
            return Err(NnError::Manifest(format!(
                "expected a classifier manifest, found {:?}",
                manifest.architecture
            )));
        }
        let mut rng = crate::rng::substream(0, "nn/load_placeholder");
        let model = ClassifierModel::new(manifest.config, &mut rng)?;
        let tensors = load_tensors(checkpoint)?;
        fill_state(&model.state(), &tensors)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    architecture: String,
    #[serde(flatten)]
    config: ClassifierConfig,
}

/// Runs the classifier. In train mode, dropout draws from `rng` and batch
/// statistics update the running buffers; eval mode consumes no randomness.
pub fn classifier_forward(
    model: &ClassifierModel,
    g: &Graph,
    batch: &Tensor,
    train_mode: bool,
    rng: &mut Rng,
) -> Result<Tensor> {
    let shape = batch.shape();
    if shape.len() != 3 {
        return Err(NnError::BadRank(format!("{shape:?}")));
    }
    if shape[1] != model.cfg.in_channels {
        return Err(NnError::ChannelMismatch {
            expected: model.cfg.in_channels,
            got: shape[1],
        });
    }
    if shape[2] < model.cfg.min_length() {
        return Err(NnError::LengthTooShort {
            length: shape[2],
            required: model.cfg.min_length(),
        });
    }
    let mut h = batch.clone();
    for block in &model.blocks {
        h = g.conv1d(&h, &block.w, Some(&block.b), 1, PADDING)?;
        h = g.relu(&h)?;
        h = g.batchnorm1d(
            &h,
            &block.gamma,
            &block.beta,
            &block.running_mean,
            &block.running_var,
            train_mode,
            BN_MOMENTUM,
            BN_EPS,
        )?;
        h = g.maxpool1d(&h, 2, 2)?;
        h = g.dropout(&h, model.cfg.dropout_rate, train_mode, rng)?;
    }
    let pooled = g.global_avg_pool1d(&h)?;
    let logits = g.add(&g.matmul(&pooled, &model.head_w)?, &model.head_b)?;
    Ok(logits)
}
