//! The 1-D U-Net noise predictor: input projection, `depth` downsampling
//! stages (conv k=3 p=1 + ReLU, then a stride-2 conv), a bottleneck, and
//! mirrored upsampling stages with skip concatenation. A sinusoidal timestep
//! embedding runs through a two-layer perceptron and is injected into every
//! stage through a per-stage linear projection.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{fill_state, read_manifest, write_manifest, NnError, Result, TimestepEmbedding};
use crate::rng::Rng;
use crate::tensor::{load_tensors, save_tensors, Graph, Tensor};

const KERNEL: usize = 3;
const PADDING: usize = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UnetConfig {
    /// Signal channel count (input and output).
    pub channels: usize,
    /// Width after the input projection; doubles per downsampling stage.
    pub base: usize,
    /// Number of downsampling / upsampling stages.
    pub depth: usize,
    /// Sinusoidal embedding width.
    pub time_dim: usize,
    /// Largest timestep the model accepts (the schedule length it was built
    /// for).
    pub max_timestep: usize,
}

impl UnetConfig {
    pub fn new(channels: usize, max_timestep: usize) -> UnetConfig {
        UnetConfig {
            channels,
            base: 16,
            depth: 2,
            time_dim: 64,
            max_timestep,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.base == 0 {
            return Err(NnError::BadConfig(
                "channels and base width must be >= 1".into(),
            ));
        }
        if self.depth == 0 || self.depth > 6 {
            return Err(NnError::BadConfig(format!(
                "depth {} outside [1, 6]",
                self.depth
            )));
        }
        if self.max_timestep == 0 {
            return Err(NnError::BadConfig("max_timestep must be >= 1".into()));
        }
        if self.time_dim == 0 || !self.time_dim.is_multiple_of(2) {
            return Err(NnError::BadConfig(format!(
                "time_dim {} must be even",
                self.time_dim
            )));
        }
        Ok(())
    }
}

struct Conv {
    w: Tensor,
    b: Tensor,
}

impl Conv {
    fn new(out_ch: usize, in_ch: usize, kernel: usize, rng: &mut Rng) -> Conv {
        let std = (2.0 / (in_ch * kernel) as f64).sqrt();
        let w = scaled_randn(&[out_ch, in_ch, kernel], std, rng);
        Conv {
            w,
            b: Tensor::zeros(&[out_ch]).with_grad(),
        }
    }

    fn push_params(&self, out: &mut Vec<Tensor>) {
        out.push(self.w.clone());
        out.push(self.b.clone());
    }

    fn deep_clone(&self) -> Conv {
        Conv {
            w: self.w.deep_clone(),
            b: self.b.deep_clone(),
        }
    }
}

struct Linear {
    w: Tensor,
    b: Tensor,
}

impl Linear {
    fn new(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Linear {
        let std = (1.0 / in_dim as f64).sqrt();
        let w = scaled_randn(&[in_dim, out_dim], std, rng);
        Linear {
            w,
            b: Tensor::zeros(&[out_dim]).with_grad(),
        }
    }

    fn apply(&self, g: &Graph, x: &Tensor) -> crate::tensor::Result<Tensor> {
        g.add(&g.matmul(x, &self.w)?, &self.b)
    }

    fn push_params(&self, out: &mut Vec<Tensor>) {
        out.push(self.w.clone());
        out.push(self.b.clone());
    }

    fn deep_clone(&self) -> Linear {
        Linear {
            w: self.w.deep_clone(),
            b: self.b.deep_clone(),
        }
    }
}

fn scaled_randn(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor {
    let t = Tensor::randn(shape, rng);
    let data: Vec<f64> = t.data().iter().map(|v| v * std).collect();
    Tensor::new(shape, data)
        .expect("scaled_randn shape")
        .with_grad()
}

struct DownStage {
    widen: Conv,
    time: Linear,
    down: Conv,
}

struct UpStage {
    fuse: Conv,
    time: Linear,
}

pub struct NoisePredictorModel {
    cfg: UnetConfig,
    embed: TimestepEmbedding,
    time_mlp1: Linear,
    time_mlp2: Linear,
    proj: Conv,
    downs: Vec<DownStage>,
    mid: Conv,
    mid_time: Linear,
    ups: Vec<UpStage>, // indexed by stage depth, applied in reverse
    out: Conv,
}

impl NoisePredictorModel {
    pub fn new(cfg: UnetConfig, rng: &mut Rng) -> Result<NoisePredictorModel> {
        cfg.validate()?;
        let embed = TimestepEmbedding::new(cfg.time_dim)?;
        let time_mlp1 = Linear::new(cfg.time_dim, cfg.time_dim, rng);
        let time_mlp2 = Linear::new(cfg.time_dim, cfg.time_dim, rng);
        let proj = Conv::new(cfg.base, cfg.channels, KERNEL, rng);
        let mut downs = Vec::with_capacity(cfg.depth);
        for d in 0..cfg.depth {
            let (w_in, w_out) = (cfg.base << d, cfg.base << (d + 1));
            downs.push(DownStage {
                widen: Conv::new(w_out, w_in, KERNEL, rng),
                time: Linear::new(cfg.time_dim, w_out, rng),
                down: Conv::new(w_out, w_out, KERNEL, rng),
            });
        }
        let deepest = cfg.base << cfg.depth;
        let mid = Conv::new(deepest, deepest, KERNEL, rng);
        let mid_time = Linear::new(cfg.time_dim, deepest, rng);
        let mut ups = Vec::with_capacity(cfg.depth);
        for d in 0..cfg.depth {
            let fused_in = cfg.base << (d + 2); // upsampled + skip
            let out_ch = cfg.base << d;
            ups.push(UpStage {
                fuse: Conv::new(out_ch, fused_in, KERNEL, rng),
                time: Linear::new(cfg.time_dim, out_ch, rng),
            });
        }
        let out = Conv::new(cfg.channels, cfg.base, KERNEL, rng);
        Ok(NoisePredictorModel {
            cfg,
            embed,
            time_mlp1,
            time_mlp2,
            proj,
            downs,
            mid,
            mid_time,
            ups,
            out,
        })
    }

    pub fn config(&self) -> &UnetConfig {
        &self.cfg
    }

    pub fn max_timestep(&self) -> usize {
        self.cfg.max_timestep
    }

    /// All parameters in checkpoint order. The U-Net has no running buffers,
    /// so this is also the full state.
    pub fn trainable(&self) -> Vec<Tensor> {
        let mut ps = Vec::new();
        self.time_mlp1.push_params(&mut ps);
        self.time_mlp2.push_params(&mut ps);
        self.proj.push_params(&mut ps);
        for d in &self.downs {
            d.widen.push_params(&mut ps);
            d.time.push_params(&mut ps);
            d.down.push_params(&mut ps);
        }
        self.mid.push_params(&mut ps);
        self.mid_time.push_params(&mut ps);
        for u in &self.ups {
            u.fuse.push_params(&mut ps);
            u.time.push_params(&mut ps);
        }
        self.out.push_params(&mut ps);
        ps
    }

    pub fn state(&self) -> Vec<Tensor> {
        self.trainable()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(Tensor::numel).sum()
    }

    pub fn deep_clone(&self) -> NoisePredictorModel {
        NoisePredictorModel {
            cfg: self.cfg.clone(),
            embed: self.embed.clone(),
            time_mlp1: self.time_mlp1.deep_clone(),
            time_mlp2: self.time_mlp2.deep_clone(),
            proj: self.proj.deep_clone(),
            downs: self
                .downs
                .iter()
                .map(|d| DownStage {
                    widen: d.widen.deep_clone(),
                    time: d.time.deep_clone(),
                    down: d.down.deep_clone(),
                })
                .collect(),
            mid: self.mid.deep_clone(),
            mid_time: self.mid_time.deep_clone(),
            ups: self
                .ups
                .iter()
                .map(|u| UpStage {
                    fuse: u.fuse.deep_clone(),
                    time: u.time.deep_clone(),
                })
                .collect(),
            out: self.out.deep_clone(),
        }
    }

    pub fn copy_weights_from(&mut self, other: &NoisePredictorModel) -> Result<()> {
        fill_state(&self.state(), &other.state())
    }

    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        save_tensors(checkpoint, &self.state())?;
        write_manifest(
            checkpoint,
            &Manifest {
                architecture: "noise_predictor".into(),
                config: self.cfg.clone(),
            },
        )
    }

    pub fn load(checkpoint: &Path) -> Result<NoisePredictorModel> {
        let manifest: Manifest = read_manifest(checkpoint)?;
        if manifest.architecture != "noise_predictor" {
            return Err(NnError::Manifest(format!(
                "expected a noise_predictor manifest, found {:?}",
                manifest.architecture
            )));
        }
        let mut rng = crate::rng::substream(0, "nn/load_placeholder");
        let model = NoisePredictorModel::new(manifest.config, &mut rng)?;
        let tensors = load_tensors(checkpoint)?;
        fill_state(&model.state(), &tensors)?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    architecture: String,
    #[serde(flatten)]
    config: UnetConfig,
}

/// Predicts the noise component of `x_tau` given per-sample timesteps. The
/// network is deterministic — no dropout, no batch statistics — so the same
/// weights, input, and timesteps always give the same output.
pub fn noise_predictor_forward(
    model: &NoisePredictorModel,
    g: &Graph,
    x_tau: &Tensor,
    taus: &[usize],
) -> Result<Tensor> {
    let shape = x_tau.shape();
    if shape.len() != 3 {
        return Err(NnError::BadRank(format!("{shape:?}")));
    }
    let (batch, channels, length) = (shape[0], shape[1], shape[2]);
    if channels != model.cfg.channels {
        return Err(NnError::ChannelMismatch {
            expected: model.cfg.channels,
            got: channels,
        });
    }
    if taus.len() != batch {
        return Err(NnError::TimestepCount {
            got: taus.len(),
            batch,
        });
    }
    for &tau in taus {
        if tau == 0 || tau > model.cfg.max_timestep {
            return Err(NnError::TimestepOutOfRange {
                tau,
                max: model.cfg.max_timestep,
            });
        }
    }

    // right-pad to a multiple of 2^depth so every stride-2 stage halves
    // exactly and every upsample doubles back
    let unit = 1usize << model.cfg.depth;
    let padded_len = length.div_ceil(unit) * unit;
    let mut h = x_tau.clone();
    if padded_len != length {
        let zeros = Tensor::zeros(&[batch, channels, padded_len - length]);
        h = g.concat(&[&h, &zeros], 2)?;
    }

    // shared two-layer perceptron over the sinusoidal code
    let code = model.embed.embed(taus); // constant (B, time_dim)
    let t1 = g.relu(&model.time_mlp1.apply(g, &code)?)?;
    let temb = model.time_mlp2.apply(g, &t1)?;

    let inject = |g: &Graph, h: &Tensor, proj: &Linear| -> Result<Tensor> {
        let per_channel = proj.apply(g, &temb)?; // (B, ch)
        let shape = h.shape();
        let col = g.reshape(&per_channel, &[shape[0], shape[1], 1])?;
        Ok(g.add(h, &col)?)
    };

    h = g.conv1d(&h, &model.proj.w, Some(&model.proj.b), 1, PADDING)?;
    let mut skips = Vec::with_capacity(model.cfg.depth);
    for stage in &model.downs {
        h = g.conv1d(&h, &stage.widen.w, Some(&stage.widen.b), 1, PADDING)?;
        h = inject(g, &h, &stage.time)?;
        h = g.relu(&h)?;
        skips.push(h.clone());
        h = g.conv1d(&h, &stage.down.w, Some(&stage.down.b), 2, PADDING)?;
        h = g.relu(&h)?;
    }
    h = g.conv1d(&h, &model.mid.w, Some(&model.mid.b), 1, PADDING)?;
    h = inject(g, &h, &model.mid_time)?;
    h = g.relu(&h)?;
    for (stage, skip) in model.ups.iter().zip(&skips).rev() {
        h = upsample2(g, &h)?;
        h = g.concat(&[&h, skip], 1)?;
        h = g.conv1d(&h, &stage.fuse.w, Some(&stage.fuse.b), 1, PADDING)?;
        h = inject(g, &h, &stage.time)?;
        h = g.relu(&h)?;
    }
    h = g.conv1d(&h, &model.out.w, Some(&model.out.b), 1, PADDING)?;
    if padded_len != length {
        h = g.slice(&h, 2, 0, length)?;
    }
    Ok(h)
}

/// Nearest-neighbor ×2 along time: duplicate each position.
fn upsample2(g: &Graph, h: &Tensor) -> Result<Tensor> {
    let shape = h.shape();
    let (b, c, l) = (shape[0], shape[1], shape[2]);
    let col = g.reshape(h, &[b, c, l, 1])?;
    let dup = g.concat(&[&col, &col], 3)?;
    Ok(g.reshape(&dup, &[b, c, 2 * l])?)
}
