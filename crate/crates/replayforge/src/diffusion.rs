//! DDPM core: the variance schedule, closed-form forward corruption, the
//! simplified noise-prediction loss, and ancestral sampling.

use std::path::Path;

use rand::Rng as _;

use crate::nn::{noise_predictor_forward, NnError, NoisePredictorModel, UnetConfig};
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, TensorError};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DiffusionError {
    #[error("schedule: {0}")]
    BadSchedule(String),
    #[error("diffusion: timestep {tau} outside [1, {t}]")]
    TimestepOutOfRange { tau: usize, t: usize },
    #[error("diffusion: shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DiffusionError>;

/// Which variance to use for the reverse-process noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sigma2Choice {
    /// σ²_τ = β_τ.
    #[default]
    Beta,
    /// σ²_τ = (1 − ᾱ_{τ−1}) / (1 − ᾱ_τ) · β_τ, with the τ=1 value pinned to β₁.
    BetaTilde,
}

/// Precomputed β, α, ᾱ, and σ² tables, 1-indexed by timestep.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    sigma2s: Vec<f64>,
    choice: Sigma2Choice,
}

impl NoiseSchedule {
    /// Builds the tables from explicit per-step betas.
    pub fn from_betas(betas: Vec<f64>, choice: Sigma2Choice) -> Result<NoiseSchedule> {
        if betas.is_empty() {
            return Err(DiffusionError::BadSchedule("need at least one step".into()));
        }
        if let Some(&b) = betas.iter().find(|b| !(0.0 < **b && **b < 1.0)) {
            return Err(DiffusionError::BadSchedule(format!(
                "beta {b} outside (0, 1)"
            )));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(betas.len());
        let mut acc = 1.0;
        for &a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        if alpha_bars.iter().any(|&ab| !(0.0 < ab && ab < 1.0)) {
            return Err(DiffusionError::BadSchedule("alpha_bar left (0, 1)".into()));
        }
        let sigma2s = match choice {
            Sigma2Choice::Beta => betas.clone(),
            Sigma2Choice::BetaTilde => {
                let mut s = Vec::with_capacity(betas.len());
                for tau in 1..=betas.len() {
                    if tau == 1 {
                        s.push(betas[0]); // ᾱ₀ ≡ 1 makes the formula degenerate
                    } else {
                        s.push(
                            (1.0 - alpha_bars[tau - 2]) / (1.0 - alpha_bars[tau - 1])
                                * betas[tau - 1],
                        );
                    }
                }
                s
            }
        };
        Ok(NoiseSchedule {
            betas,
            alphas,
            alpha_bars,
            sigma2s,
            choice,
        })
    }

    pub fn t(&self) -> usize {
        self.betas.len()
    }

    pub fn sigma2_choice(&self) -> Sigma2Choice {
        self.choice
    }

    fn check(&self, tau: usize) {
        assert!(
            tau >= 1 && tau <= self.t(),
            "timestep {tau} outside schedule [1, {}]",
            self.t()
        );
    }

    pub fn beta(&self, tau: usize) -> f64 {
        self.check(tau);
        self.betas[tau - 1]
    }

    pub fn alpha(&self, tau: usize) -> f64 {
        self.check(tau);
        self.alphas[tau - 1]
    }

    pub fn alpha_bar(&self, tau: usize) -> f64 {
        self.check(tau);
        self.alpha_bars[tau - 1]
    }

    pub fn sigma2(&self, tau: usize) -> f64 {
        self.check(tau);
        self.sigma2s[tau - 1]
    }

    pub fn sigma(&self, tau: usize) -> f64 {
        self.sigma2(tau).sqrt()
    }

    /// The per-step betas backing the tables.
    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

/// Linear β interpolation from `beta_start` to `beta_end` over `t` steps.
pub fn make_schedule(
    t: usize,
    beta_start: f64,
    beta_end: f64,
    choice: Sigma2Choice,
) -> Result<NoiseSchedule> {
    if t == 0 {
        return Err(DiffusionError::BadSchedule("T must be >= 1".into()));
    }
    if !(0.0 < beta_start && beta_start <= beta_end && beta_end < 1.0) {
        return Err(DiffusionError::BadSchedule(format!(
            "need 0 < beta_start <= beta_end < 1, got {beta_start}..{beta_end}"
        )));
    }
    let betas = if t == 1 {
        vec![beta_start]
    } else {
        (0..t)
            .map(|i| beta_start + (beta_end - beta_start) * i as f64 / (t - 1) as f64)
            .collect()
    };
    NoiseSchedule::from_betas(betas, choice)
}

/// The desk-scale default: T=200, β linear 1e-4 → 0.02, σ² = β.
pub fn default_schedule() -> NoiseSchedule {
    make_schedule(200, 1e-4, 0.02, Sigma2Choice::Beta).expect("default schedule is valid")
}

/// A noise predictor bound to the schedule it was trained against.
pub struct DiffusionModel {
    pub predictor: NoisePredictorModel,
    pub schedule: NoiseSchedule,
}

/// The predictor's checkpoint manifest, extended with the schedule so a saved
/// generator can be sampled again from the files alone. The extra fields are
/// ignored by plain predictor loads.
#[derive(serde::Serialize, serde::Deserialize)]
struct GeneratorManifest {
    architecture: String,
    #[serde(flatten)]
    unet: UnetConfig,
    schedule_betas: Vec<f64>,
    schedule_sigma2: Sigma2Choice,
}

impl DiffusionModel {
    pub fn save(&self, checkpoint: &Path) -> Result<()> {
        self.predictor.save(checkpoint)?;
        let manifest = GeneratorManifest {
            architecture: "noise_predictor".into(),
            unet: self.predictor.config().clone(),
            schedule_betas: self.schedule.betas().to_vec(),
            schedule_sigma2: self.schedule.sigma2_choice(),
        };
        Ok(crate::nn::write_manifest(checkpoint, &manifest)?)
    }

    pub fn load(checkpoint: &Path) -> Result<DiffusionModel> {
        let manifest: GeneratorManifest = crate::nn::read_manifest(checkpoint)?;
        let predictor = NoisePredictorModel::load(checkpoint)?;
        let schedule =
            NoiseSchedule::from_betas(manifest.schedule_betas, manifest.schedule_sigma2)?;
        if schedule.t() != predictor.max_timestep() {
            return Err(DiffusionError::BadSchedule(format!(
                "manifest schedule has {} steps but the predictor embeds {}",
                schedule.t(),
                predictor.max_timestep()
            )));
        }
        Ok(DiffusionModel {
            predictor,
            schedule,
        })
    }
}

/// Closed-form forward corruption: `√ᾱ_τ·x₀ + √(1−ᾱ_τ)·ε`. Pure data; never
/// part of a gradient tape.
pub fn diffuse(x0: &Tensor, tau: usize, eps: &Tensor, schedule: &NoiseSchedule) -> Result<Tensor> {
    if tau == 0 || tau > schedule.t() {
        return Err(DiffusionError::TimestepOutOfRange {
            tau,
            t: schedule.t(),
        });
    }
    if x0.shape() != eps.shape() {
        return Err(DiffusionError::Shape(format!(
            "x0 {:?} vs eps {:?}",
            x0.shape(),
            eps.shape()
        )));
    }
    let ab = schedule.alpha_bar(tau);
    let (scale_x, scale_e) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data = x0
        .data()
        .iter()
        .zip(eps.data().iter())
        .map(|(x, e)| scale_x * x + scale_e * e)
        .collect();
    Ok(Tensor::new(&x0.shape(), data)?)
}

/// The per-example randomness of one training step: timesteps, noise, and
/// the corrupted batch they induce. Shared by the task and distillation
/// losses so both see the same draw.
pub struct NoiseDraws {
    pub taus: Vec<usize>,
    pub eps: Tensor,
    pub x_tau: Tensor,
}

/// Samples τ ~ U[1, T] per example and ε ~ N(0, I), then corrupts `x0`.
pub fn draw_noise(x0: &Tensor, schedule: &NoiseSchedule, rng: &mut Rng) -> Result<NoiseDraws> {
    let shape = x0.shape();
    if shape.len() != 3 {
        return Err(DiffusionError::Shape(format!(
            "expected rank-3 batch, got {shape:?}"
        )));
    }
    let batch = shape[0];
    let taus: Vec<usize> = (0..batch)
        .map(|_| rng.random_range(1..=schedule.t()))
        .collect();
    let eps = Tensor::randn(&shape, rng);
    let per = shape[1] * shape[2];
    let (x0d, epsd) = (x0.data(), eps.data());
    let mut data = vec![0.0; x0d.len()];
    for (b, &tau) in taus.iter().enumerate() {
        let ab = schedule.alpha_bar(tau);
        let (sx, se) = (ab.sqrt(), (1.0 - ab).sqrt());
        for i in b * per..(b + 1) * per {
            data[i] = sx * x0d[i] + se * epsd[i];
        }
    }
    let x_tau = Tensor::new(&shape, data)?;
    drop((x0d, epsd));
    Ok(NoiseDraws { taus, eps, x_tau })
}

/// Noise-prediction error for explicit draws: `MSE(ε_φ(x_τ, τ), ε)`.
pub fn ddpm_loss_from_draws(
    model: &DiffusionModel,
    g: &Graph,
    draws: &NoiseDraws,
) -> Result<Tensor> {
    let eps_hat = noise_predictor_forward(&model.predictor, g, &draws.x_tau, &draws.taus)?;
    Ok(g.mse(&eps_hat, &draws.eps)?)
}

/// The simplified DDPM objective on a batch: draws fresh (τ, ε) and returns
/// the mean squared noise-prediction error as a graph tensor.
pub fn ddpm_loss(
    model: &DiffusionModel,
    g: &Graph,
    x0_batch: &Tensor,
    rng: &mut Rng,
) -> Result<Tensor> {
    let draws = draw_noise(x0_batch, &model.schedule, rng)?;
    ddpm_loss_from_draws(model, g, &draws)
}

/// Ancestral sampling from pure noise: `count` signals of the given shape.
/// The final step (τ=1) adds no noise and consumes no draw.
pub fn sample(
    model: &DiffusionModel,
    count: usize,
    shape: (usize, usize),
    rng: &mut Rng,
) -> Result<Tensor> {
    let (channels, length) = shape;
    let full = [count, channels, length];
    let mut x = Tensor::randn(&full, rng);
    let g = Graph::inference();
    let schedule = &model.schedule;
    for tau in (1..=schedule.t()).rev() {
        let eps_hat = noise_predictor_forward(&model.predictor, &g, &x, &vec![tau; count])?;
        let alpha = schedule.alpha(tau);
        let coef = (1.0 - alpha) / (1.0 - schedule.alpha_bar(tau)).sqrt();
        let inv_sqrt_alpha = 1.0 / alpha.sqrt();
        let mut data: Vec<f64> = x
            .data()
            .iter()
            .zip(eps_hat.data().iter())
            .map(|(xv, ev)| inv_sqrt_alpha * (xv - coef * ev))
            .collect();
        if tau > 1 {
            let sigma = schedule.sigma(tau);
            use rand_distr::Distribution;
            for v in &mut data {
                let z: f64 = rand_distr::StandardNormal.sample(rng);
                *v += sigma * z;
            }
        }
        x = Tensor::new(&full, data)?;
    }
    Ok(x)
}
