//! Teacher-guided generator updates.
//!
//! When the generator moves on to a new task, plain fine-tuning overwrites
//! what it learned before. This module trains the new ("student") generator
//! with a combined objective: the usual denoising loss on current-task data,
//! plus a distillation term that penalises any drift of the student's noise
//! predictions away from a frozen snapshot of the previous generator (the
//! "teacher") evaluated on the *same* corrupted inputs. The old generator is
//! never sampled to build distillation inputs — both networks always see
//! noisy versions of current-task signals.
//!
//! The combined objective is `task + lambda * distill`, with `lambda = 0`
//! reducing bit-for-bit to plain fine-tuning.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::continual::early_stop_check;
use crate::data::LabeledDataset;
use crate::diffusion::{
    ddpm_loss_from_draws, draw_noise, DiffusionError, DiffusionModel, NoiseDraws,
};
use crate::nn::{noise_predictor_forward, NnError, NoisePredictorModel};
use crate::rng::Rng;
use crate::tensor::{Graph, Optimizer, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum DsgError {
    #[error("invalid generator-update config: {0}")]
    BadConfig(String),
    #[error("teacher/student architecture mismatch: {0}")]
    ArchitectureMismatch(String),
    #[error("training diverged: non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DsgError>;

/// How the student generator for a new task is initialised.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GeneratorInit {
    #[default]
    /// Start from the teacher's weights (default). The distillation term
    /// starts at zero and only activates as the student drifts.
    Warm,
    /// Start from a fresh random initialisation.
    Cold,
}

/// Hyperparameters for one generator update (one task's worth of training).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DsgConfig {
    /// Weight of the distillation term; `0` disables it entirely.
    pub lambda: f64,
    /// Maximum number of epochs (early stopping may end training sooner).
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Student initialisation for tasks after the first.
    pub init: GeneratorInit,
}

impl Default for DsgConfig {
    fn default() -> DsgConfig {
        DsgConfig {
            lambda: 1.0,
            epochs: 60,
            learning_rate: 1e-3,
            batch_size: 64,
            init: GeneratorInit::Warm,
        }
    }
}

impl DsgConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(DsgError::BadConfig(format!(
                "lambda must be finite and >= 0, got {}",
                self.lambda
            )));
        }
        if self.epochs == 0 {
            return Err(DsgError::BadConfig("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(DsgError::BadConfig(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(DsgError::BadConfig("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// A frozen copy of the previous task's noise predictor. It only ever runs
/// forward passes on non-recording graphs, so its parameters can neither
/// change nor receive gradients.
pub struct TeacherSnapshot {
    predictor: NoisePredictorModel,
}

impl TeacherSnapshot {
    /// Deep-copies the generator's predictor; later updates to the live
    /// generator do not affect the snapshot.
    pub fn capture(generator: &DiffusionModel) -> TeacherSnapshot {
        TeacherSnapshot {
            predictor: generator.predictor.deep_clone(),
        }
    }

    pub fn predictor(&self) -> &NoisePredictorModel {
        &self.predictor
    }

    /// Errors unless the student has the same architecture as the teacher.
    pub fn check_compatible(&self, student: &DiffusionModel) -> Result<()> {
        let (t, s) = (self.predictor.config(), student.predictor.config());
        if t != s {
            return Err(DsgError::ArchitectureMismatch(format!(
                "teacher {t:?} vs student {s:?}"
            )));
        }
        Ok(())
    }

    /// Teacher forward pass as plain data: runs on a non-recording graph so
    /// the result enters any downstream loss as a constant.
    pub fn predict(&self, x_tau: &Tensor, taus: &[usize]) -> Result<Tensor> {
        let g = Graph::inference();
        Ok(noise_predictor_forward(&self.predictor, &g, x_tau, taus)?)
    }
}

/// Denoising loss on current-task draws: `MSE(ε_student(x_τ, τ), ε)`.
/// Identical to the plain DDPM objective restricted to the given draws.
pub fn task_loss(student: &DiffusionModel, g: &Graph, draws: &NoiseDraws) -> Result<Tensor> {
    Ok(ddpm_loss_from_draws(student, g, draws)?)
}

/// Distillation loss: `MSE(ε_student(x_τ, τ), ε_teacher(x_τ, τ))` on the
/// same corrupted inputs. Gradients flow only into the student.
pub fn distill_loss(
    student: &DiffusionModel,
    teacher: &TeacherSnapshot,
    g: &Graph,
    draws: &NoiseDraws,
) -> Result<Tensor> {
    teacher.check_compatible(student)?;
    let target = teacher.predict(&draws.x_tau, &draws.taus)?;
    let pred = noise_predictor_forward(&student.predictor, g, &draws.x_tau, &draws.taus)?;
    Ok(g.mse(&pred, &target)?)
}

/// Scalar values of one step's loss terms, for logging and guards.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub task: f64,
    /// Zero when the distillation term is inactive (no teacher or `lambda == 0`).
    pub distill: f64,
    pub total: f64,
}

/// Builds `task + lambda * distill` with a single student forward pass shared
/// by both terms. When `teacher` is `None` or `lambda == 0` the distillation
/// term is skipped outright, making the step identical to plain fine-tuning.
pub fn combined_loss(
    student: &DiffusionModel,
    teacher: Option<&TeacherSnapshot>,
    lambda: f64,
    g: &Graph,
    draws: &NoiseDraws,
) -> Result<(Tensor, LossParts)> {
    let pred = noise_predictor_forward(&student.predictor, g, &draws.x_tau, &draws.taus)?;
    let task = g.mse(&pred, &draws.eps)?;
    let task_v = task.scalar_value();
    match teacher {
        Some(t) if lambda != 0.0 => {
            t.check_compatible(student)?;
            let target = t.predict(&draws.x_tau, &draws.taus)?;
            let distill = g.mse(&pred, &target)?;
            let distill_v = distill.scalar_value();
            let total = g.add(&task, &g.scalar_mul(&distill, lambda)?)?;
            let total_v = total.scalar_value();
            Ok((
                total,
                LossParts {
                    task: task_v,
                    distill: distill_v,
                    total: total_v,
                },
            ))
        }
        _ => Ok((
            task,
            LossParts {
                task: task_v,
                distill: 0.0,
                total: task_v,
            },
        )),
    }
}

/// Outcome of one generator update.
#[derive(Debug, Clone)]
pub struct GeneratorReport {
    /// Epochs actually run (≤ `config.epochs` when early stopping fires).
    pub epochs_run: usize,
    /// Validation loss per epoch, on draws fixed at the start of the update.
    pub val_history: Vec<f64>,
    /// Best validation loss; `None` when `val` was empty.
    pub best_val: Option<f64>,
    pub early_stopped: bool,
}

/// Trains the student generator on `train` by minibatch Adam on the combined
/// objective. Within each step the task and distillation terms share the same
/// (τ, ε, x_τ) draws and the same student forward pass.
///
/// Validation uses one fixed set of draws made before the first epoch, so the
/// per-epoch losses are directly comparable; early stopping fires once the
/// best value has not improved for `patience` consecutive epochs, and the
/// best-epoch weights are restored afterwards. An empty `val` set disables
/// early stopping and the full `config.epochs` run. Training aborts with an
/// error as soon as a step or validation loss turns non-finite.
pub fn dsg_update_generator(
    student: &mut DiffusionModel,
    teacher: Option<&TeacherSnapshot>,
    train: &LabeledDataset,
    val: &LabeledDataset,
    config: &DsgConfig,
    patience: usize,
    rng: &mut Rng,
) -> Result<GeneratorReport> {
    config.validate()?;
    if patience == 0 {
        return Err(DsgError::BadConfig("patience must be >= 1".into()));
    }
    if train.is_empty() {
        return Err(DsgError::BadConfig("training set is empty".into()));
    }
    if let Some(t) = teacher {
        t.check_compatible(student)?;
    }

    let val_draws = if val.is_empty() {
        None
    } else {
        let all: Vec<usize> = (0..val.len()).collect();
        let (x, _) = val.batch(&all);
        Some(draw_noise(&x, &student.schedule, rng)?)
    };

    let mut opt = Optimizer::adam(student.predictor.trainable(), config.learning_rate);
    let mut history: Vec<f64> = Vec::new();
    let mut best = f64::INFINITY;
    let mut best_weights: Option<NoisePredictorModel> = None;
    let mut early_stopped = false;
    let mut epochs_run = 0;

    for epoch in 0..config.epochs {
        epochs_run = epoch + 1;
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(rng);
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let (x, _) = train.batch(chunk);
            let draws = draw_noise(&x, &student.schedule, rng)?;
            let g = Graph::new();
            let (loss, parts) = combined_loss(student, teacher, config.lambda, &g, &draws)?;
            if !parts.total.is_finite() {
                return Err(DsgError::NonFiniteLoss { epoch, step });
            }
            g.backward(&loss)?;
            opt.step()?;
            opt.zero_grad();
        }

        if let Some(draws) = &val_draws {
            let g = Graph::inference();
            let (_, parts) = combined_loss(student, teacher, config.lambda, &g, draws)?;
            if !parts.total.is_finite() {
                return Err(DsgError::NonFiniteLoss {
                    epoch,
                    step: usize::MAX,
                });
            }
            history.push(parts.total);
            if best - parts.total >= 1e-6 || best_weights.is_none() {
                best = parts.total;
                best_weights = Some(student.predictor.deep_clone());
            }
            if early_stop_check(&history, patience) {
                early_stopped = true;
                break;
            }
        }
    }

    if let Some(bw) = &best_weights {
        student.predictor.copy_weights_from(bw)?;
    }
    Ok(GeneratorReport {
        epochs_run,
        val_history: history,
        best_val: (best.is_finite()).then_some(best),
        early_stopped,
    })
}
