//! Sequential-task orchestration: trains the classifier (and, for replay
//! methods, the generator) over a class-incremental task stream and records
//! the accuracy matrix. Includes the sequential fine-tuning (SFT), experience
//! replay (ER), and self-replay generative replay (GR) baselines next to the
//! teacher-guided method (DSG).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, LabeledDataset, TaskStream};
use crate::diffusion::{
    self, make_schedule, DiffusionError, DiffusionModel, NoiseSchedule, Sigma2Choice,
};
use crate::dsg::{dsg_update_generator, DsgConfig, DsgError, GeneratorInit, TeacherSnapshot};
use crate::metrics::{self, AccuracyMatrix, ConfusionMatrix};
use crate::nn::{
    classifier_forward, ClassifierConfig, ClassifierModel, NnError, NoisePredictorModel, UnetConfig,
};
use crate::rng::{substream, Rng};
use crate::tensor::{Graph, Optimizer, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum ContinualError {
    #[error("invalid training protocol: {0}")]
    BadProtocol(String),
    #[error("invalid method config: {0}")]
    BadMethod(String),
    #[error("task {index} is empty")]
    EmptyTask { index: usize },
    #[error("task class sets overlap: {0}")]
    LabelOverlap(String),
    #[error("replay buffer misuse: {0}")]
    Buffer(String),
    #[error("cannot split: {0}")]
    BadSplit(String),
    #[error("classifier loss became non-finite at task {task}, epoch {epoch}, step {step}")]
    NonFiniteLoss {
        task: usize,
        epoch: usize,
        step: usize,
    },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Diffusion(#[from] DiffusionError),
    #[error(transparent)]
    Dsg(#[from] DsgError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metrics(#[from] crate::metrics::MetricsError),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest serialization: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, ContinualError>;

/// Shared classifier-training hyperparameters for every method.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainProtocol {
    pub learning_rate: f64,
    /// Minibatch size for current-task batches.
    pub batch_size: usize,
    /// Minibatch size for replay batches (ER/GR/DSG).
    pub replay_batch_size: usize,
    /// Early-stopping patience, in epochs without improvement.
    pub patience: usize,
    /// Upper bound on epochs per task (early stopping usually ends sooner).
    pub max_epochs: usize,
    /// Fraction of each task's training split held out for validation
    /// (default 0.1, i.e. a 9:1 split), stratified by class.
    pub val_fraction: f64,
    /// Classifier dropout rate; tuned per dataset.
    pub dropout_rate: f64,
}

impl Default for TrainProtocol {
    fn default() -> TrainProtocol {
        TrainProtocol {
            learning_rate: 1e-3,
            batch_size: 64,
            replay_batch_size: 32,
            patience: 20,
            max_epochs: 100,
            val_fraction: 0.1,
            dropout_rate: 0.1,
        }
    }
}

impl TrainProtocol {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ContinualError::BadProtocol(format!(
                "learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 || self.replay_batch_size == 0 {
            return Err(ContinualError::BadProtocol(
                "batch sizes must be >= 1".into(),
            ));
        }
        if self.patience == 0 {
            return Err(ContinualError::BadProtocol("patience must be >= 1".into()));
        }
        if self.max_epochs == 0 {
            return Err(ContinualError::BadProtocol(
                "max_epochs must be >= 1".into(),
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(ContinualError::BadProtocol(format!(
                "val_fraction must be in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(ContinualError::BadProtocol(format!(
                "dropout_rate must be in [0, 1), got {}",
                self.dropout_rate
            )));
        }
        Ok(())
    }
}

/// True once the best validation loss has not improved (strict decrease by at
/// least 1e-6) for `patience` consecutive epochs. An empty history never
/// stops.
pub fn early_stop_check(history: &[f64], patience: usize) -> bool {
    let mut best = f64::INFINITY;
    let mut streak = 0usize;
    for &v in history {
        if best - v >= 1e-6 {
            best = v;
            streak = 0;
        } else {
            streak += 1;
        }
    }
    streak >= patience
}

/// Class-balanced reservoir of raw past samples for the ER baseline.
///
/// Capacity is divided evenly across every class seen so far (quotas differ
/// by at most one, remainders going to the lowest class ids). When a new task
/// shrinks the quota, stored classes are subsampled without replacement.
pub struct ReplayBuffer {
    capacity: usize,
    channels: usize,
    length: usize,
    num_classes: usize,
    per_class: BTreeMap<usize, Vec<Vec<f64>>>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> ReplayBuffer {
        ReplayBuffer {
            capacity,
            channels: 0,
            length: 0,
            num_classes: 0,
            per_class: BTreeMap::new(),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.per_class.values().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.per_class.is_empty()
    }

    /// Stored sample count per class id.
    pub fn class_counts(&self) -> BTreeMap<usize, usize> {
        self.per_class.iter().map(|(&c, v)| (c, v.len())).collect()
    }

    /// Folds one task's training data into the buffer, re-balancing quotas
    /// across all classes seen so far. Which samples survive is decided by
    /// `rng`, so runs are reproducible under a fixed seed.
    pub fn insert_task(&mut self, task_train: &LabeledDataset, rng: &mut Rng) -> Result<()> {
        if self.capacity == 0 {
            return Err(ContinualError::Buffer("capacity is zero".into()));
        }
        if task_train.is_empty() {
            return Err(ContinualError::Buffer("inserting an empty task".into()));
        }
        if self.per_class.is_empty() {
            self.channels = task_train.channels();
            self.length = task_train.length();
        } else if self.channels != task_train.channels() || self.length != task_train.length() {
            return Err(ContinualError::Buffer(format!(
                "shape mismatch: buffer holds {}x{}, task is {}x{}",
                self.channels,
                self.length,
                task_train.channels(),
                task_train.length()
            )));
        }
        self.num_classes = self.num_classes.max(task_train.num_classes());

        let mut incoming: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for (i, &label) in task_train.labels().iter().enumerate() {
            incoming.entry(label).or_default().push(i);
        }
        for &c in incoming.keys() {
            if self.per_class.contains_key(&c) {
                return Err(ContinualError::Buffer(format!(
                    "class {c} was already inserted"
                )));
            }
        }

        let mut classes: Vec<usize> = self
            .per_class
            .keys()
            .chain(incoming.keys())
            .copied()
            .collect();
        classes.sort_unstable();
        let quotas = quotas(self.capacity, &classes);

        for (&c, stored) in self.per_class.iter_mut() {
            let quota = quotas[&c];
            if stored.len() > quota {
                stored.shuffle(rng);
                stored.truncate(quota);
            }
        }
        for (c, mut idx) in incoming {
            let quota = quotas[&c];
            idx.shuffle(rng);
            idx.truncate(quota);
            let samples = idx.iter().map(|&i| task_train.sample(i).to_vec()).collect();
            self.per_class.insert(c, samples);
        }
        Ok(())
    }

    /// Draws a batch uniformly over all stored samples, with replacement.
    pub fn draw(&self, size: usize, rng: &mut Rng) -> Result<(Tensor, Vec<usize>)> {
        if self.is_empty() {
            return Err(ContinualError::Buffer(
                "drawing from an empty buffer".into(),
            ));
        }
        if size == 0 {
            return Err(ContinualError::Buffer("drawing a zero-size batch".into()));
        }
        let flat: Vec<(usize, &Vec<f64>)> = self
            .per_class
            .iter()
            .flat_map(|(&c, v)| v.iter().map(move |s| (c, s)))
            .collect();
        let mut data = Vec::with_capacity(size * self.channels * self.length);
        let mut labels = Vec::with_capacity(size);
        for _ in 0..size {
            let (c, s) = flat[rng.random_range(0..flat.len())];
            data.extend_from_slice(s);
            labels.push(c);
        }
        let x = Tensor::new(&[size, self.channels, self.length], data)?;
        Ok((x, labels))
    }
}

/// Even split of `capacity` across `classes`: every class gets
/// `capacity / k`, and the `capacity % k` lowest ids get one extra.
fn quotas(capacity: usize, classes: &[usize]) -> BTreeMap<usize, usize> {
    let k = classes.len();
    let base = capacity / k;
    let extra = capacity % k;
    classes
        .iter()
        .enumerate()
        .map(|(i, &c)| (c, base + usize::from(i < extra)))
        .collect()
}

// ── methods ─────────────────────────────────────────────────────────────

/// Architecture, noise schedule, and training knobs for the replay
/// generator shared by the GR baseline and DSG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSettings {
    /// U-Net width after the input projection; doubles per stage.
    pub base: usize,
    /// Downsampling / upsampling stages.
    pub depth: usize,
    /// Sinusoidal timestep-embedding width.
    pub time_dim: usize,
    /// Diffusion steps T.
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma2: Sigma2Choice,
    /// Upper bound on epochs per generator update.
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    /// Samples drawn from the generator for each task's replay pool;
    /// `None` matches the current task's training-set size.
    pub replay_pool_size: Option<usize>,
}

impl Default for GeneratorSettings {
    fn default() -> GeneratorSettings {
        GeneratorSettings {
            base: 16,
            depth: 2,
            time_dim: 64,
            timesteps: 200,
            beta_start: 1e-4,
            beta_end: 0.02,
            sigma2: Sigma2Choice::Beta,
            epochs: 60,
            learning_rate: 1e-3,
            batch_size: 64,
            replay_pool_size: None,
        }
    }
}

impl GeneratorSettings {
    pub fn validate(&self) -> Result<()> {
        if self.base == 0 || self.time_dim == 0 {
            return Err(ContinualError::BadMethod(
                "generator base/time_dim must be >= 1".into(),
            ));
        }
        if self.depth == 0 || self.depth > 6 {
            return Err(ContinualError::BadMethod(format!(
                "generator depth {} outside [1, 6]",
                self.depth
            )));
        }
        if self.timesteps == 0 {
            return Err(ContinualError::BadMethod("timesteps must be >= 1".into()));
        }
        if !(0.0 < self.beta_start && self.beta_start <= self.beta_end && self.beta_end < 1.0) {
            return Err(ContinualError::BadMethod(format!(
                "need 0 < beta_start <= beta_end < 1, got {}..{}",
                self.beta_start, self.beta_end
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(ContinualError::BadMethod(
                "generator epochs/batch_size must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ContinualError::BadMethod(format!(
                "generator learning_rate must be finite and > 0, got {}",
                self.learning_rate
            )));
        }
        if self.replay_pool_size == Some(0) {
            return Err(ContinualError::BadMethod(
                "replay_pool_size must be >= 1".into(),
            ));
        }
        Ok(())
    }

    fn unet_config(&self, channels: usize) -> UnetConfig {
        UnetConfig {
            channels,
            base: self.base,
            depth: self.depth,
            time_dim: self.time_dim,
            max_timestep: self.timesteps,
        }
    }

    fn schedule(&self) -> Result<NoiseSchedule> {
        Ok(make_schedule(
            self.timesteps,
            self.beta_start,
            self.beta_end,
            self.sigma2,
        )?)
    }
}

fn default_lambda() -> f64 {
    1.0
}

/// The continual-learning method to run over the task stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ClMethod {
    /// Sequential fine-tuning: no replay at all (the forgetting baseline).
    Sft,
    /// Experience replay from a capacity-bound buffer of raw past samples.
    Er { capacity: usize },
    /// Generative replay with plain self-replay generator updates.
    Gr {
        #[serde(default)]
        generator: GeneratorSettings,
    },
    /// Generative replay with distillation-guided generator updates.
    Dsg {
        #[serde(default)]
        generator: GeneratorSettings,
        #[serde(default = "default_lambda")]
        lambda: f64,
        #[serde(default)]
        init: GeneratorInit,
    },
}

impl ClMethod {
    /// Short method id used in file names and reports.
    pub fn kind(&self) -> &'static str {
        match self {
            ClMethod::Sft => "sft",
            ClMethod::Er { .. } => "er",
            ClMethod::Gr { .. } => "gr",
            ClMethod::Dsg { .. } => "dsg",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ClMethod::Sft => Ok(()),
            ClMethod::Er { capacity } => {
                if *capacity == 0 {
                    return Err(ContinualError::BadMethod("er capacity must be >= 1".into()));
                }
                Ok(())
            }
            ClMethod::Gr { generator } => generator.validate(),
            ClMethod::Dsg {
                generator, lambda, ..
            } => {
                generator.validate()?;
                if !(lambda.is_finite() && *lambda >= 0.0) {
                    return Err(ContinualError::BadMethod(format!(
                        "lambda must be finite and >= 0, got {lambda}"
                    )));
                }
                Ok(())
            }
        }
    }
}

// ── task-level helpers ──────────────────────────────────────────────────

/// Splits a dataset into train/validation parts, stratified by class: for
/// each class, a `val_fraction` share (rounded, but always leaving at least
/// one sample in train) is drawn at random into validation. Both halves keep
/// the dataset's sample order.
pub fn stratified_split(
    data: &LabeledDataset,
    val_fraction: f64,
    rng: &mut Rng,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if data.is_empty() {
        return Err(ContinualError::BadSplit("dataset is empty".into()));
    }
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(ContinualError::BadSplit(format!(
            "val_fraction must be in [0, 1), got {val_fraction}"
        )));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &label) in data.labels().iter().enumerate() {
        by_class.entry(label).or_default().push(i);
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (_, mut idx) in by_class {
        idx.shuffle(rng);
        let want = (idx.len() as f64 * val_fraction).round() as usize;
        let n_val = want.min(idx.len() - 1);
        val_idx.extend(idx.drain(..n_val));
        train_idx.extend(idx);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((data.subset(&train_idx), data.subset(&val_idx)))
}

/// Labels generated samples with a classifier's predictions (highest logit,
/// ties to the lowest class index). Used to tag replay pools with the
/// previous model's view of them.
pub fn label_replay(model: &ClassifierModel, samples: &Tensor) -> Result<Vec<usize>> {
    let shape = samples.shape().to_vec();
    if shape.len() != 3 {
        return Err(ContinualError::Nn(NnError::BadRank(format!("{shape:?}"))));
    }
    let (count, channels, length) = (shape[0], shape[1], shape[2]);
    let row = channels * length;
    let k = model.num_classes();
    let mut labels = Vec::with_capacity(count);
    let mut rng = substream(0, "continual/label_replay"); // eval mode draws nothing
    let data = samples.data();
    let mut start = 0;
    while start < count {
        let stop = (start + 256).min(count);
        let x = Tensor::new(
            &[stop - start, channels, length],
            data[start * row..stop * row].to_vec(),
        )?;
        let g = Graph::inference();
        let logits = classifier_forward(model, &g, &x, false, &mut rng)?;
        let ld = logits.data();
        for i in 0..stop - start {
            labels.push(metrics::argmax_lowest(&ld[i * k..(i + 1) * k]));
        }
        start = stop;
    }
    Ok(labels)
}

/// One Adam step on the sum-form objective `CE(new) [+ CE(replay)]`, both
/// terms computed in train mode on one graph. Returns the new-task loss and,
/// when a replay batch was given, the replay loss.
pub fn classifier_update_step(
    model: &ClassifierModel,
    opt: &mut Optimizer,
    new_x: &Tensor,
    new_y: &[usize],
    replay: Option<(&Tensor, &[usize])>,
    rng: &mut Rng,
) -> Result<(f64, Option<f64>)> {
    let g = Graph::new();
    let logits = classifier_forward(model, &g, new_x, true, rng)?;
    let new_loss = g.softmax_cross_entropy(&logits, new_y)?;
    let (total, replay_value) = match replay {
        Some((rx, ry)) => {
            let r_logits = classifier_forward(model, &g, rx, true, rng)?;
            let r_loss = g.softmax_cross_entropy(&r_logits, ry)?;
            (g.add(&new_loss, &r_loss)?, Some(r_loss.scalar_value()))
        }
        None => (new_loss.clone(), None),
    };
    g.backward(&total)?;
    opt.step()?;
    opt.zero_grad();
    Ok((new_loss.scalar_value(), replay_value))
}

/// Where classifier replay batches come from during one task.
enum ReplaySource<'a> {
    Buffer(&'a ReplayBuffer),
    Pool(&'a LabeledDataset),
}

fn draw_replay(
    source: &ReplaySource<'_>,
    size: usize,
    rng: &mut Rng,
) -> Result<(Tensor, Vec<usize>)> {
    match source {
        ReplaySource::Buffer(b) => b.draw(size, rng),
        ReplaySource::Pool(p) => {
            let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..p.len())).collect();
            Ok(p.batch(&idx))
        }
    }
}

/// Eval-mode mean cross-entropy of one batch.
fn eval_cross_entropy(model: &ClassifierModel, x: &Tensor, y: &[usize]) -> Result<f64> {
    let g = Graph::inference();
    let mut rng = substream(0, "continual/val_loss"); // eval mode draws nothing
    let logits = classifier_forward(model, &g, x, false, &mut rng)?;
    Ok(g.softmax_cross_entropy(&logits, y)?.scalar_value())
}

/// Eval-mode mean cross-entropy over a whole dataset, chunked to bound graph
/// size and weighted so the result equals the unchunked mean.
fn dataset_cross_entropy(model: &ClassifierModel, ds: &LabeledDataset) -> Result<f64> {
    let indices: Vec<usize> = (0..ds.len()).collect();
    let mut weighted = 0.0;
    for chunk in indices.chunks(256) {
        let (x, y) = ds.batch(chunk);
        weighted += eval_cross_entropy(model, &x, &y)? * chunk.len() as f64;
    }
    Ok(weighted / ds.len() as f64)
}

// ── the stream loop ─────────────────────────────────────────────────────

/// What `run_stream` writes to `run.json`: everything needed to reproduce
/// the run bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub seed: u64,
    pub method: ClMethod,
    pub protocol: TrainProtocol,
    pub classifier_channels: Vec<usize>,
}

/// In-memory results of one run over a task stream.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    /// Lower-triangular accuracy matrix, one row per task.
    pub matrix: AccuracyMatrix,
    /// One confusion matrix per task row, pooled over all test sets seen so
    /// far (always over the full class space).
    pub confusions: Vec<ConfusionMatrix>,
}

/// Trains a classifier over the task stream with the given method and
/// evaluates it on every seen task after each one.
///
/// Replay material for task `n` is produced before any task-`n` training
/// touches the models, so it reflects the classifier and generator exactly
/// as they stood at the end of task `n-1`. The classifier then trains on
/// interleaved new/replay minibatches, the generator (GR/DSG) is updated on
/// the new task, and for ER the raw training data is folded into the buffer.
///
/// When `out_dir` is given, per-task checkpoints and a `run.json` manifest
/// are written there. All randomness is derived from `seed` via named
/// substreams, so identical inputs give identical outputs.
pub fn run_stream(
    method: &ClMethod,
    stream: &TaskStream,
    protocol: &TrainProtocol,
    classifier_channels: &[usize],
    seed: u64,
    out_dir: Option<&Path>,
) -> Result<RunOutcome> {
    protocol.validate()?;
    method.validate()?;
    if classifier_channels.is_empty() || classifier_channels.contains(&0) {
        return Err(ContinualError::BadProtocol(format!(
            "bad classifier channel plan {classifier_channels:?}"
        )));
    }
    let n_tasks = stream.num_tasks();
    if n_tasks == 0 {
        return Err(ContinualError::EmptyTask { index: 1 });
    }
    let mut seen = BTreeSet::new();
    for (i, task) in stream.tasks().iter().enumerate() {
        if task.train.is_empty() || task.test.is_empty() {
            return Err(ContinualError::EmptyTask { index: i + 1 });
        }
        for &c in &task.classes {
            if !seen.insert(c) {
                return Err(ContinualError::LabelOverlap(format!(
                    "class {c} is introduced by two tasks"
                )));
            }
        }
    }

    let channels = stream.task(0).train.channels();
    let length = stream.task(0).train.length();
    let k_total = stream.total_classes();

    let mut cls_cfg = ClassifierConfig::new(channels, k_total);
    cls_cfg.channels = classifier_channels.to_vec();
    cls_cfg.dropout_rate = protocol.dropout_rate;
    let classifier =
        ClassifierModel::new(cls_cfg, &mut substream(seed, "continual/classifier_init"))?;

    let gen_settings: Option<&GeneratorSettings> = match method {
        ClMethod::Gr { generator } => Some(generator),
        ClMethod::Dsg { generator, .. } => Some(generator),
        _ => None,
    };
    let mut generator: Option<DiffusionModel> = match gen_settings {
        Some(gs) => Some(DiffusionModel {
            predictor: NoisePredictorModel::new(
                gs.unet_config(channels),
                &mut substream(seed, "continual/generator_init"),
            )?,
            schedule: gs.schedule()?,
        }),
        None => None,
    };
    let mut buffer = match method {
        ClMethod::Er { capacity } => Some(ReplayBuffer::new(*capacity)),
        _ => None,
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let manifest = RunManifest {
            seed,
            method: method.clone(),
            protocol: protocol.clone(),
            classifier_channels: classifier_channels.to_vec(),
        };
        let text = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(dir.join("run.json"), text + "\n")?;
    }

    let mut matrix = AccuracyMatrix::new();
    let mut confusions = Vec::with_capacity(n_tasks);

    for i in 0..n_tasks {
        let n = i + 1;
        let task = stream.task(i);

        // Replay material reflects the end-of-task-(n-1) models, so make it
        // before any task-n training.
        let pool: Option<LabeledDataset> = match (&generator, n >= 2) {
            (Some(generator), true) => {
                let gs = gen_settings.expect("generator implies settings");
                let pool_size = gs.replay_pool_size.unwrap_or(task.train.len());
                let mut rng_replay = substream(seed, &format!("continual/replay/{n}"));
                let samples =
                    diffusion::sample(generator, pool_size, (channels, length), &mut rng_replay)?;
                let labels = label_replay(&classifier, &samples)?;
                let row = channels * length;
                let rows: Vec<Vec<f64>> = {
                    let data = samples.data();
                    (0..pool_size)
                        .map(|r| data[r * row..(r + 1) * row].to_vec())
                        .collect()
                };
                Some(LabeledDataset::new(
                    rows, labels, channels, length, k_total,
                )?)
            }
            _ => None,
        };

        let mut rng_split = substream(seed, &format!("continual/split/{n}"));
        let (tr, val) = stratified_split(&task.train, protocol.val_fraction, &mut rng_split)?;

        let mut rng_cls = substream(seed, &format!("continual/classifier/{n}"));
        let source: Option<ReplaySource<'_>> = if n >= 2 {
            match (&buffer, &pool) {
                (Some(b), _) if !b.is_empty() => Some(ReplaySource::Buffer(b)),
                (_, Some(p)) if !p.is_empty() => Some(ReplaySource::Pool(p)),
                _ => None,
            }
        } else {
            None
        };
        // A fixed replay batch joins the validation loss so early stopping
        // sees the same objective the steps optimize.
        let replay_val = match &source {
            Some(s) => Some(draw_replay(s, protocol.replay_batch_size, &mut rng_cls)?),
            None => None,
        };

        let mut opt = Optimizer::adam(classifier.trainable(), protocol.learning_rate);
        let mut history: Vec<f64> = Vec::new();
        for epoch in 0..protocol.max_epochs {
            let mut order: Vec<usize> = (0..tr.len()).collect();
            order.shuffle(&mut rng_cls);
            for (step, chunk) in order.chunks(protocol.batch_size).enumerate() {
                let (x, y) = tr.batch(chunk);
                let replay_batch = match &source {
                    Some(s) => Some(draw_replay(s, protocol.replay_batch_size, &mut rng_cls)?),
                    None => None,
                };
                let (task_value, replay_value) = classifier_update_step(
                    &classifier,
                    &mut opt,
                    &x,
                    &y,
                    replay_batch.as_ref().map(|(t, l)| (t, l.as_slice())),
                    &mut rng_cls,
                )?;
                if !(task_value + replay_value.unwrap_or(0.0)).is_finite() {
                    return Err(ContinualError::NonFiniteLoss {
                        task: n,
                        epoch,
                        step,
                    });
                }
            }
            if val.is_empty() {
                continue;
            }
            let mut v = dataset_cross_entropy(&classifier, &val)?;
            if let Some((rx, ry)) = &replay_val {
                v += eval_cross_entropy(&classifier, rx, ry)?;
            }
            if !v.is_finite() {
                return Err(ContinualError::NonFiniteLoss {
                    task: n,
                    epoch,
                    step: usize::MAX,
                });
            }
            history.push(v);
            if early_stop_check(&history, protocol.patience) {
                break;
            }
        }

        if let Some(generator_model) = generator.as_mut() {
            let gs = gen_settings.expect("generator implies settings");
            let mut rng_gen = substream(seed, &format!("continual/generator/{n}"));
            match method {
                ClMethod::Dsg { lambda, init, .. } => {
                    let teacher = (n >= 2).then(|| TeacherSnapshot::capture(generator_model));
                    if n >= 2 && *init == GeneratorInit::Cold {
                        generator_model.predictor = NoisePredictorModel::new(
                            gs.unet_config(channels),
                            &mut substream(seed, &format!("continual/generator_init/{n}")),
                        )?;
                    }
                    let cfg = DsgConfig {
                        lambda: *lambda,
                        epochs: gs.epochs,
                        learning_rate: gs.learning_rate,
                        batch_size: gs.batch_size,
                        init: *init,
                    };
                    dsg_update_generator(
                        generator_model,
                        teacher.as_ref(),
                        &tr,
                        &val,
                        &cfg,
                        protocol.patience,
                        &mut rng_gen,
                    )?;
                }
                ClMethod::Gr { .. } => {
                    let mut merged = tr.clone();
                    if let Some(p) = &pool {
                        merged.extend(p)?;
                    }
                    let cfg = DsgConfig {
                        lambda: 0.0,
                        epochs: gs.epochs,
                        learning_rate: gs.learning_rate,
                        batch_size: gs.batch_size,
                        init: GeneratorInit::Warm,
                    };
                    dsg_update_generator(
                        generator_model,
                        None,
                        &merged,
                        &val,
                        &cfg,
                        protocol.patience,
                        &mut rng_gen,
                    )?;
                }
                _ => unreachable!("generator exists only for GR/DSG"),
            }
        }

        if let Some(b) = buffer.as_mut() {
            b.insert_task(
                &task.train,
                &mut substream(seed, &format!("continual/buffer/{n}")),
            )?;
        }

        let mut row = Vec::with_capacity(n);
        let mut pooled = ConfusionMatrix::new(k_total);
        for j in 0..n {
            let (acc, cm) = metrics::evaluate(&classifier, &stream.task(j).test)?;
            row.push(acc);
            pooled.merge(&cm)?;
        }
        matrix.push_row(row)?;
        confusions.push(pooled);

        if let Some(dir) = out_dir {
            classifier.save(&dir.join(format!("task{n}.classifier.rftn")))?;
            if let Some(m) = &generator {
                m.save(&dir.join(format!("task{n}.generator.rftn")))?;
            }
        }
    }

    Ok(RunOutcome { matrix, confusions })
}
