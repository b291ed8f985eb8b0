//! Datasets: file ingestion, class-incremental splitting, normalization, and
//! a synthetic multichannel stream generator for desk-scale experiments.
//!
//! On-disk payloads are single precision; all in-memory math is `f64`.
//! Synthetic and CSV data are quantized to `f32` on creation so that a
//! dataset survives a save/load round trip bit-identically.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::substream;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"RFDS";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset: bad magic (expected \"RFDS\")")]
    Magic,
    #[error("dataset: unsupported version {0}")]
    Version(u32),
    #[error("dataset: truncated or malformed file: {0}")]
    Truncated(String),
    #[error("dataset: sample {index} has label {label}, valid range is [0, {num_classes})")]
    LabelRange {
        index: usize,
        label: usize,
        num_classes: usize,
    },
    #[error("dataset: file has no labels; use load_samples for unlabeled dumps")]
    Unlabeled,
    #[error("csv line {line}: {detail}")]
    Csv { line: usize, detail: String },
    #[error("dataset: inconsistent construction: {0}")]
    Inconsistent(String),
    #[error("split: class_order is not a permutation of [0, {num_classes}): {detail}")]
    NonPermutation { num_classes: usize, detail: String },
    #[error("split: {num_classes} classes not divisible by {classes_per_task} per task")]
    Indivisible {
        num_classes: usize,
        classes_per_task: usize,
    },
    #[error("split: train_ratio {0} outside (0, 1)")]
    BadRatio(f64),
    #[error("synthetic spec: {0}")]
    BadSpec(String),
    #[error("dataset: io: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Aligned multichannel signals and integer class labels. Every sample is a
/// row-major `(channels, length)` signal flattened to `channels * length`
/// values.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    samples: Vec<Vec<f64>>,
    labels: Vec<usize>,
    channels: usize,
    length: usize,
    num_classes: usize,
}

impl LabeledDataset {
    pub fn new(
        samples: Vec<Vec<f64>>,
        labels: Vec<usize>,
        channels: usize,
        length: usize,
        num_classes: usize,
    ) -> Result<LabeledDataset> {
        if samples.len() != labels.len() {
            return Err(DataError::Inconsistent(format!(
                "{} samples vs {} labels",
                samples.len(),
                labels.len()
            )));
        }
        let expect = channels * length;
        if let Some((i, s)) = samples.iter().enumerate().find(|(_, s)| s.len() != expect) {
            return Err(DataError::Inconsistent(format!(
                "sample {i} has {} values, expected {channels}x{length}",
                s.len()
            )));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(DataError::LabelRange {
                index,
                label,
                num_classes,
            });
        }
        Ok(LabeledDataset {
            samples,
            labels,
            channels,
            length,
            num_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn length(&self) -> usize {
        self.length
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        &self.samples[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Distinct labels present, ascending.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes];
        for &l in &self.labels {
            seen[l] = true;
        }
        (0..self.num_classes).filter(|&c| seen[c]).collect()
    }

    /// Stacks the given rows into a `(batch, channels, length)` tensor plus
    /// their labels.
    pub fn batch(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        let mut data = Vec::with_capacity(indices.len() * self.channels * self.length);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.samples[i]);
            labels.push(self.labels[i]);
        }
        let t = Tensor::new(&[indices.len(), self.channels, self.length], data)
            .expect("batch: internal shape mismatch");
        (t, labels)
    }

    /// A new dataset holding copies of the given rows, in the given order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            channels: self.channels,
            length: self.length,
            num_classes: self.num_classes,
        }
    }

    /// Appends another dataset with identical extents and class space.
    pub fn extend(&mut self, other: &LabeledDataset) -> Result<()> {
        if other.channels != self.channels
            || other.length != self.length
            || other.num_classes != self.num_classes
        {
            return Err(DataError::Inconsistent(format!(
                "extend: ({}, {}, {} classes) vs ({}, {}, {} classes)",
                self.channels,
                self.length,
                self.num_classes,
                other.channels,
                other.length,
                other.num_classes
            )));
        }
        self.samples.extend(other.samples.iter().cloned());
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    /// Z-scores every channel in place with the given statistics.
    pub fn normalize(&mut self, stats: &ChannelStats) {
        assert_eq!(
            stats.mean.len(),
            self.channels,
            "normalize: channel count mismatch"
        );
        for s in &mut self.samples {
            for c in 0..self.channels {
                let (m, sd) = (stats.mean[c], stats.std[c]);
                for v in &mut s[c * self.length..(c + 1) * self.length] {
                    *v = (*v - m) / sd;
                }
            }
        }
    }
}

/// Per-channel mean and standard deviation, computed across every time step
/// of every sample.
#[derive(Debug, Clone)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl ChannelStats {
    /// Population statistics over the union of the given datasets.
    pub fn from_datasets(datasets: &[&LabeledDataset]) -> ChannelStats {
        let channels = datasets.first().map_or(0, |d| d.channels);
        let mut sum = vec![0.0; channels];
        let mut count = vec![0usize; channels];
        for d in datasets {
            for s in &d.samples {
                for c in 0..channels {
                    sum[c] += s[c * d.length..(c + 1) * d.length].iter().sum::<f64>();
                    count[c] += d.length;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().zip(&count).map(|(s, &n)| s / n as f64).collect();
        let mut sq = vec![0.0; channels];
        for d in datasets {
            for s in &d.samples {
                for c in 0..channels {
                    sq[c] += s[c * d.length..(c + 1) * d.length]
                        .iter()
                        .map(|v| (v - mean[c]) * (v - mean[c]))
                        .sum::<f64>();
                }
            }
        }
        let std = sq
            .iter()
            .zip(&count)
            .map(|(s, &n)| {
                let sd = (s / n as f64).sqrt();
                if sd < 1e-12 {
                    1.0 // constant channel: leave values centered but unscaled
                } else {
                    sd
                }
            })
            .collect();
        ChannelStats { mean, std }
    }
}

// ── file formats ────────────────────────────────────────────────────────

/// Writes the binary dataset format with labels present.
pub fn save_dataset(path: &Path, ds: &LabeledDataset) -> Result<()> {
    write_file(
        path,
        &ds.samples,
        ds.channels,
        ds.length,
        ds.num_classes,
        Some(&ds.labels),
    )
}

/// Writes an unlabeled sample dump (header flags labels as absent).
pub fn save_unlabeled(
    path: &Path,
    samples: &[Vec<f64>],
    channels: usize,
    length: usize,
) -> Result<()> {
    write_file(path, samples, channels, length, 0, None)
}

fn write_file(
    path: &Path,
    samples: &[Vec<f64>],
    channels: usize,
    length: usize,
    num_classes: usize,
    labels: Option<&[usize]>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(samples.len() as u32).to_le_bytes())?;
    w.write_all(&(channels as u32).to_le_bytes())?;
    w.write_all(&(length as u32).to_le_bytes())?;
    w.write_all(&(num_classes as u32).to_le_bytes())?;
    w.write_all(&[labels.is_some() as u8])?;
    for s in samples {
        for &v in s {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    if let Some(labels) = labels {
        for &l in labels {
            w.write_all(&(l as u16).to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

struct RawFile {
    samples: Vec<Vec<f64>>,
    labels: Option<Vec<usize>>,
    channels: usize,
    length: usize,
    num_classes: usize,
}

fn read_file(path: &Path) -> Result<RawFile> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(DataError::Magic);
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(DataError::Version(version));
    }
    let count = read_u32(&mut r, "sample count")? as usize;
    let channels = read_u32(&mut r, "channel count")? as usize;
    let length = read_u32(&mut r, "signal length")? as usize;
    let num_classes = read_u32(&mut r, "class count")? as usize;
    let mut flag = [0u8; 1];
    read_exact(&mut r, &mut flag, "label flag")?;
    let has_labels = match flag[0] {
        0 => false,
        1 => true,
        other => return Err(DataError::Truncated(format!("label flag byte {other}"))),
    };
    let per = channels * length;
    let mut samples = Vec::with_capacity(count);
    let mut buf = [0u8; 4];
    for _ in 0..count {
        let mut s = Vec::with_capacity(per);
        for _ in 0..per {
            read_exact(&mut r, &mut buf, "sample payload")?;
            s.push(f32::from_le_bytes(buf) as f64);
        }
        samples.push(s);
    }
    let labels = if has_labels {
        let mut ls = Vec::with_capacity(count);
        let mut b2 = [0u8; 2];
        for _ in 0..count {
            read_exact(&mut r, &mut b2, "labels")?;
            ls.push(u16::from_le_bytes(b2) as usize);
        }
        Some(ls)
    } else {
        None
    };
    let mut tail = [0u8; 1];
    if r.read(&mut tail)? != 0 {
        return Err(DataError::Truncated("trailing bytes after payload".into()));
    }
    Ok(RawFile {
        samples,
        labels,
        channels,
        length,
        num_classes,
    })
}

/// Loads a labeled dataset from the binary format or, for `.csv` paths, the
/// CSV convention (one row per sample: `channels * length` values then the
/// label; an optional `# channels=C length=L classes=K` first line fixes the
/// extents, otherwise a single channel is assumed).
pub fn load_dataset(path: &Path) -> Result<LabeledDataset> {
    if path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("csv"))
    {
        return load_csv(path);
    }
    let raw = read_file(path)?;
    let labels = raw.labels.ok_or(DataError::Unlabeled)?;
    LabeledDataset::new(
        raw.samples,
        labels,
        raw.channels,
        raw.length,
        raw.num_classes,
    )
}

/// Loads just the signals from a binary file, labeled or not.
pub fn load_samples(path: &Path) -> Result<(Vec<Vec<f64>>, usize, usize)> {
    let raw = read_file(path)?;
    Ok((raw.samples, raw.channels, raw.length))
}

fn load_csv(path: &Path) -> Result<LabeledDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut channels = 1usize;
    let mut declared: Option<(usize, usize)> = None; // (length, classes)
    let mut samples = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() {
            continue;
        }
        if trimmed.starts_with('#') {
            if lineno == 0 {
                let (c, rest) = parse_csv_header(trimmed, lineno)?;
                channels = c;
                declared = rest;
            }
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() < 2 {
            return Err(DataError::Csv {
                line: lineno + 1,
                detail: "need at least one value and a label".into(),
            });
        }
        let w = fields.len() - 1;
        match width {
            None => width = Some(w),
            Some(prev) if prev != w => {
                return Err(DataError::Csv {
                    line: lineno + 1,
                    detail: format!("row has {w} values, previous rows had {prev}"),
                });
            }
            _ => {}
        }
        let mut row = Vec::with_capacity(w);
        for f in &fields[..w] {
            let v: f64 = f.parse().map_err(|_| DataError::Csv {
                line: lineno + 1,
                detail: format!("bad float {f:?}"),
            })?;
            row.push(v as f32 as f64);
        }
        let label: usize = fields[w].parse().map_err(|_| DataError::Csv {
            line: lineno + 1,
            detail: format!("bad label {:?}", fields[w]),
        })?;
        samples.push(row);
        labels.push(label);
    }
    let width = width.ok_or(DataError::Truncated("csv has no data rows".into()))?;
    if width % channels != 0 {
        return Err(DataError::Csv {
            line: 1,
            detail: format!("row width {width} not divisible by {channels} channels"),
        });
    }
    let length = width / channels;
    if let Some((l, _)) = declared {
        if l != length {
            return Err(DataError::Csv {
                line: 1,
                detail: format!("header declares length {l}, rows imply {length}"),
            });
        }
    }
    let num_classes = match declared {
        Some((_, k)) => k,
        None => labels.iter().copied().max().unwrap_or(0) + 1,
    };
    LabeledDataset::new(samples, labels, channels, length, num_classes)
}

fn parse_csv_header(line: &str, lineno: usize) -> Result<(usize, Option<(usize, usize)>)> {
    let mut channels = 1usize;
    let mut length = None;
    let mut classes = None;
    for token in line.trim_start_matches('#').split_whitespace() {
        let Some((key, value)) = token.split_once('=') else {
            continue;
        };
        let v: usize = value.parse().map_err(|_| DataError::Csv {
            line: lineno + 1,
            detail: format!("bad header value {token:?}"),
        })?;
        match key {
            "channels" => channels = v,
            "length" => length = Some(v),
            "classes" => classes = Some(v),
            _ => {}
        }
    }
    Ok(match (length, classes) {
        (Some(l), Some(k)) => (channels, Some((l, k))),
        _ => (channels, None),
    })
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| DataError::Truncated(format!("unexpected end of file reading {what}")))
}

// ── class-incremental stream ────────────────────────────────────────────

/// One task of the stream: a train/test pair covering a disjoint group of
/// classes. Labels stay in the global class space.
#[derive(Debug, Clone)]
pub struct Task {
    pub train: LabeledDataset,
    pub test: LabeledDataset,
    pub classes: Vec<usize>,
}

/// An ordered sequence of tasks with pairwise disjoint class sets covering
/// `[0, total_classes)`.
#[derive(Debug, Clone)]
pub struct TaskStream {
    tasks: Vec<Task>,
    total_classes: usize,
}

impl TaskStream {
    /// Assembles a stream from explicit tasks. Shapes must agree across all
    /// train/test sets and labels must lie in `[0, total_classes)`; the
    /// class-set semantics (disjointness, coverage) are the caller's call.
    pub fn from_tasks(tasks: Vec<Task>, total_classes: usize) -> Result<TaskStream> {
        let first = tasks
            .first()
            .ok_or_else(|| DataError::Inconsistent("a stream needs at least one task".into()))?;
        let (channels, length) = (first.train.channels(), first.train.length());
        for (i, task) in tasks.iter().enumerate() {
            for ds in [&task.train, &task.test] {
                if ds.channels() != channels || ds.length() != length {
                    return Err(DataError::Inconsistent(format!(
                        "task {i} has shape {}x{}, expected {channels}x{length}",
                        ds.channels(),
                        ds.length()
                    )));
                }
                if let Some(&label) = ds.labels().iter().find(|&&l| l >= total_classes) {
                    return Err(DataError::LabelRange {
                        index: i,
                        label,
                        num_classes: total_classes,
                    });
                }
            }
        }
        Ok(TaskStream {
            tasks,
            total_classes,
        })
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn task(&self, n: usize) -> &Task {
        &self.tasks[n]
    }

    pub fn tasks(&self) -> &[Task] {
        &self.tasks
    }

    pub fn total_classes(&self) -> usize {
        self.total_classes
    }

    /// Classes introduced by tasks `0..=n`, ascending.
    pub fn classes_through(&self, n: usize) -> Vec<usize> {
        let mut cs: Vec<usize> = self.tasks[..=n]
            .iter()
            .flat_map(|t| t.classes.iter().copied())
            .collect();
        cs.sort_unstable();
        cs
    }
}

/// A class order drawn uniformly from the permutations of `[0, num_classes)`.
pub fn class_order_from_seed(seed: u64, num_classes: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_classes).collect();
    let mut rng = substream(seed, "data/class_order");
    order.shuffle(&mut rng);
    order
}

/// Partitions a dataset into a class-incremental task stream. Consecutive
/// groups of `classes_per_task` entries of `class_order` form the tasks; each
/// task is split per class into leading train and trailing test portions
/// (dataset order preserved), so the split is stratified and deterministic.
pub fn split_stream(
    dataset: &LabeledDataset,
    classes_per_task: usize,
    class_order: &[usize],
    train_ratio: f64,
) -> Result<TaskStream> {
    let k = dataset.num_classes();
    if !(train_ratio > 0.0 && train_ratio < 1.0) {
        return Err(DataError::BadRatio(train_ratio));
    }
    if classes_per_task == 0 || !k.is_multiple_of(classes_per_task) {
        return Err(DataError::Indivisible {
            num_classes: k,
            classes_per_task,
        });
    }
    if class_order.len() != k {
        return Err(DataError::NonPermutation {
            num_classes: k,
            detail: format!("order has {} entries", class_order.len()),
        });
    }
    let mut seen = vec![false; k];
    for &c in class_order {
        if c >= k || seen[c] {
            return Err(DataError::NonPermutation {
                num_classes: k,
                detail: format!("class {c} repeated or out of range"),
            });
        }
        seen[c] = true;
    }

    // dataset-order indices per class
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, &l) in dataset.labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut tasks = Vec::with_capacity(k / classes_per_task);
    for group in class_order.chunks(classes_per_task) {
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for &c in group {
            let idx = &by_class[c];
            let n_train = (idx.len() as f64 * train_ratio).round() as usize;
            let n_train = n_train.min(idx.len());
            train_idx.extend_from_slice(&idx[..n_train]);
            test_idx.extend_from_slice(&idx[n_train..]);
        }
        let subset = |ids: &[usize]| -> LabeledDataset {
            LabeledDataset {
                samples: ids.iter().map(|&i| dataset.samples[i].clone()).collect(),
                labels: ids.iter().map(|&i| dataset.labels[i]).collect(),
                channels: dataset.channels,
                length: dataset.length,
                num_classes: k,
            }
        };
        tasks.push(Task {
            train: subset(&train_idx),
            test: subset(&test_idx),
            classes: group.to_vec(),
        });
    }
    Ok(TaskStream {
        tasks,
        total_classes: k,
    })
}

// ── synthetic generator ─────────────────────────────────────────────────

/// Recipe for a separable multichannel sinusoid dataset. Class `k` is a
/// sinusoid at `base_freq + k * freq_step` cycles per window with a fixed
/// per-channel phase offset, jittered per sample, plus Gaussian noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub classes_per_task: usize,
    pub channels: usize,
    pub length: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub base_freq: f64,
    pub freq_step: f64,
    pub amplitude: f64,
    pub phase_jitter: f64,
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> SynthSpec {
        SynthSpec {
            num_classes: 6,
            classes_per_task: 2,
            channels: 2,
            length: 64,
            train_per_class: 200,
            test_per_class: 50,
            base_freq: 1.0,
            freq_step: 1.0,
            amplitude: 1.0,
            phase_jitter: 0.1,
            noise_level: 0.05,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(DataError::BadSpec("num_classes must be >= 1".into()));
        }
        if self.classes_per_task == 0 || !self.num_classes.is_multiple_of(self.classes_per_task) {
            return Err(DataError::BadSpec(format!(
                "{} classes not divisible by {} per task",
                self.num_classes, self.classes_per_task
            )));
        }
        if self.channels == 0 || self.length == 0 {
            return Err(DataError::BadSpec(
                "channels and length must be >= 1".into(),
            ));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(DataError::BadSpec(
                "per-class sample counts must be >= 1".into(),
            ));
        }
        if self.noise_level < 0.0 {
            return Err(DataError::BadSpec(format!(
                "noise level {} < 0",
                self.noise_level
            )));
        }
        if self.phase_jitter < 0.0 {
            return Err(DataError::BadSpec(format!(
                "phase jitter {} < 0",
                self.phase_jitter
            )));
        }
        Ok(())
    }

    pub fn train_ratio(&self) -> f64 {
        self.train_per_class as f64 / (self.train_per_class + self.test_per_class) as f64
    }
}

/// Generates the dataset described by `spec`, class-major, train rows before
/// test rows within each class. Same spec + seed gives an identical dataset.
pub fn make_synthetic(spec: &SynthSpec) -> Result<LabeledDataset> {
    spec.validate()?;
    let mut rng = substream(spec.seed, "data/synth");
    let per_class = spec.train_per_class + spec.test_per_class;
    let mut samples = Vec::with_capacity(spec.num_classes * per_class);
    let mut labels = Vec::with_capacity(spec.num_classes * per_class);
    let two_pi = std::f64::consts::TAU;
    for k in 0..spec.num_classes {
        let freq = spec.base_freq + k as f64 * spec.freq_step;
        for _ in 0..per_class {
            let mut s = Vec::with_capacity(spec.channels * spec.length);
            for c in 0..spec.channels {
                // fixed per-channel offset keeps classes linearly separable
                let base_phase = c as f64 * two_pi / (2.0 * spec.channels as f64);
                let jitter: f64 = spec.phase_jitter * rng.random_range(-1.0..1.0);
                for l in 0..spec.length {
                    let angle = two_pi * freq * l as f64 / spec.length as f64 + base_phase + jitter;
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    let v = spec.amplitude * angle.sin() + spec.noise_level * noise;
                    s.push(v as f32 as f64);
                }
            }
            samples.push(s);
            labels.push(k);
        }
    }
    LabeledDataset::new(
        samples,
        labels,
        spec.channels,
        spec.length,
        spec.num_classes,
    )
}
