//! Incremental task streams: disjoint-class sessions with train/test splits.
//!
//! Two sources are supported: Gaussian cluster data generated from a seed,
//! and precomputed embeddings read from CSV. In both cases the class order
//! is a seeded Fisher–Yates permutation, cut into `T` consecutive chunks;
//! when the class count does not divide evenly the earlier tasks take one
//! extra class each.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::rng::SeededRng;
use crate::scalar::Real;

/// Offset between the means of a confusable class pair, in units of the
/// cluster standard deviation.
pub const OVERLAP_OFFSET: f64 = 1.5;

const TEST_FRACTION: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub features: Vec<f64>,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskDataset {
    /// 1-based position in the stream.
    pub task_index: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
    pub class_set: Vec<usize>,
}

impl TaskDataset {
    pub fn train_matrix<T: Real>(&self) -> (Matrix<T>, Vec<usize>) {
        samples_to_matrix(&self.train)
    }

    pub fn test_matrix<T: Real>(&self) -> (Matrix<T>, Vec<usize>) {
        samples_to_matrix(&self.test)
    }
}

pub fn samples_to_matrix<T: Real>(samples: &[Sample]) -> (Matrix<T>, Vec<usize>) {
    let dim = samples.first().map_or(0, |s| s.features.len());
    let mut data = Vec::with_capacity(samples.len() * dim);
    for s in samples {
        data.extend(s.features.iter().map(|&v| T::of(v)));
    }
    let labels = samples.iter().map(|s| s.label).collect();
    (
        Matrix::from_vec(samples.len(), dim, data).expect("samples share one width"),
        labels,
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskStream {
    pub tasks: Vec<TaskDataset>,
    pub class_order: Vec<usize>,
    pub seed: u64,
    pub num_classes: usize,
    pub dim: usize,
}

impl TaskStream {
    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    /// Content hash over every label and feature bit pattern.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for c in &self.class_order {
            h.update((*c as u64).to_le_bytes());
        }
        for t in &self.tasks {
            h.update((t.task_index as u64).to_le_bytes());
            for s in t.train.iter().chain(&t.test) {
                h.update((s.label as u64).to_le_bytes());
                for v in &s.features {
                    h.update(v.to_bits().to_le_bytes());
                }
            }
        }
        hex(&h.finalize())
    }

    /// Test samples of tasks `1..=upto`.
    pub fn seen_test_samples(&self, upto: usize) -> impl Iterator<Item = &Sample> {
        self.tasks.iter().take(upto).flat_map(|t| t.test.iter())
    }
}

pub(crate) fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Seeded Fisher–Yates permutation of `0..num_classes`.
pub fn shuffle_class_order(num_classes: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..num_classes).collect();
    SeededRng::new(seed).shuffle(&mut order);
    order
}

/// Cuts `order` into `tasks` consecutive chunks, earlier chunks taking the
/// remainder.
pub fn partition_classes(order: &[usize], tasks: usize) -> Vec<Vec<usize>> {
    let base = order.len() / tasks;
    let extra = order.len() % tasks;
    let mut out = Vec::with_capacity(tasks);
    let mut start = 0;
    for t in 0..tasks {
        let len = base + usize::from(t < extra);
        out.push(order[start..start + len].to_vec());
        start += len;
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub dim: usize,
    pub separation: f64,
    pub overlap_classes: usize,
    pub tasks: usize,
    pub seed: u64,
}

/// Isotropic unit-variance Gaussian clusters with means on a sphere of
/// radius `separation`.
///
/// `overlap_classes` pairs are made confusable across tasks: the class at
/// position `C - 1 - j` of the class order gets a mean within
/// [`OVERLAP_OFFSET`] of the class at position `j`.
pub fn make_synthetic_stream(spec: &SyntheticSpec) -> Result<TaskStream> {
    let SyntheticSpec {
        num_classes,
        samples_per_class,
        dim,
        separation,
        overlap_classes,
        tasks,
        seed,
    } = *spec;
    if tasks == 0 || tasks > num_classes {
        return Err(Error::InvalidParameter(format!(
            "{tasks} tasks for {num_classes} classes"
        )));
    }
    if samples_per_class < 5 {
        return Err(Error::InvalidParameter(format!(
            "samples_per_class must be at least 5, got {samples_per_class}"
        )));
    }
    if dim < 2 {
        return Err(Error::InvalidParameter(format!(
            "dim must be at least 2, got {dim}"
        )));
    }
    if !(separation >= 0.0) || !separation.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "separation must be non-negative, got {separation}"
        )));
    }
    if 2 * overlap_classes > num_classes {
        return Err(Error::InvalidParameter(format!(
            "overlap_classes {overlap_classes} needs {} classes",
            2 * overlap_classes
        )));
    }

    let class_order = shuffle_class_order(num_classes, seed);
    let mut rng = SeededRng::with_stream(seed, 1);

    let mut means: Vec<Vec<f64>> = (0..num_classes)
        .map(|_| {
            let g: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
            let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            g.iter().map(|v| v / norm * separation).collect()
        })
        .collect();
    for j in 0..overlap_classes {
        let anchor = class_order[j];
        let partner = class_order[num_classes - 1 - j];
        let g: Vec<f64> = (0..dim).map(|_| rng.standard_normal()).collect();
        let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        means[partner] = means[anchor]
            .iter()
            .zip(&g)
            .map(|(m, d)| m + d / norm * OVERLAP_OFFSET)
            .collect();
    }

    let n_test = ((samples_per_class as f64) * TEST_FRACTION).round() as usize;
    let n_train = samples_per_class - n_test;
    let mut per_class: Vec<(Vec<Sample>, Vec<Sample>)> = Vec::with_capacity(num_classes);
    for (label, mean) in means.iter().enumerate() {
        let mut all: Vec<Sample> = (0..samples_per_class)
            .map(|_| Sample {
                features: mean.iter().map(|m| m + rng.standard_normal()).collect(),
                label,
            })
            .collect();
        let test = all.split_off(n_train);
        per_class.push((all, test));
    }

    let tasks = partition_classes(&class_order, tasks)
        .into_iter()
        .enumerate()
        .map(|(i, class_set)| {
            let train = class_set
                .iter()
                .flat_map(|&c| per_class[c].0.iter().cloned())
                .collect();
            let test = class_set
                .iter()
                .flat_map(|&c| per_class[c].1.iter().cloned())
                .collect();
            TaskDataset {
                task_index: i + 1,
                train,
                test,
                class_set,
            }
        })
        .collect();
    Ok(TaskStream {
        tasks,
        class_order,
        seed,
        num_classes,
        dim,
    })
}

/// Reads `label,f0,...,f{d-1}` rows and splits them into a seeded task
/// stream.
///
/// A sibling `<stem>.split` file lists test-set row indices (0-based, one per
/// line). Without it each class is split 80/20 using the seed.
pub fn load_embedding_stream(path: &Path, tasks: usize, seed: u64) -> Result<TaskStream> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let header = reader.headers().map_err(csv_err)?.clone();
    if header.get(0) != Some("label") {
        return Err(Error::Data(format!(
            "{}: header must start with `label`",
            path.display()
        )));
    }
    let dim = header.len() - 1;
    if dim == 0 {
        return Err(Error::Data(format!(
            "{}: no feature columns",
            path.display()
        )));
    }
    let mut samples = Vec::new();
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(csv_err)?;
        if record.len() != dim + 1 {
            return Err(Error::Data(format!(
                "row {row}: {} fields, expected {}",
                record.len(),
                dim + 1
            )));
        }
        let label: usize = record[0]
            .trim()
            .parse()
            .map_err(|_| Error::Data(format!("row {row}: bad label `{}`", &record[0])))?;
        let features = record
            .iter()
            .skip(1)
            .map(|f| match f.trim().parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::Data(format!("row {row}: bad value `{f}`"))),
            })
            .collect::<Result<Vec<f64>>>()?;
        samples.push(Sample { features, label });
    }
    if samples.is_empty() {
        return Err(Error::Data(format!("{}: no rows", path.display())));
    }
    let labels: BTreeSet<usize> = samples.iter().map(|s| s.label).collect();
    let num_classes = labels.len();
    if labels.iter().copied().ne(0..num_classes) {
        return Err(Error::Data(
            "labels must be the contiguous range 0..C".into(),
        ));
    }
    if tasks == 0 || tasks > num_classes {
        return Err(Error::InvalidParameter(format!(
            "{tasks} tasks for {num_classes} classes"
        )));
    }

    let split_path = path.with_extension("split");
    let is_test: Vec<bool> = if split_path.exists() {
        let text = std::fs::read_to_string(&split_path)?;
        let mut flags = vec![false; samples.len()];
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let idx: usize = line.parse().map_err(|_| {
                Error::Data(format!(
                    "{} line {}: bad index",
                    split_path.display(),
                    ln + 1
                ))
            })?;
            *flags.get_mut(idx).ok_or_else(|| {
                Error::Data(format!(
                    "{}: index {idx} out of range",
                    split_path.display()
                ))
            })? = true;
        }
        flags
    } else {
        let mut rng = SeededRng::with_stream(seed, 2);
        let mut flags = vec![false; samples.len()];
        for c in 0..num_classes {
            let mut idx: Vec<usize> = (0..samples.len())
                .filter(|&i| samples[i].label == c)
                .collect();
            rng.shuffle(&mut idx);
            let n_test = ((idx.len() as f64) * TEST_FRACTION).round() as usize;
            for &i in &idx[..n_test] {
                flags[i] = true;
            }
        }
        flags
    };

    let class_order = shuffle_class_order(num_classes, seed);
    let tasks = partition_classes(&class_order, tasks)
        .into_iter()
        .enumerate()
        .map(|(i, class_set)| {
            let member: BTreeSet<usize> = class_set.iter().copied().collect();
            let pick = |want_test: bool| {
                samples
                    .iter()
                    .zip(&is_test)
                    .filter(|(s, &t)| t == want_test && member.contains(&s.label))
                    .map(|(s, _)| s.clone())
                    .collect()
            };
            TaskDataset {
                task_index: i + 1,
                train: pick(false),
                test: pick(true),
                class_set,
            }
        })
        .collect();
    Ok(TaskStream {
        tasks,
        class_order,
        seed,
        num_classes,
        dim,
    })
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Data(format!("{other:?}")),
    }
}
