//! Workload construction: synthetic images, class imbalance, Dirichlet
//! client partitioning and the server's balanced monitoring set.
//!
//! [`prepare`] runs the whole pipeline in a fixed order:
//! generate → reserve monitoring samples → induce imbalance → partition →
//! per-client 80/20 train/test split. Every step is a pure function of its
//! inputs and a derived seed.

mod io;
mod partition;
mod synth;

pub use io::{read_dataset, write_dataset, MAGIC};
pub use partition::{dirichlet_partition, induce_imbalance, keep_counts, reserve_ses, split_holdout};
pub use synth::{generate_synthetic, template, TEMPLATE_COUNT};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_seed, purpose};
use crate::tensor::Tensor;

/// Fraction of every shard held out for evaluation.
pub const TEST_FRACTION: f64 = 0.2;

/// Labelled images. `ids` are the sample indices assigned at generation and
/// follow every sample through subsetting.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub ids: Vec<usize>,
    pub num_classes: usize,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let n = images.shape().first().copied().unwrap_or(0);
        if images.ndim() != 4 || labels.len() != n {
            return Err(Error::Data(format!(
                "{} labels for images of shape {:?}",
                labels.len(),
                images.shape()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::Data(format!("label {bad} ≥ class count {num_classes}")));
        }
        let ids = (0..n).collect();
        Ok(Dataset { images, labels, ids, num_classes })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &y in &self.labels {
            h[y] += 1;
        }
        h
    }

    /// Per-sample size `C·H·W`.
    pub fn sample_len(&self) -> usize {
        self.images.shape()[1..].iter().product()
    }

    /// The samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let per = self.sample_len();
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        let mut data = Vec::with_capacity(indices.len() * per);
        for &i in indices {
            data.extend_from_slice(&self.images.data()[i * per..(i + 1) * per]);
        }
        Dataset {
            images: Tensor::new(shape, data).expect("subset shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            ids: indices.iter().map(|&i| self.ids[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Indices of samples with label `class`, in dataset order.
    pub fn class_indices(&self, class: usize) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &y)| y == class).map(|(i, _)| i).collect()
    }

    /// Images of the given samples as one batch tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        self.subset(indices).images
    }

    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::Data("nothing to concatenate".into()))?;
        let mut shape = first.images.shape().to_vec();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut ids = Vec::new();
        for p in parts {
            if p.images.shape()[1..] != shape[1..] || p.num_classes != first.num_classes {
                return Err(Error::Data("incompatible datasets".into()));
            }
            data.extend_from_slice(p.images.data());
            labels.extend_from_slice(&p.labels);
            ids.extend_from_slice(&p.ids);
        }
        shape[0] = labels.len();
        Ok(Dataset { images: Tensor::new(shape, data)?, labels, ids, num_classes: first.num_classes })
    }
}

/// One client's allocation and its class histogram.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub client_id: usize,
    pub dataset: Dataset,
    pub dis: Vec<usize>,
}

/// The server's class-balanced monitoring samples.
#[derive(Debug, Clone, PartialEq)]
pub struct SesSet {
    pub dataset: Dataset,
    pub per_class: usize,
}

impl SesSet {
    pub fn class_batch(&self, class: usize) -> (Tensor, Vec<usize>) {
        let idx = self.dataset.class_indices(class);
        let d = self.dataset.subset(&idx);
        (d.images, d.labels)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub classes: usize,
    pub samples_per_class: usize,
    pub imbalance_ratio: f64,
    pub dirichlet_alpha: f64,
    pub ses_per_class: usize,
    pub image_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            classes: 8,
            samples_per_class: 320,
            imbalance_ratio: 10.0,
            dirichlet_alpha: 0.5,
            ses_per_class: 8,
            image_size: 16,
        }
    }
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("data.classes", "need at least 2 classes"));
        }
        if self.classes > TEMPLATE_COUNT {
            return Err(Error::config("data.classes", format!("at most {TEMPLATE_COUNT} templates available")));
        }
        if !(self.imbalance_ratio >= 1.0) || !self.imbalance_ratio.is_finite() {
            return Err(Error::config("data.imbalance_ratio", "must be ≥ 1"));
        }
        if !(self.dirichlet_alpha > 0.0) || !self.dirichlet_alpha.is_finite() {
            return Err(Error::config("data.dirichlet_alpha", "must be > 0"));
        }
        if self.samples_per_class <= self.ses_per_class {
            return Err(Error::config("data.samples_per_class", "must exceed ses_per_class"));
        }
        if self.image_size < 8 {
            return Err(Error::config("data.image_size", "must be ≥ 8"));
        }
        Ok(())
    }
}

/// A client's local data after the holdout split.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientData {
    pub client_id: usize,
    pub train: Dataset,
    pub test: Dataset,
}

/// Everything a run needs: monitoring set, per-client data and the global
/// training histogram.
#[derive(Debug, Clone)]
pub struct FederatedData {
    pub ses: SesSet,
    pub shards: Vec<Shard>,
    pub clients: Vec<ClientData>,
    pub dis_g: Vec<usize>,
}

impl FederatedData {
    /// Union of every client's test split.
    pub fn cloud_test(&self) -> Result<Dataset> {
        let parts: Vec<&Dataset> = self.clients.iter().map(|c| &c.test).collect();
        Dataset::concat(&parts)
    }
}

/// Runs the full data pipeline for `clients` clients.
pub fn prepare(cfg: &DataConfig, clients: usize, seed: u64) -> Result<FederatedData> {
    cfg.validate()?;
    let step = |s: u64| derive_seed(seed, &[purpose::DATA, s]);
    let full = generate_synthetic(cfg, step(0))?;
    let (ses, rest) = reserve_ses(&full, cfg.ses_per_class, step(1))?;
    let imbalanced = induce_imbalance(&rest, cfg.imbalance_ratio, step(2))?;
    let shards = dirichlet_partition(&imbalanced, clients, cfg.dirichlet_alpha, step(3))?;
    let mut client_data = Vec::with_capacity(shards.len());
    for shard in &shards {
        let (train, test) =
            split_holdout(&shard.dataset, TEST_FRACTION, derive_seed(step(4), &[shard.client_id as u64]));
        client_data.push(ClientData { client_id: shard.client_id, train, test });
    }
    let mut dis_g = vec![0; cfg.classes];
    for c in &client_data {
        for (g, n) in dis_g.iter_mut().zip(c.train.histogram()) {
            *g += n;
        }
    }
    Ok(FederatedData { ses, shards, clients: client_data, dis_g })
}
