//! Domain-labeled image corpora: directory ingestion, synthetic generation,
//! and batch materialization.

use std::path::PathBuf;
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use image::RgbImage;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{DsamError, Result};
use crate::init::param_rng;

pub mod index;
pub mod synthetic;
pub mod transform;

pub use index::{scan_dataset, select_target, DomainIndex, IndexEntry, ScanReport, TargetSplit};
pub use synthetic::{generate_synthetic, DomainStyle, SyntheticDomainSpec};
pub use transform::AugmentConfig;

#[derive(Clone, Debug)]
pub enum ImageSource {
    Memory(Arc<RgbImage>),
    File(PathBuf),
}

#[derive(Clone, Debug)]
pub struct Sample {
    pub id: u64,
    pub image: ImageSource,
    pub label: usize,
    /// Position in [`ImageDataset::domains`].
    pub domain: usize,
    pub path: PathBuf,
}

impl Sample {
    pub fn load(&self) -> Result<RgbImage> {
        match &self.image {
            ImageSource::Memory(img) => Ok(img.as_ref().clone()),
            ImageSource::File(path) => Ok(image::open(path)?.to_rgb8()),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ImageDataset {
    pub classes: Vec<String>,
    pub domains: Vec<String>,
    pub samples: Vec<Sample>,
}

impl ImageDataset {
    /// File-backed dataset; images are decoded lazily per batch.
    pub fn from_index(index: &DomainIndex) -> Self {
        let domains = index.domain_names();
        let samples = index
            .entries()
            .into_iter()
            .enumerate()
            .map(|(i, e)| Sample {
                id: i as u64,
                image: ImageSource::File(e.path.clone()),
                label: e.label,
                domain: domains.iter().position(|d| *d == e.domain).expect("indexed domain"),
                path: e.path,
            })
            .collect();
        ImageDataset {
            classes: index.classes.clone(),
            domains,
            samples,
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn domain_position(&self, name: &str) -> Result<usize> {
        self.domains
            .iter()
            .position(|d| d == name)
            .ok_or_else(|| DsamError::UnknownDomain(format!("`{name}`; available: {}", self.domains.join(", "))))
    }

    /// Sample indices of one domain, in dataset order.
    pub fn domain_samples(&self, domain: usize) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.domain == domain)
            .map(|(i, _)| i)
            .collect()
    }

    /// Images `(N, 3, S, S)` and labels `(N,)` for `indices`. With `augment`,
    /// each sample gets its own generator seeded from the caller's stream, so
    /// the result does not depend on decode parallelism.
    pub fn load_batch(
        &self,
        indices: &[usize],
        input_size: usize,
        augment: Option<(&AugmentConfig, &mut ChaCha8Rng)>,
        dtype: DType,
        device: &Device,
    ) -> Result<(Tensor, Tensor)> {
        if indices.is_empty() {
            return Err(DsamError::EmptyDataset("empty batch".into()));
        }
        let (cfg, seeds) = match augment {
            Some((cfg, rng)) => (Some(cfg), indices.iter().map(|_| rng.random::<u64>()).collect()),
            None => (None, vec![0u64; indices.len()]),
        };
        let planes = indices
            .par_iter()
            .zip(seeds.par_iter())
            .map(|(&i, &seed)| {
                let img = self.samples[i].load()?;
                Ok(match cfg {
                    Some(cfg) => transform::train_transform(&img, input_size, cfg, &mut param_rng(seed)),
                    None => transform::eval_transform(&img, input_size),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let data: Vec<f32> = planes.into_iter().flatten().collect();
        let images = Tensor::from_vec(data, (indices.len(), 3, input_size, input_size), device)?.to_dtype(dtype)?;
        let labels: Vec<u32> = indices.iter().map(|&i| self.samples[i].label as u32).collect();
        let labels = Tensor::from_vec(labels, indices.len(), device)?;
        Ok((images, labels))
    }
}
