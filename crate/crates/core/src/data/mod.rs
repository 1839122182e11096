//! Datasets, task splitting, batching and augmentation.

mod augment;
mod mpds;
mod sampler;
mod split;
mod synthetic;

pub use augment::{augment, crop_flip, crop_padding};
pub use mpds::{load_mpds, read_mpds, save_mpds, write_mpds, MPDS_MAGIC, MPDS_VERSION};
pub use sampler::BatchSampler;
pub use split::{
    split_classwise, split_instancewise, split_train_test, Provenance, SplitKind, TaskSplit, TrainTestSplit,
};
pub use synthetic::{make_synthetic, SyntheticConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Labelled images, N×C×H×W, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    images: Vec<f32>,
    labels: Vec<usize>,
    class_count: usize,
}

impl Dataset {
    pub fn new(shape: [usize; 3], images: Vec<f32>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 {
            return Err(Error::Data(format!("invalid image shape {shape:?}")));
        }
        if labels.is_empty() {
            return Err(Error::Data("a dataset needs at least one instance".into()));
        }
        if images.len() != labels.len() * per {
            return Err(Error::Data(format!(
                "{} labels need {} pixel values, got {}",
                labels.len(),
                labels.len() * per,
                images.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!("label {bad} out of range for {class_count} classes")));
        }
        Ok(Self { shape, images, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn images(&self) -> &[f32] {
        &self.images
    }

    fn image_len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    /// Instances per class.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// The given instances, optionally relabelled through `relabel`.
    pub fn subset(&self, indices: &[usize], class_count: usize, relabel: impl Fn(usize) -> usize) -> Result<Self> {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
            labels.push(relabel(self.labels[i]));
        }
        Self::new(self.shape, images, labels, class_count)
    }

    /// Stacks the given instances into a B×C×H×W tensor with their labels.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.shape;
        let x = Tensor::new(vec![indices.len(), c, h, w], data)?;
        Ok((x, indices.iter().map(|&i| self.labels[i]).collect()))
    }

    pub fn channel_stats(&self) -> ChannelStats {
        let [c, h, w] = self.shape;
        let hw = h * w;
        let mut mean = vec![0.0f64; c];
        let mut sq = vec![0.0f64; c];
        for img in self.images.chunks_exact(c * hw) {
            for ch in 0..c {
                for &v in &img[ch * hw..(ch + 1) * hw] {
                    mean[ch] += v as f64;
                    sq[ch] += (v as f64) * (v as f64);
                }
            }
        }
        let n = (self.len() * hw) as f64;
        let mean: Vec<f64> = mean.iter().map(|m| m / n).collect();
        let std = sq.iter().zip(&mean).map(|(s, m)| (s / n - m * m).max(0.0).sqrt().max(1e-6)).collect();
        ChannelStats { mean, std }
    }

    /// `(x − mean) / std` per channel.
    pub fn standardize(&mut self, stats: &ChannelStats) -> Result<()> {
        let [c, h, w] = self.shape;
        if stats.mean.len() != c || stats.std.len() != c {
            return Err(Error::Data(format!("normalisation stats cover {} channels, data has {c}", stats.mean.len())));
        }
        let hw = h * w;
        for img in self.images.chunks_exact_mut(c * hw) {
            for ch in 0..c {
                let (m, s) = (stats.mean[ch], stats.std[ch]);
                for v in &mut img[ch * hw..(ch + 1) * hw] {
                    *v = ((*v as f64 - m) / s) as f32;
                }
            }
        }
        Ok(())
    }
}

/// Per-channel normalisation statistics of a source dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}
