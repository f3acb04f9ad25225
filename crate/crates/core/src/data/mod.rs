//! Labeled image datasets: procedural generation, preprocessing, splits and
//! on-disk storage.

mod disk;
mod preprocess;
mod synth;

use serde::{Deserialize, Serialize};

use crate::corrupt::{corrupt_batch, CorruptionSpec};
use crate::error::{Error, Result};
use crate::rng::keyed_rng;
use crate::tensor::Tensor;

pub use disk::{load_dataset, read_ppm, save_dataset, write_ppm, LABELS_FILE, MANIFEST_FILE};
pub use preprocess::{
    augment_image, denormalize, normalize, preprocess_eval, preprocess_train, CROP_PADDING, MEAN,
    STD,
};
pub use synth::{class_style, render_sample, synth_generate, Fill, Shape};

/// Recipe for a procedurally generated dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub name: String,
    pub num_classes: usize,
    pub num_samples: usize,
    pub image_size: usize,
    pub seed: u64,
    #[serde(default)]
    pub corruption: Option<CorruptionSpec>,
}

impl DatasetSpec {
    pub fn synth(name: &str, num_samples: usize, seed: u64) -> Self {
        Self {
            name: name.to_string(),
            num_classes: 10,
            num_samples,
            image_size: 32,
            seed,
            corruption: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(2..=synth::MAX_CLASSES).contains(&self.num_classes) {
            return Err(Error::Config(format!(
                "num_classes must be in 2..={}, got {}",
                synth::MAX_CLASSES,
                self.num_classes
            )));
        }
        if self.num_samples == 0 {
            return Err(Error::Config("num_samples must be positive".into()));
        }
        if self.image_size < 8 {
            return Err(Error::Config(format!(
                "image_size must be at least 8, got {}",
                self.image_size
            )));
        }
        if let Some(c) = &self.corruption {
            c.validate()?;
        }
        Ok(())
    }
}

/// Which side of a deterministic split a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitPart {
    Train,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitInfo {
    pub part: SplitPart,
    pub seed: u64,
}

/// Everything recorded about a dataset besides its pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub num_classes: usize,
    pub num_samples: usize,
    pub image_size: usize,
    /// Generator recipe, when the images are synthetic.
    #[serde(default)]
    pub spec: Option<DatasetSpec>,
    #[serde(default)]
    pub corruption: Option<CorruptionSpec>,
    #[serde(default)]
    pub split: Option<SplitInfo>,
}

/// Images in `[0, 1]` with integer labels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBatch {
    /// `B × 3 × H × W`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn new(images: Tensor<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != shape[3] || shape[0] != labels.len() {
            return Err(Error::Dimension(format!(
                "images {:?} do not form a square RGB batch for {} labels",
                shape,
                labels.len()
            )));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Data(format!(
                "label {l} out of range for {num_classes} classes"
            )));
        }
        if images.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self { images, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.images.shape()[2]
    }

    pub fn image_len(&self) -> usize {
        self.images.len() / self.len().max(1)
    }

    /// Pixels of sample `i` as a flat `3 × H × W` slice.
    pub fn image(&self, i: usize) -> &[f32] {
        let len = self.image_len();
        &self.images.data()[i * len..(i + 1) * len]
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let len = self.image_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let mut shape = self.images.shape().to_vec();
        shape[0] = indices.len();
        Self {
            images: Tensor::new(shape, data).expect("consistent shape"),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub batch: ImageBatch,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, batch: ImageBatch) -> Result<Self> {
        if manifest.num_samples != batch.len() || manifest.image_size != batch.image_size() {
            return Err(Error::Data(format!(
                "manifest describes {} images of size {}, found {} of size {}",
                manifest.num_samples,
                manifest.image_size,
                batch.len(),
                batch.image_size()
            )));
        }
        if let Some(&l) = batch.labels.iter().find(|&&l| l >= manifest.num_classes) {
            return Err(Error::Data(format!("label {l} out of range")));
        }
        Ok(Self { manifest, batch })
    }

    pub fn len(&self) -> usize {
        self.batch.len()
    }

    pub fn is_empty(&self) -> bool {
        self.batch.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.manifest.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.batch.labels
    }

    pub fn images(&self) -> &Tensor<f32> {
        &self.batch.images
    }

    /// Subset keeping the manifest metadata.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut manifest = self.manifest.clone();
        manifest.num_samples = indices.len();
        Self {
            manifest,
            batch: self.batch.select(indices),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        self.labels().iter().for_each(|&l| counts[l] += 1);
        counts
    }

    /// Applies a corruption to every image and records it in the manifest.
    /// Results are quantized to 8 bits, the precision datasets are stored with.
    pub fn corrupted(&self, spec: &CorruptionSpec) -> Result<Self> {
        if let Some(existing) = &self.manifest.corruption {
            return Err(Error::Spec(format!(
                "dataset is already corrupted with {} severity {}",
                existing.kind, existing.severity
            )));
        }
        let images = quantize(&corrupt_batch(&self.batch.images, spec)?);
        let mut manifest = self.manifest.clone();
        manifest.corruption = Some(*spec);
        Ok(Self {
            manifest,
            batch: ImageBatch {
                images,
                labels: self.batch.labels.clone(),
            },
        })
    }
}

/// Rounds every value to the nearest multiple of 1/255.
pub fn quantize(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

fn shuffle(indices: &mut [usize], seed: u64, domain: &str, index: u64) {
    use rand::seq::SliceRandom;
    indices.shuffle(&mut keyed_rng(seed, domain, index));
}

/// Deterministic stratified 80/20 split.
///
/// Each class is permuted with its own seeded stream; its first 80% go to
/// train and the rest (at least one sample) to test. Both parts are then
/// shuffled so classes are interleaved.
pub fn split_80_20(data: &Dataset, seed: u64) -> Result<(Dataset, Dataset)> {
    if data.len() < 5 {
        return Err(Error::Split(format!(
            "need at least 5 samples to split, got {}",
            data.len()
        )));
    }
    let mut train = Vec::new();
    let mut test = Vec::new();
    for class in 0..data.num_classes() {
        let mut idx: Vec<usize> = (0..data.len())
            .filter(|&i| data.labels()[i] == class)
            .collect();
        match idx.len() {
            0 => continue,
            1 => {
                return Err(Error::Split(format!(
                    "class {class} has a single sample; every class needs at least 2"
                )))
            }
            n => {
                shuffle(&mut idx, seed, "split/class", class as u64);
                let n_test = ((n as f64 * 0.2).round() as usize).max(1);
                test.extend_from_slice(&idx[n - n_test..]);
                train.extend_from_slice(&idx[..n - n_test]);
            }
        }
    }
    shuffle(&mut train, seed, "split/order", 0);
    shuffle(&mut test, seed, "split/order", 1);
    let mut a = data.select(&train);
    let mut b = data.select(&test);
    a.manifest.split = Some(SplitInfo {
        part: SplitPart::Train,
        seed,
    });
    b.manifest.split = Some(SplitInfo {
        part: SplitPart::Test,
        seed,
    });
    Ok((a, b))
}
