//! Datasets with clean targets and several simulated annotators.
//!
//! Classification targets are one class id per sample; segmentation targets
//! are one `{0, 1}` id per pixel. Both are stored as flat `usize` label sets
//! with `labels_per_sample` entries per sample, so the trainer treats them
//! uniformly.
//!
//! Training code only ever sees a [`TrainView`], which has no route to the
//! clean targets.

mod annotate;
pub mod idx;
mod store;
mod synth;

pub use annotate::{annotate, annotator_seed, generating_matrices, curated_profiles, AnnotatorProfile, Style};
pub use store::{load_dir, save_dir, Manifest, ManifestAnnotator};
pub use synth::{make_segmentation_dataset, make_synthetic_blobs, stylize, SegmentationOptions, StyleFractions};

use crate::diff::Tensor;
use crate::error::{Error, Result};
use crate::morph::MaskNoise;
use crate::noise::NoiseSpec;
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Classification,
    Segmentation,
}

/// How an annotator's labels were produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnnotatorSource {
    /// Style-dependent label noise; one spec per style present.
    Labels(BTreeMap<Style, NoiseSpec>),
    Mask(MaskNoise),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Annotator {
    pub name: String,
    pub source: AnnotatorSource,
    /// Excluded from every [`TrainView`].
    #[serde(default)]
    pub withheld: bool,
    pub labels: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    task: Task,
    classes: usize,
    height: usize,
    width: usize,
    inputs: Vec<f64>,
    clean: Vec<usize>,
    styles: Option<Vec<Style>>,
    annotators: Vec<Annotator>,
}

impl LabeledDataset {
    /// A dataset with clean targets and no annotators yet.
    pub fn new(task: Task, classes: usize, height: usize, width: usize, inputs: Vec<f64>, clean: Vec<usize>) -> Result<Self> {
        let plane = height * width;
        if plane == 0 || inputs.len() % plane != 0 {
            return Err(Error::Dimension(format!("{} input values for {height}x{width} images", inputs.len())));
        }
        let n = inputs.len() / plane;
        let per = match task {
            Task::Classification => 1,
            Task::Segmentation => plane,
        };
        if clean.len() != n * per {
            return Err(Error::Dimension(format!("{} targets for {n} samples", clean.len())));
        }
        if let Some(bad) = clean.iter().find(|&&y| y >= classes) {
            return Err(Error::Data(format!("label {bad} outside 0..{classes}")));
        }
        Ok(LabeledDataset { task, classes, height, width, inputs, clean, styles: None, annotators: Vec::new() })
    }

    pub fn task(&self) -> Task {
        self.task
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / (self.height * self.width)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn labels_per_sample(&self) -> usize {
        match self.task {
            Task::Classification => 1,
            Task::Segmentation => self.height * self.width,
        }
    }

    pub fn inputs(&self) -> &[f64] {
        &self.inputs
    }

    pub fn image(&self, n: usize) -> &[f64] {
        let plane = self.height * self.width;
        &self.inputs[n * plane..(n + 1) * plane]
    }

    /// Ground truth. Evaluation and diagnostics only; never reachable from a [`TrainView`].
    pub fn clean_labels(&self) -> &[usize] {
        &self.clean
    }

    pub fn styles(&self) -> Option<&[Style]> {
        self.styles.as_deref()
    }

    pub fn annotators(&self) -> &[Annotator] {
        &self.annotators
    }

    pub fn annotator_count(&self) -> usize {
        self.annotators.len()
    }

    pub(crate) fn set_styles(&mut self, styles: Vec<Style>) {
        assert_eq!(styles.len(), self.len());
        self.styles = Some(styles);
    }

    pub(crate) fn inputs_mut(&mut self) -> &mut [f64] {
        &mut self.inputs
    }

    pub fn push_annotator(&mut self, annotator: Annotator) -> Result<()> {
        if annotator.labels.len() != self.clean.len() {
            return Err(Error::Dimension(format!(
                "annotator `{}` has {} labels, dataset needs {}",
                annotator.name,
                annotator.labels.len(),
                self.clean.len()
            )));
        }
        if let Some(bad) = annotator.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Data(format!("annotator label {bad} outside 0..{}", self.classes)));
        }
        self.annotators.push(annotator);
        Ok(())
    }

    pub fn clear_annotators(&mut self) {
        self.annotators.clear();
    }

    /// New dataset holding `indices` in order.
    pub fn subset(&self, indices: &[usize]) -> LabeledDataset {
        let plane = self.height * self.width;
        let per = self.labels_per_sample();
        let gather_labels = |src: &[usize]| -> Vec<usize> {
            indices.iter().flat_map(|&n| src[n * per..(n + 1) * per].iter().copied()).collect()
        };
        LabeledDataset {
            task: self.task,
            classes: self.classes,
            height: self.height,
            width: self.width,
            inputs: indices.iter().flat_map(|&n| self.inputs[n * plane..(n + 1) * plane].iter().copied()).collect(),
            clean: gather_labels(&self.clean),
            styles: self.styles.as_ref().map(|s| indices.iter().map(|&n| s[n]).collect()),
            annotators: self
                .annotators
                .iter()
                .map(|a| Annotator { labels: gather_labels(&a.labels), ..a.clone() })
                .collect(),
        }
    }

    pub fn head(&self, n: usize) -> LabeledDataset {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    pub fn train_view(&self) -> TrainView<'_> {
        TrainView {
            dataset: self,
            annotators: self.annotators.iter().filter(|a| !a.withheld).collect(),
        }
    }

    /// `[B, 1, H, W]` input tensor for the given samples.
    pub fn input_batch(&self, indices: &[usize]) -> Tensor {
        let plane = self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * plane);
        for &n in indices {
            data.extend_from_slice(&self.inputs[n * plane..(n + 1) * plane]);
        }
        Tensor::new(vec![indices.len(), 1, self.height, self.width], data).expect("consistent extents")
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_dir(self, dir)
    }

    /// Reads MNIST-style image and label IDX files. Pixel bytes are scaled to `[0, 1]`.
    pub fn load_idx(images: &Path, labels: &Path) -> Result<Self> {
        let img = idx::read(images)?;
        if img.magic() != idx::MAGIC_IMAGES {
            return Err(Error::Format(format!("{}: magic 0x{:08x} is not an image file", images.display(), img.magic())));
        }
        let lab = idx::read(labels)?;
        if lab.magic() != idx::MAGIC_LABELS {
            return Err(Error::Format(format!("{}: magic 0x{:08x} is not a label file", labels.display(), lab.magic())));
        }
        let (n, h, w) = (img.dims[0], img.dims[1], img.dims[2]);
        if lab.dims[0] != n {
            return Err(Error::Format(format!("{n} images but {} labels", lab.dims[0])));
        }
        let pixels: Vec<f64> = img.into_u8()?.into_iter().map(|b| f64::from(b) / 255.0).collect();
        let labels: Vec<usize> = lab.into_u8()?.into_iter().map(usize::from).collect();
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1).max(2);
        LabeledDataset::new(Task::Classification, classes, h, w, pixels, labels)
    }
}

/// What the trainer sees: inputs plus the non-withheld annotators' labels.
#[derive(Clone, Debug)]
pub struct TrainView<'a> {
    dataset: &'a LabeledDataset,
    annotators: Vec<&'a Annotator>,
}

/// One minibatch.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    /// `[B, 1, H, W]`.
    pub inputs: Tensor,
    /// One flat label vector per annotator, `B * labels_per_sample` long.
    pub labels: Vec<Vec<usize>>,
}

impl<'a> TrainView<'a> {
    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }

    pub fn task(&self) -> Task {
        self.dataset.task
    }

    pub fn classes(&self) -> usize {
        self.dataset.classes
    }

    pub fn height(&self) -> usize {
        self.dataset.height
    }

    pub fn width(&self) -> usize {
        self.dataset.width
    }

    pub fn annotator_count(&self) -> usize {
        self.annotators.len()
    }

    pub fn annotator_names(&self) -> Vec<&str> {
        self.annotators.iter().map(|a| a.name.as_str()).collect()
    }

    pub fn batch(&self, indices: &[usize]) -> Batch {
        let per = self.dataset.labels_per_sample();
        Batch {
            indices: indices.to_vec(),
            inputs: self.dataset.input_batch(indices),
            labels: self
                .annotators
                .iter()
                .map(|a| indices.iter().flat_map(|&n| a.labels[n * per..(n + 1) * per].iter().copied()).collect())
                .collect(),
        }
    }

    /// Minibatches of one epoch in a shuffled order fixed by `(seed, epoch)`.
    pub fn batches(&self, batch_size: usize, seed: u64, epoch: usize) -> impl Iterator<Item = Batch> + '_ {
        let order = epoch_order(self.len(), seed, epoch);
        let chunks: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
        chunks.into_iter().map(move |idx| self.batch(&idx))
    }
}

/// Permutation of `0..n` for the given epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::indexed(seed, "batches", epoch as u64));
    order
}
