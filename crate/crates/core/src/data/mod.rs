//! Datasets: synthetic generation, IDX/CSV ingestion, the three-way split
//! protocol and OOD lesion synthesis.

mod io;
mod lesion;
mod split;
mod synthetic;

pub use io::{export_csv, load_csv, load_idx, load_idx_or_csv, parse_csv, parse_idx, IdxData, LoadOptions};
pub use lesion::{synth_lesions, LesionSize, LesionSpec};
pub use split::{split, SplitOutcome, SplitReport, SplitSpec};
pub use synthetic::{gen_synthetic, gen_synthetic_with, SyntheticParams};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Images with integer class labels. All images share one shape and every
/// pixel lies in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

impl LabeledSet {
    pub fn new(images: Vec<Tensor>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!("{} images but {} labels", images.len(), labels.len())));
        }
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if let Some(first) = images.first() {
            for (i, img) in images.iter().enumerate() {
                if img.shape() != first.shape() {
                    return Err(Error::Shape(format!(
                        "image {i} has shape {:?}, expected {:?}",
                        img.shape(),
                        first.shape()
                    )));
                }
                if let Some(v) = img.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                    return Err(Error::invalid(format!("image {i} has pixel {v} outside [0,1]")));
                }
            }
        }
        if let Some(l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::invalid(format!("label {l} out of range for {num_classes} classes")));
        }
        Ok(LabeledSet { images, labels, num_classes })
    }

    pub fn empty(num_classes: usize) -> Self {
        LabeledSet { images: Vec::new(), labels: Vec::new(), num_classes }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image_shape(&self) -> Option<&[usize]> {
        self.images.first().map(|t| t.shape())
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        LabeledSet {
            images: indices.iter().map(|&i| self.images[i].clone()).collect(),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// Indices of samples with the given label.
    pub fn indices_of(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels[i] == class).collect()
    }
}
