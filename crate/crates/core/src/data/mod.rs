//! Datasets and persistence.

mod cache;
mod idx;
mod model_io;
mod synthetic;

use ndarray::{Array2, ArrayView1, Axis};

pub use cache::{load_dataset_cache, save_dataset_cache};
pub use idx::{load_idx, load_mnist, MnistSplit};
pub use model_io::{load_model, save_model, save_model_with_provenance};
pub use synthetic::{gen_synthetic, steps_reference_network, SyntheticKind};

use crate::error::{Error, Result};

/// Samples in `[0,1]^n` with labels in `0..m`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    name: String,
    inputs: Array2<f64>,
    labels: Vec<usize>,
    num_classes: usize,
}

impl LabeledDataset {
    /// Validates every invariant; out-of-range values are rejected, never
    /// clipped.
    pub fn new(name: impl Into<String>, inputs: Array2<f64>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::shape(format!("{} labels", inputs.nrows()), labels.len()));
        }
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(Error::invalid(format!("label {y} of sample {i} is not below {num_classes}")));
        }
        if let Some(((r, c), v)) = inputs.indexed_iter().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("input[{r}][{c}] = {v} outside [0,1]")));
        }
        Ok(LabeledDataset {
            name: name.into(),
            inputs,
            labels,
            num_classes,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn inputs(&self) -> &Array2<f64> {
        &self.inputs
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Input dimension `n`.
    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn sample(&self, i: usize) -> (ArrayView1<'_, f64>, usize) {
        (self.inputs.row(i), self.labels[i])
    }

    /// Rows `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> LabeledDataset {
        LabeledDataset {
            name: self.name.clone(),
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
        }
    }

    /// The first `n` samples.
    pub fn take(&self, n: usize) -> LabeledDataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        let mut out = self.select(&idx);
        if n < self.len() {
            out.name = format!("{}[..{n}]", self.name);
        }
        out
    }

    /// Same inputs with replacement labels (e.g. a target network's outputs).
    pub fn relabel(&self, name: impl Into<String>, labels: Vec<usize>) -> Result<LabeledDataset> {
        LabeledDataset::new(name, self.inputs.clone(), labels, self.num_classes)
    }
}
